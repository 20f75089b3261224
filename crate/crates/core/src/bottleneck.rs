//! Sparse-autoencoder + discrete codebook bottleneck.
//!
//! An activation `a` is projected up by the SAE encoder, passed through ReLU
//! and layer norm, matched against the codebook by cosine similarity, replaced
//! by the sum of its top-S codes, and projected back down by the SAE decoder.
//! Deleted codes stay in the matrix (indices are stable for audit) but are
//! never selected again.

use std::cmp::Ordering;

use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{dot, gemm, l2_norm, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Code matrix plus deletion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookState {
    codes: Tensor,
    deleted: Vec<bool>,
    top_s: usize,
}

/// SAE weights around the codebook, generic over the parameter carrier so the
/// same layout serves stored tensors and graph handles.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<T> {
    /// `d x F`, applied as `a . w_enc`.
    pub w_enc: T,
    pub b_enc: T,
    pub norm_gain: T,
    pub norm_bias: T,
    /// `F x d`.
    pub w_dec: T,
    pub b_dec: T,
    /// Layer norm after the ReLU encoder. Disabled only in fixtures.
    pub layer_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub omega: Vec<usize>,
    pub similarities: Vec<f64>,
    pub h_hat: Vec<f64>,
}

pub fn cosine_similarity(x: &[f64], c: &[f64]) -> f64 {
    let nx = l2_norm(x);
    let nc = l2_norm(c);
    if nx == 0.0 || nc == 0.0 {
        return 0.0;
    }
    dot(x, c) / (nx * nc)
}

/// Descending similarity, ascending index on ties.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

fn top_of(mut candidates: Vec<(f64, usize)>, s: usize) -> Vec<(f64, usize)> {
    if s < candidates.len() {
        candidates.select_nth_unstable_by(s - 1, rank_order);
        candidates.truncate(s);
    }
    candidates.sort_by(rank_order);
    candidates
}

impl CodebookState {
    pub fn new(codes: Tensor, top_s: usize) -> Result<Self> {
        if codes.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "codebook must be K x F, got {:?}",
                codes.shape()
            )));
        }
        let k = codes.rows();
        if top_s == 0 || top_s > k {
            return Err(Error::Capacity {
                required: top_s.max(1),
                live: k,
            });
        }
        Ok(Self {
            deleted: vec![false; k],
            codes,
            top_s,
        })
    }

    pub fn with_mask(codes: Tensor, top_s: usize, deleted: Vec<bool>) -> Result<Self> {
        let mut cb = Self::new(codes, top_s)?;
        if deleted.len() != cb.num_codes() {
            return Err(Error::Dimension(format!(
                "deletion mask of {} for {} codes",
                deleted.len(),
                cb.num_codes()
            )));
        }
        cb.deleted = deleted;
        if cb.live_count() < top_s {
            return Err(Error::Capacity {
                required: top_s,
                live: cb.live_count(),
            });
        }
        Ok(cb)
    }

    pub fn num_codes(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn top_s(&self) -> usize {
        self.top_s
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn codes_mut(&mut self) -> &mut Tensor {
        &mut self.codes
    }

    pub fn code(&self, k: usize) -> &[f64] {
        self.codes.row(k)
    }

    pub fn deleted_mask(&self) -> &[bool] {
        &self.deleted
    }

    pub fn is_deleted(&self, k: usize) -> bool {
        self.deleted[k]
    }

    pub fn live_count(&self) -> usize {
        self.deleted.iter().filter(|d| !**d).count()
    }

    pub fn deleted_indices(&self) -> Vec<usize> {
        (0..self.deleted.len())
            .filter(|&k| self.deleted[k])
            .collect()
    }

    /// Masks the given codes out of every future selection. Returns how many
    /// were not already deleted. Nothing changes when an error is returned.
    pub fn delete_codes(&mut self, indices: &[usize]) -> Result<usize> {
        let k = self.num_codes();
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Index(format!("code {bad} of {k}")));
        }
        let mut fresh: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| !self.deleted[i])
            .collect();
        fresh.sort_unstable();
        fresh.dedup();
        let live_after = self.live_count() - fresh.len();
        if live_after < self.top_s {
            return Err(Error::Capacity {
                required: self.top_s,
                live: live_after,
            });
        }
        for &i in &fresh {
            self.deleted[i] = true;
        }
        Ok(fresh.len())
    }

    fn check_width(&self, s: usize) -> Result<()> {
        let live = self.live_count();
        if s == 0 || s > live {
            return Err(Error::Capacity {
                required: s.max(1),
                live,
            });
        }
        Ok(())
    }

    /// Cosine similarity of every row of `h` (`N x F`) against every code,
    /// as a row-major `N x K` buffer.
    pub fn similarity_matrix(&self, h: &Tensor) -> Result<Vec<f64>> {
        let (n, f) = (h.rows(), h.cols());
        if f != self.dim() {
            return Err(Error::Dimension(format!(
                "activation width {f} vs code width {}",
                self.dim()
            )));
        }
        let k = self.num_codes();
        let mut sims = vec![0.0; n * k];
        gemm(
            n,
            f,
            k,
            h.data(),
            false,
            self.codes.data(),
            true,
            0.0,
            &mut sims,
        );
        let code_norms: Vec<f64> = (0..k).map(|i| l2_norm(self.codes.row(i))).collect();
        for (r, row) in sims.chunks_mut(k).enumerate() {
            let hn = l2_norm(h.row(r));
            for (s, cn) in row.iter_mut().zip(&code_norms) {
                let denom = hn * cn;
                *s = if denom > 0.0 { *s / denom } else { 0.0 };
            }
        }
        Ok(sims)
    }

    /// Top-`s` live codes for each row of `h`, ranked by similarity with ties
    /// broken toward the lower index. Returns `(omega, similarities)` per row.
    pub fn select_rows(&self, h: &Tensor, s: usize) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
        self.check_width(s)?;
        let sims = self.similarity_matrix(h)?;
        let k = self.num_codes();
        Ok(sims
            .chunks(k)
            .map(|row| {
                let candidates = row
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !self.deleted[*i])
                    .map(|(i, &v)| (v, i))
                    .collect();
                let top = top_of(candidates, s);
                (
                    top.iter().map(|t| t.1).collect(),
                    top.iter().map(|t| t.0).collect(),
                )
            })
            .collect())
    }

    pub fn sum_codes(&self, omega: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for &k in omega {
            out.iter_mut().zip(self.code(k)).for_each(|(o, c)| *o += c);
        }
        out
    }
}

/// Single-activation top-`s` selection using the direct cosine formula.
pub fn select_top_s(h: &[f64], cb: &CodebookState, s: usize) -> Result<SelectionResult> {
    cb.check_width(s)?;
    if h.len() != cb.dim() {
        return Err(Error::Dimension(format!(
            "activation width {} vs code width {}",
            h.len(),
            cb.dim()
        )));
    }
    let candidates = (0..cb.num_codes())
        .filter(|&k| !cb.is_deleted(k))
        .map(|k| (cosine_similarity(h, cb.code(k)), k))
        .collect();
    let top = top_of(candidates, s);
    let omega: Vec<usize> = top.iter().map(|t| t.1).collect();
    Ok(SelectionResult {
        h_hat: cb.sum_codes(&omega),
        similarities: top.iter().map(|t| t.0).collect(),
        omega,
    })
}

impl<T> SaeParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> SaeParams<U> {
        SaeParams {
            w_enc: f(&self.w_enc),
            b_enc: f(&self.b_enc),
            norm_gain: f(&self.norm_gain),
            norm_bias: f(&self.norm_bias),
            w_dec: f(&self.w_dec),
            b_dec: f(&self.b_dec),
            layer_norm: self.layer_norm,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.w_enc"), &self.w_enc);
        f(format!("{prefix}.b_enc"), &self.b_enc);
        f(format!("{prefix}.norm_gain"), &self.norm_gain);
        f(format!("{prefix}.norm_bias"), &self.norm_bias);
        f(format!("{prefix}.w_dec"), &self.w_dec);
        f(format!("{prefix}.b_dec"), &self.b_dec);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.w_enc"), &mut self.w_enc);
        f(format!("{prefix}.b_enc"), &mut self.b_enc);
        f(format!("{prefix}.norm_gain"), &mut self.norm_gain);
        f(format!("{prefix}.norm_bias"), &mut self.norm_bias);
        f(format!("{prefix}.w_dec"), &mut self.w_dec);
        f(format!("{prefix}.b_dec"), &mut self.b_dec);
    }
}

impl SaeParams<Tensor> {
    /// Zero-initialized parameters for activation width `d` and code width `f`.
    pub fn zeros(d: usize, f: usize) -> Result<Self> {
        if f < d {
            return Err(Error::config(
                "code_dim",
                format!("SAE width {f} must be at least the activation width {d}"),
            ));
        }
        Ok(Self {
            w_enc: Tensor::zeros(&[d, f]),
            b_enc: Tensor::zeros(&[f]),
            norm_gain: Tensor::full(&[f], 1.0),
            norm_bias: Tensor::zeros(&[f]),
            w_dec: Tensor::zeros(&[f, d]),
            b_dec: Tensor::zeros(&[d]),
            layer_norm: true,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn code_dim(&self) -> usize {
        self.w_enc.cols()
    }
}

/// Kaiming-uniform ReLU bound `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub(crate) fn kaiming_fill(t: &mut Tensor, fan_in: usize, rng: &mut rng::Rng) {
    let bound = kaiming_bound(fan_in);
    let dist = Uniform::new_inclusive(-bound, bound);
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
}

/// Fills `codes` with independent directions drawn uniformly on the unit sphere.
pub(crate) fn unit_sphere_fill(codes: &mut Tensor, rng: &mut rng::Rng) {
    let f = codes.cols();
    for k in 0..codes.rows() {
        let row = codes.row_mut(k);
        loop {
            row.iter_mut()
                .for_each(|v| *v = StandardNormal.sample(&mut *rng));
            let n = l2_norm(row);
            if n > 1e-12 {
                row.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
        debug_assert_eq!(row.len(), f);
    }
}

/// Kaiming-uniform SAE weights, unit-norm codes, zero biases, unit norm gain.
pub fn kaiming_init(sae: &mut SaeParams<Tensor>, cb: &mut CodebookState, seed: u64) {
    let mut r = rng::stream(seed, "bottleneck.init");
    let (d, f) = (sae.input_dim(), sae.code_dim());
    kaiming_fill(&mut sae.w_enc, d, &mut r);
    kaiming_fill(&mut sae.w_dec, f, &mut r);
    sae.b_enc.data_mut().fill(0.0);
    sae.b_dec.data_mut().fill(0.0);
    sae.norm_gain.data_mut().fill(1.0);
    sae.norm_bias.data_mut().fill(0.0);
    unit_sphere_fill(&mut cb.codes, &mut r);
}

/// Graph handles produced by [`bottleneck_graph`].
pub struct BottleneckOutput {
    pub a_hat: Var,
    pub h_enc: Var,
    pub selections: Vec<Vec<usize>>,
}

/// Builds the bottleneck on `a` (`N x d`) inside `g`. Selection uses the
/// current deletion mask; `codes` must be the graph handle for `cb`'s matrix.
pub fn bottleneck_graph(
    g: &mut Graph,
    a: Var,
    sae: &SaeParams<Var>,
    codes: Var,
    cb: &CodebookState,
) -> Result<BottleneckOutput> {
    let h_enc = encode_graph(g, a, sae)?;
    let selections: Vec<Vec<usize>> = cb
        .select_rows(g.value(h_enc), cb.top_s())?
        .into_iter()
        .map(|(omega, _)| omega)
        .collect();
    let h_hat = g.code_sum(h_enc, codes, selections.clone())?;
    let dec = g.matmul(h_hat, sae.w_dec)?;
    let a_hat = g.add_row(dec, sae.b_dec)?;
    Ok(BottleneckOutput {
        a_hat,
        h_enc,
        selections,
    })
}

/// `layer_norm(relu(a . w_enc + b_enc))`, the query matched against codes.
pub fn encode_graph(g: &mut Graph, a: Var, sae: &SaeParams<Var>) -> Result<Var> {
    let pre = g.matmul(a, sae.w_enc)?;
    let pre = g.add_row(pre, sae.b_enc)?;
    let h = g.relu(pre);
    if sae.layer_norm {
        g.layer_norm(h, sae.norm_gain, sae.norm_bias, NORM_EPS)
    } else {
        Ok(h)
    }
}

/// Runs one activation through the bottleneck with the current weights.
pub fn bottleneck_forward(
    a: &[f64],
    sae: &SaeParams<Tensor>,
    cb: &CodebookState,
) -> Result<(Vec<f64>, SelectionResult)> {
    if a.len() != sae.input_dim() || sae.code_dim() != cb.dim() {
        return Err(Error::Dimension(format!(
            "activation {} into SAE {}x{} with codes of width {}",
            a.len(),
            sae.input_dim(),
            sae.code_dim(),
            cb.dim()
        )));
    }
    let mut g = Graph::new();
    let av = g.constant(Tensor::new(vec![1, a.len()], a.to_vec())?);
    let sv = sae.map(&mut |t| g.constant(t.clone()));
    let h_enc = encode_graph(&mut g, av, &sv)?;
    let selection = select_top_s(g.value(h_enc).data(), cb, cb.top_s())?;
    let h_hat = g.constant(Tensor::new(vec![1, cb.dim()], selection.h_hat.clone())?);
    let dec = g.matmul(h_hat, sv.w_dec)?;
    let out = g.add_row(dec, sv.b_dec)?;
    Ok((g.value(out).data().to_vec(), selection))
}
