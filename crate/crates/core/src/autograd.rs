//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so insertion order is a valid topological order and
//! [`Graph::backward`] simply walks the tape in reverse.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch layout for [`Graph::attention`]. Queries and keys are stored as
/// `(batch * len) x d_model` matrices.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Number of valid (non-padding) keys per batch row; keys at or beyond the
    /// length are masked out.
    pub key_lens: Vec<usize>,
    pub causal: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Mse {
        a: Var,
        b: Var,
        rows: Option<Vec<bool>>,
        count: usize,
    },
    /// Sum of selected code rows; the gradient reaches the selected codes
    /// exactly and is copied unchanged to the query (straight-through).
    CodeSum {
        query: Var,
        codes: Var,
        selections: Vec<Vec<usize>>,
    },
    CodesL1 {
        codes: Var,
        multiplicity: Vec<(usize, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node; gradients are tracked when the tensor's `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Trainable leaf copied from a parameter tensor.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("parameter tensors are well formed");
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so the tape may be differentiated again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what} {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.len() != n {
            return Err(Error::Dimension(format!(
                "bias of length {} for rows of width {n}",
                tb.len()
            )));
        }
        let mut out = tx.clone();
        out.clear_grad();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Normalizes each row to zero mean and unit population variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(Error::Dimension(format!(
                "layer_norm over width {d} with gain {:?} and bias {:?}",
                tg.shape(),
                tb.shape()
            )));
        }
        if eps < 0.0 {
            return Err(Error::Contract(
                "layer_norm eps must be non-negative".into(),
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let xr = tx.row(r);
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            rstd[r] = inv;
            for c in 0..d {
                let h = (xr[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("id {id} in table of {v} rows")));
            }
            out.extend_from_slice(t.row(id));
        }
        if ids.is_empty() {
            return Err(Error::Dimension("embedding of an empty id list".into()));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries, keys and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let AttentionLayout {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = layout;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        if tq.rows() != batch * q_len
            || tk.rows() != batch * k_len
            || tv.rows() != batch * k_len
            || tk.cols() != d
            || tv.cols() != d
            || layout.key_lens.len() != batch
        {
            return Err(Error::Dimension(format!(
                "attention layout {batch}x{q_len}/{k_len} vs q {:?} k {:?} v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if layout.key_lens.iter().any(|&l| l == 0 || l > k_len) {
            return Err(Error::Contract(
                "every batch row needs 1..=k_len valid keys".into(),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        let mut out = vec![0.0; batch * q_len * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for b in 0..batch {
            let klen = layout.key_lens[b];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let limit = if layout.causal { klen.min(i + 1) } else { klen };
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let qi = &qd[(b * q_len + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..limit {
                        let kj = &kd[(b * k_len + j) * d + off..][..dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        p[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for pj in p.iter_mut().take(limit) {
                        *pj = (*pj - max).exp();
                        z += *pj;
                    }
                    let o = &mut out[(b * q_len + i) * d + off..][..dh];
                    for j in 0..limit {
                        p[j] /= z;
                        let vj = &vd[(b * k_len + j) * d + off..][..dh];
                        o.iter_mut().zip(vj).for_each(|(o, v)| *o += p[j] * v);
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch * q_len, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping rows whose target equals `ignore_index`. Returns 0
    /// when every row is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        let mut count = 0;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt == ignore_index {
                continue;
            }
            if tgt >= v {
                return Err(Error::Index(format!("target {tgt} with vocabulary {v}")));
            }
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut z = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|pj| *pj /= z);
            loss += z.ln() + max - row[tgt];
            count += 1;
        }
        let value = if count > 0 { loss / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean of squared differences over every element of the included rows.
    pub fn mse(&mut self, a: Var, b: Var, rows: Option<&[bool]>) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = (ta.rows(), ta.cols());
        if let Some(mask) = rows {
            if mask.len() != n {
                return Err(Error::Dimension(format!(
                    "row mask of {} for {n} rows",
                    mask.len()
                )));
            }
        }
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..n {
            if rows.is_some_and(|m| !m[r]) {
                continue;
            }
            total += ta
                .row(r)
                .iter()
                .zip(tb.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
            count += d;
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Mse {
                a,
                b,
                rows: rows.map(|m| m.to_vec()),
                count,
            },
            rg,
        ))
    }

    /// Row `i` of the output is the sum of code rows `selections[i]`.
    ///
    /// Backward copies the upstream gradient straight through to `query` and
    /// scatters it into each selected code.
    pub fn code_sum(&mut self, query: Var, codes: Var, selections: Vec<Vec<usize>>) -> Result<Var> {
        let (tq, tc) = (self.value(query), self.value(codes));
        let (n, f) = (tq.rows(), tq.cols());
        if tc.cols() != f || selections.len() != n {
            return Err(Error::Dimension(format!(
                "code_sum query {:?}, codes {:?}, {} selections",
                tq.shape(),
                tc.shape(),
                selections.len()
            )));
        }
        let k = tc.rows();
        let mut out = vec![0.0; n * f];
        for (r, sel) in selections.iter().enumerate() {
            let o = &mut out[r * f..(r + 1) * f];
            for &idx in sel {
                if idx >= k {
                    return Err(Error::Index(format!("code {idx} of {k}")));
                }
                o.iter_mut().zip(tc.row(idx)).for_each(|(o, c)| *o += c);
            }
        }
        let out = Tensor::new(vec![n, f], out)?;
        let rg = self.rg(query) || self.rg(codes);
        Ok(self.push(
            out,
            Op::CodeSum {
                query,
                codes,
                selections,
            },
            rg,
        ))
    }

    /// `sum over listed selections of sum_f |c_k^f|`; a code listed twice
    /// counts twice.
    pub fn codes_l1<'a>(
        &mut self,
        codes: Var,
        selections: impl IntoIterator<Item = &'a [usize]>,
    ) -> Result<Var> {
        let tc = self.value(codes);
        let k = tc.rows();
        let mut counts = vec![0.0; k];
        for sel in selections {
            for &idx in sel {
                if idx >= k {
                    return Err(Error::Index(format!("code {idx} of {k}")));
                }
                counts[idx] += 1.0;
            }
        }
        let multiplicity: Vec<(usize, f64)> = counts
            .into_iter()
            .enumerate()
            .filter(|(_, c)| *c > 0.0)
            .collect();
        let value = multiplicity
            .iter()
            .map(|&(idx, m)| m * tc.row(idx).iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        let rg = self.rg(codes);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CodesL1 {
                codes,
                multiplicity,
            },
            rg,
        ))
    }

    /// Populates gradients of every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; call reset() first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // The op is moved out so cached forward state can be read while input
        // gradient buffers are borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        propagate_op(&self.nodes, &mut self.grads, &op, g);
        self.nodes[idx].op = op;
    }
}

fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn value(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}

fn propagate_op(nodes: &[Node], grads: &mut [Option<Vec<f64>>], op: &Op, g: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (value(nodes, *a).rows(), value(nodes, *a).cols());
            let n = value(nodes, *b).cols();
            if nodes[a.0].requires_grad {
                let bd = value(nodes, *b).data();
                let ga = grad_buf(nodes, grads, *a).unwrap();
                gemm(m, n, k, g, false, bd, true, 1.0, ga);
            }
            if nodes[b.0].requires_grad {
                let ad = value(nodes, *a).data();
                let gb = grad_buf(nodes, grads, *b).unwrap();
                gemm(k, m, n, ad, true, g, false, 1.0, gb);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(buf) = grad_buf(nodes, grads, v) {
                    buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(buf) = grad_buf(nodes, grads, *b) {
                buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (value(nodes, *a).data(), value(nodes, *b).data());
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                for ((x, gi), bi) in buf.iter_mut().zip(g).zip(bd) {
                    *x += gi * bi;
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *b) {
                for ((x, gi), ai) in buf.iter_mut().zip(g).zip(ad) {
                    *x += gi * ai;
                }
            }
        }
        Op::AddRow(x, bias) => {
            let n = value(nodes, *x).cols();
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(buf) = grad_buf(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    buf.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                buf.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }
        }
        Op::Relu(x) => {
            let xd = value(nodes, *x).data();
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for ((a, b), xv) in buf.iter_mut().zip(g).zip(xd) {
                    if *xv > 0.0 {
                        *a += b;
                    }
                }
            }
        }
        Op::Sum(x) => {
            let s = g[0];
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                buf.iter_mut().for_each(|a| *a += s);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = value(nodes, *x).cols();
            let gd = value(nodes, *gain).data();
            if let Some(buf) = grad_buf(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        buf[c] += grow[c] * hrow[c];
                    }
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *bias) {
                for grow in g.chunks(d) {
                    buf.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for c in 0..d {
                        dxhat[c] = grow[c] * gd[c];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dh: f64 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum();
                    let inv = rstd[r] / d as f64;
                    let out = &mut buf[r * d..(r + 1) * d];
                    for c in 0..d {
                        out[c] += inv * (d as f64 * dxhat[c] - sum_d - hrow[c] * sum_dh);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = value(nodes, *table).cols();
            if let Some(buf) = grad_buf(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut buf[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        } => attention_backward(nodes, grads, *q, *k, *v, layout, probs, g),
        Op::CrossEntropy {
            logits,
            targets,
            ignore_index,
            probs,
            count,
        } => {
            if *count > 0 {
                let v = value(nodes, *logits).cols();
                let s = g[0] / *count as f64;
                if let Some(buf) = grad_buf(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        let row = &mut buf[r * v..(r + 1) * v];
                        for (j, x) in row.iter_mut().enumerate() {
                            let p = probs[r * v + j];
                            *x += s * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
        }
        Op::Mse { a, b, rows, count } => {
            if *count > 0 {
                let d = value(nodes, *a).cols();
                let s = 2.0 * g[0] / *count as f64;
                let diff: Vec<f64> = value(nodes, *a)
                    .data()
                    .iter()
                    .zip(value(nodes, *b).data())
                    .enumerate()
                    .map(|(i, (x, y))| {
                        let included = rows.as_ref().is_none_or(|m| m[i / d]);
                        if included {
                            s * (x - y)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if let Some(buf) = grad_buf(nodes, grads, *a) {
                    buf.iter_mut().zip(&diff).for_each(|(x, y)| *x += y);
                }
                if let Some(buf) = grad_buf(nodes, grads, *b) {
                    buf.iter_mut().zip(&diff).for_each(|(x, y)| *x -= y);
                }
            }
        }
        Op::CodeSum {
            query,
            codes,
            selections,
        } => {
            let f = value(nodes, *query).cols();
            if let Some(buf) = grad_buf(nodes, grads, *query) {
                buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(buf) = grad_buf(nodes, grads, *codes) {
                for (r, sel) in selections.iter().enumerate() {
                    let grow = &g[r * f..(r + 1) * f];
                    for &idx in sel {
                        let dst = &mut buf[idx * f..(idx + 1) * f];
                        dst.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        Op::CodesL1 {
            codes,
            multiplicity,
        } => {
            let f = value(nodes, *codes).cols();
            let cd = value(nodes, *codes).data();
            let s = g[0];
            if let Some(buf) = grad_buf(nodes, grads, *codes) {
                for &(idx, m) in multiplicity {
                    for c in idx * f..(idx + 1) * f {
                        buf[c] += s * m * sign(cd[c]);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    q: Var,
    k: Var,
    v: Var,
    layout: &AttentionLayout,
    probs: &[f64],
    g: &[f64],
) {
    let d = value(nodes, q).cols();
    let AttentionLayout {
        batch,
        q_len,
        k_len,
        heads,
        causal,
        ..
    } = *layout;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qd = value(nodes, q).data();
    let kd = value(nodes, k).data();
    let vd = value(nodes, v).data();
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; k_len];
    for b in 0..batch {
        let klen = layout.key_lens[b];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..q_len {
                let limit = if causal { klen.min(i + 1) } else { klen };
                let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let go = &g[(b * q_len + i) * d + off..][..dh];
                let mut weighted = 0.0;
                for j in 0..limit {
                    let vrow = (b * k_len + j) * d + off;
                    dp[j] = go
                        .iter()
                        .zip(&vd[vrow..vrow + dh])
                        .map(|(x, y)| x * y)
                        .sum();
                    weighted += p[j] * dp[j];
                    gv[vrow..vrow + dh]
                        .iter_mut()
                        .zip(go)
                        .for_each(|(a, o)| *a += p[j] * o);
                }
                let qrow = (b * q_len + i) * d + off;
                for j in 0..limit {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (b * k_len + j) * d + off;
                    for c in 0..dh {
                        gq[qrow + c] += ds * kd[krow + c];
                        gk[krow + c] += ds * qd[qrow + c];
                    }
                }
            }
        }
    }
    for (var, delta) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(buf) = grad_buf(nodes, grads, var) {
            buf.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
