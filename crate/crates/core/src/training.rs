//! Loss stack and the joint training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::Pair;
use crate::error::{Error, Result};
use crate::evaluation::token_accuracy;
use crate::model::{EncodeOptions, Seq2Seq, SequenceBatch};
use crate::optim::{adam_step, AdamState};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_l1: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 1e-6,
            lr: 1e-3,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1.is_finite() && self.lambda_l1 >= 0.0) {
            return Err(Error::config(
                "lambda_l1",
                "must be finite and non-negative",
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("grad_clip", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-epoch means over training batches plus held-out greedy token accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_mse: f64,
    pub l1: f64,
    pub l_ce: f64,
    pub l_joint: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,l_mse,l1,l_ce,l_joint,val_acc")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch, r.l_mse, r.l1, r.l_ce, r.l_joint, r.val_acc
            )?;
        }
        Ok(())
    }
}

/// `mean((a - a_hat)^2) + lambda * sum over selections of sum_f |c_k^f|`.
pub fn codebook_loss(
    a: &Tensor,
    a_hat: &Tensor,
    codes: &Tensor,
    selections: &[Vec<usize>],
    lambda: f64,
) -> Result<f64> {
    if a.shape() != a_hat.shape() {
        return Err(Error::Dimension(format!(
            "activation {:?} vs reconstruction {:?}",
            a.shape(),
            a_hat.shape()
        )));
    }
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(a_hat.clone());
    let cv = g.constant(codes.clone());
    let mse = g.mse(av, bv, None)?;
    let l1 = g.codes_l1(cv, selections.iter().map(Vec::as_slice))?;
    let l1 = g.scale(l1, lambda);
    let total = g.add(mse, l1)?;
    Ok(g.value(total).item())
}

/// Plain sum of the two terms.
pub fn joint_loss(ce: f64, cb: f64) -> Result<f64> {
    if !ce.is_finite() || !cb.is_finite() {
        return Err(Error::Numeric(format!(
            "joint loss of ce={ce}, codebook={cb}"
        )));
    }
    Ok(ce + cb)
}

pub struct TrainOutcome {
    /// Weights from the epoch with the best validation accuracy (the initial
    /// model when no epoch ran).
    pub best: Seq2Seq,
    pub best_epoch: Option<usize>,
    pub log: TrainLog,
}

fn to_batch(pairs: &[Pair], idx: &[usize]) -> Result<SequenceBatch> {
    let src: Vec<Vec<usize>> = idx.iter().map(|&i| pairs[i].source.clone()).collect();
    let tgt: Vec<Vec<usize>> = idx.iter().map(|&i| pairs[i].target.clone()).collect();
    SequenceBatch::new(&src, &tgt)
}

/// Greedy-decode token accuracy on `pairs`.
pub fn greedy_accuracy(model: &Seq2Seq, pairs: &[Pair], opts: &EncodeOptions) -> Result<f64> {
    let mut hyps = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(256) {
        let src: Vec<Vec<usize>> = chunk.iter().map(|p| p.source.clone()).collect();
        hyps.extend(model.greedy_decode_batch(&src, model.config().max_seq_len, opts)?);
    }
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.target.clone()).collect();
    Ok(token_accuracy(&hyps, &refs))
}

fn clip_gradients(params: &mut [&mut Tensor], max_norm: f64) {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * (scale - 1.0)).collect();
                p.accumulate_grad(&scaled).expect("same length");
            }
        }
    }
}

/// One optimizer step on a batch; returns `(mse, l1, ce, joint)`.
pub fn train_step(
    model: &mut Seq2Seq,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    dropout_rng: &mut rng::Rng,
) -> Result<[f64; 4]> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let lg = model.loss_graph(
        &mut g,
        &bound,
        batch,
        cfg.lambda_l1,
        &EncodeOptions::default(),
        Some(dropout_rng),
    )?;
    let get = |v: Option<crate::Var>| v.map_or(0.0, |v| g.value(v).item());
    let terms = [
        get(lg.mse),
        get(lg.l1),
        g.value(lg.ce).item(),
        g.value(lg.joint).item(),
    ];
    if terms.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("loss terms {terms:?}")));
    }
    g.backward(lg.joint)?;
    model.accumulate_grads(&g, &bound)?;
    let mut params = model.params_mut();
    if let Some(c) = cfg.grad_clip {
        clip_gradients(&mut params, c);
    }
    adam_step(&mut params, adam)?;
    Ok(terms)
}

/// Adam on the joint loss with teacher forcing. Deterministic for a fixed
/// seed. A non-finite loss aborts with [`Error::Divergence`].
pub fn train(
    model: Seq2Seq,
    train: &[Pair],
    val: &[Pair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let mut model = model;
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut log = TrainLog::default();
    let mut adam = AdamState::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, "train.shuffle");
    let mut dropout_rng = rng::stream(cfg.seed, "train.dropout");

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch = to_batch(train, idx)?;
            let terms = match train_step(&mut model, &batch, cfg, &mut adam, &mut dropout_rng) {
                Ok(t) => t,
                Err(Error::Numeric(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        last_good: best_epoch,
                    })
                }
                Err(e) => return Err(e),
            };
            if !model.named_params().iter().all(|(_, t)| t.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    last_good: best_epoch,
                });
            }
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t;
            }
            batches += 1;
        }
        let n = batches as f64;
        let val_acc = if val.is_empty() {
            0.0
        } else {
            greedy_accuracy(&model, val, &EncodeOptions::default())?
        };
        let rec = EpochRecord {
            epoch,
            l_mse: sums[0] / n,
            l1: sums[1] / n,
            l_ce: sums[2] / n,
            l_joint: sums[3] / n,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: joint {:.4} ce {:.4} mse {:.4} val_acc {:.4}",
            rec.l_joint,
            rec.l_ce,
            rec.l_mse,
            rec.val_acc
        );
        log.records.push(rec);
        if val_acc > best_acc {
            best_acc = val_acc;
            best_epoch = Some(epoch);
            best = model.clone();
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
    })
}
