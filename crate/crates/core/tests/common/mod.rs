#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unlearnlab::corpus::{
    build_topic_datasets, generate_corpus, Corpus, Sample, TopicDatasets, ToyLanguageSpec,
};
use unlearnlab::model::{BottleneckMode, CodebookConfig, EncodeOptions, EOS};
use unlearnlab::{Graph, ModelConfig, Result, Seq2Seq, SequenceBatch, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 2,
        n_decoder_layers: 1,
        ff_dim: 16,
        max_seq_len: 8,
        bottleneck_layer: 1,
        dropout: 0.0,
        codebook: CodebookConfig {
            num_codes: 16,
            code_dim: 16,
            top_s: 2,
            layer_norm: true,
        },
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-1, 1]` kept at least `gap` away from zero, so kinks
/// at the origin (relu, abs) are not straddled by a finite difference.
pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.gen_range(gap..1.0);
            if r.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random token sequences over the non-reserved ids.
pub fn random_sequences(
    r: &mut ChaCha8Rng,
    n: usize,
    vocab: usize,
    min: usize,
    max: usize,
) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = r.gen_range(min..=max);
            (0..len).map(|_| r.gen_range(4..vocab)).collect()
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, GRAD_FLOOR)`. The floor keeps gradients
/// that are exactly zero in theory (a key bias under softmax shift
/// invariance, say) from turning round-off into a unit error.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(GRAD_FLOOR)
}

/// Contracts `out` against fixed pseudo-random weights so every output
/// element contributes to the scalar being differentiated.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut r = rng(seed);
    let w = random_tensor(&mut r, &shape, 0.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Worst relative error between the tape gradient and central differences,
/// over every input flagged in `wrt`.
pub fn check_op<F>(inputs: &[Tensor], wrt: &[bool], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], track: bool| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .zip(wrt)
            .map(|(t, &w)| g.leaf(t.clone().with_requires_grad(track && w)))
            .collect();
        let out = build(&mut g, &vars).expect("op builds");
        let loss = project(&mut g, out, 99).expect("projection");
        (g, vars, loss)
    };
    let (mut g, vars, loss) = eval(inputs, true);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        if !wrt[i] {
            continue;
        }
        let analytic = g
            .grad(vars[i])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let (gp, _, lp) = eval(&plus, false);
            let (gm, _, lm) = eval(&minus, false);
            *slot = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Gradient check of the joint loss of a whole model for the parameters
/// whose name satisfies `select`. At most `per_tensor` coordinates are probed
/// in each tensor. Returns `(name, relative error)` per tensor and the number
/// of probes skipped because the perturbation moved a top-S selection.
pub fn check_model(
    model: &Seq2Seq,
    batch: &SequenceBatch,
    mode: BottleneckMode,
    lambda: f64,
    select: &dyn Fn(&str) -> bool,
    per_tensor: usize,
    seed: u64,
) -> (Vec<(String, f64)>, usize) {
    let opts = EncodeOptions {
        mode,
        ..Default::default()
    };
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let lg = model
        .loss_graph(&mut g, &bound, batch, lambda, &opts, None)
        .unwrap();
    let base_sel = lg.selections.clone();
    g.backward(lg.joint).unwrap();
    let vars = bound.vars();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();

    let loss_at = |m: &Seq2Seq| -> (f64, Vec<Vec<usize>>) {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let lg = m
            .loss_graph(&mut g, &bound, batch, lambda, &opts, None)
            .unwrap();
        (g.value(lg.joint).item(), lg.selections)
    };

    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut skipped = 0;
    for (pi, name) in names.iter().enumerate() {
        if !select(name) {
            continue;
        }
        let len = model.named_params()[pi].1.len();
        let full = g
            .grad(vars[pi])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let probes: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| r.gen_range(0..len)).collect()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in probes {
            let mut plus = model.clone();
            plus.params_mut()[pi].data_mut()[j] += FD_STEP;
            let mut minus = model.clone();
            minus.params_mut()[pi].data_mut()[j] -= FD_STEP;
            let (lp, sp) = loss_at(&plus);
            let (lm, sm) = loss_at(&minus);
            if sp != base_sel || sm != base_sel {
                skipped += 1;
                continue;
            }
            analytic.push(full[j]);
            numeric.push((lp - lm) / (2.0 * FD_STEP));
        }
        out.push((name.clone(), relative_error(&analytic, &numeric)));
    }
    (out, skipped)
}

/// True for parameters whose effect on the loss does not pass through the
/// straight-through selection, i.e. everything downstream of the query.
pub fn downstream_of_selection(config: &ModelConfig) -> impl Fn(&str) -> bool {
    let bl = config.bottleneck_layer;
    move |name: &str| {
        if let Some(rest) = name.strip_prefix("encoder.") {
            let (idx, field) = rest.split_once('.').unwrap();
            let idx: usize = idx.parse().unwrap();
            return idx > bl
                || (idx == bl && (field.starts_with("norm2") || field.starts_with("ff")));
        }
        if name.starts_with("src_") {
            return false;
        }
        if let Some(field) = name.strip_prefix("sae.") {
            return field.starts_with("w_dec") || field.starts_with("b_dec");
        }
        true
    }
}

pub type OpCase = (&'static str, fn(u64) -> f64);

/// One randomized finite-difference instance per call for every
/// differentiable graph operation.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |s| {
            let mut r = rng(s);
            let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            let a = random_tensor(&mut r, &[m, k], 0.0);
            let b = random_tensor(&mut r, &[k, n], 0.0);
            check_op(&[a, b], &[true, true], |g, v| g.matmul(v[0], v[1]))
        }),
        ("add", |s| {
            let mut r = rng(s);
            let a = random_tensor(&mut r, &[3, 4], 0.0);
            let b = random_tensor(&mut r, &[3, 4], 0.0);
            check_op(&[a, b], &[true, true], |g, v| g.add(v[0], v[1]))
        }),
        ("sub", |s| {
            let mut r = rng(s);
            let a = random_tensor(&mut r, &[2, 5], 0.0);
            let b = random_tensor(&mut r, &[2, 5], 0.0);
            check_op(&[a, b], &[true, true], |g, v| g.sub(v[0], v[1]))
        }),
        ("mul", |s| {
            let mut r = rng(s);
            let a = random_tensor(&mut r, &[4, 3], 0.0);
            let b = random_tensor(&mut r, &[4, 3], 0.0);
            check_op(&[a, b], &[true, true], |g, v| g.mul(v[0], v[1]))
        }),
        ("add_row", |s| {
            let mut r = rng(s);
            let x = random_tensor(&mut r, &[5, 3], 0.0);
            let b = random_tensor(&mut r, &[3], 0.0);
            check_op(&[x, b], &[true, true], |g, v| g.add_row(v[0], v[1]))
        }),
        ("scale", |s| {
            let mut r = rng(s);
            let x = random_tensor(&mut r, &[3, 3], 0.0);
            let c: f64 = r.gen_range(-2.0..2.0);
            check_op(&[x], &[true], move |g, v| Ok(g.scale(v[0], c)))
        }),
        ("relu", |s| {
            let mut r = rng(s);
            let x = random_tensor(&mut r, &[4, 4], 1e-3);
            check_op(&[x], &[true], |g, v| Ok(g.relu(v[0])))
        }),
        ("sum", |s| {
            let mut r = rng(s);
            let x = random_tensor(&mut r, &[2, 6], 0.0);
            check_op(&[x], &[true], |g, v| {
                let t = g.sum(v[0]);
                let sq = g.mul(t, t)?;
                Ok(sq)
            })
        }),
        ("layer_norm", |s| {
            let mut r = rng(s);
            let x = random_tensor(&mut r, &[3, 6], 0.0);
            let gain = random_tensor(&mut r, &[6], 0.0);
            let bias = random_tensor(&mut r, &[6], 0.0);
            check_op(&[x, gain, bias], &[true, true, true], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5)
            })
        }),
        ("embedding", |s| {
            let mut r = rng(s);
            let table = random_tensor(&mut r, &[6, 4], 0.0);
            let ids: Vec<usize> = (0..7).map(|_| r.gen_range(0..6)).collect();
            check_op(&[table], &[true], move |g, v| g.embedding(v[0], &ids))
        }),
        ("attention", |s| {
            let mut r = rng(s);
            let batch = 2;
            let (lq, lk, d) = (r.gen_range(1..4), r.gen_range(2..5), 4);
            let causal = r.gen::<bool>();
            let lq = if causal { lk } else { lq };
            let key_lens: Vec<usize> = (0..batch).map(|_| r.gen_range(1..=lk)).collect();
            let q = random_tensor(&mut r, &[batch * lq, d], 0.0);
            let k = random_tensor(&mut r, &[batch * lk, d], 0.0);
            let v = random_tensor(&mut r, &[batch * lk, d], 0.0);
            check_op(&[q, k, v], &[true, true, true], move |g, x| {
                let layout = unlearnlab::AttentionLayout {
                    batch,
                    q_len: lq,
                    k_len: lk,
                    heads: 2,
                    key_lens: key_lens.clone(),
                    causal,
                };
                g.attention(x[0], x[1], x[2], layout)
            })
        }),
        ("cross_entropy", |s| {
            let mut r = rng(s);
            let logits = random_tensor(&mut r, &[5, 6], 0.0);
            let targets: Vec<usize> = (0..5).map(|_| r.gen_range(0..6)).collect();
            check_op(&[logits], &[true], move |g, v| {
                g.cross_entropy(v[0], &targets, 0)
            })
        }),
        ("mse", |s| {
            let mut r = rng(s);
            let a = random_tensor(&mut r, &[4, 3], 0.0);
            let b = random_tensor(&mut r, &[4, 3], 0.0);
            let rows = vec![true, r.gen::<bool>(), true, r.gen::<bool>()];
            check_op(&[a, b], &[true, true], move |g, v| {
                g.mse(v[0], v[1], Some(&rows))
            })
        }),
        ("code_sum", |s| {
            let mut r = rng(s);
            let q = random_tensor(&mut r, &[3, 4], 0.0);
            let codes = random_tensor(&mut r, &[6, 4], 0.0);
            let sel: Vec<Vec<usize>> = (0..3)
                .map(|_| {
                    let a = r.gen_range(0..6);
                    vec![a, (a + r.gen_range(1..6)) % 6]
                })
                .collect();
            // The query path is straight-through by design; only the code
            // gradient is a true derivative.
            check_op(&[q, codes], &[false, true], move |g, v| {
                g.code_sum(v[0], v[1], sel.clone())
            })
        }),
        ("codes_l1", |s| {
            let mut r = rng(s);
            let codes = random_tensor(&mut r, &[5, 3], 1e-3);
            let sel: Vec<Vec<usize>> = (0..4)
                .map(|_| vec![r.gen_range(0..5), r.gen_range(0..5)])
                .collect();
            check_op(&[codes], &[true], move |g, v| {
                g.codes_l1(v[0], sel.iter().map(|x| x.as_slice()))
            })
        }),
    ]
}

/// Random selection problem. Odd seeds draw entries from {-1, 0, 1} and
/// duplicate rows so exact ties (including zero similarity) are common.
pub fn selection_instance(seed: u64) -> (Vec<f64>, unlearnlab::CodebookState, usize) {
    let mut r = rng(seed);
    let k = r.gen_range(2..40);
    let f = r.gen_range(1..8);
    let ternary = seed % 2 == 1;
    let draw = |r: &mut ChaCha8Rng| -> f64 {
        if ternary {
            r.gen_range(-1i32..=1) as f64
        } else {
            r.gen_range(-1.0..1.0)
        }
    };
    let mut rows: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..f).map(|_| draw(&mut r)).collect())
        .collect();
    for _ in 0..r.gen_range(0..=k / 3) {
        let (a, b) = (r.gen_range(0..k), r.gen_range(0..k));
        rows[b] = rows[a].clone();
    }
    let h: Vec<f64> = (0..f).map(|_| draw(&mut r)).collect();
    let mut mask: Vec<bool> = (0..k).map(|_| r.gen_bool(0.3)).collect();
    if mask.iter().all(|&d| d) {
        mask[0] = false;
    }
    let live = mask.iter().filter(|d| !**d).count();
    let s = r.gen_range(1..=live);
    let refs: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
    let cb = unlearnlab::CodebookState::with_mask(Tensor::from_rows(&refs), s, mask).unwrap();
    (h, cb, s)
}

/// Full-sort reference: cosine against every live code, stable sort by
/// descending similarity (so equal scores keep index order), first `s`.
pub fn oracle_top(h: &[f64], cb: &unlearnlab::CodebookState, s: usize) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = (0..cb.num_codes())
        .filter(|&k| !cb.is_deleted(k))
        .map(|k| {
            let c = cb.code(k);
            let d = norm(h) * norm(c);
            let dot: f64 = h.iter().zip(c).map(|(a, b)| a * b).sum();
            (k, if d > 0.0 { dot / d } else { 0.0 })
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    scored.into_iter().take(s).map(|(k, _)| k).collect()
}

/// Upper tail of the chi-squared(1) density by composite Simpson
/// integration. Substituting t = u^2 turns the density into 2 * phi(u),
/// which removes the singularity at zero; the tail is cut at u = 40.
pub fn chi2_tail_by_integration(x: f64) -> f64 {
    let density = |u: f64| 2.0 * (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (a, b) = (x.sqrt(), 40.0);
    let n = 200_000;
    let h = (b - a) / n as f64;
    let mut acc = density(a) + density(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * density(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Identity pairs over every id the model does not reserve (3 and up).
pub fn copy_pairs(seed: u64, n: usize, vocab: usize) -> Vec<unlearnlab::corpus::Pair> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let len = r.gen_range(2..=4);
            let s: Vec<usize> = (0..len).map(|_| r.gen_range(3..vocab)).collect();
            unlearnlab::corpus::Pair {
                source: s.clone(),
                target: s,
            }
        })
        .collect()
}

pub fn copy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 64,
        n_heads: 4,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        ff_dim: 128,
        max_seq_len: 8,
        bottleneck_layer: 1,
        dropout: 0.0,
        codebook: CodebookConfig {
            num_codes: 128,
            code_dim: 128,
            top_s: 8,
            layer_norm: true,
        },
    }
}

/// Small untrained model over a generated corpus, with topic datasets for
/// `noun03`.
pub fn unlearning_fixture() -> (Corpus, TopicDatasets, Seq2Seq) {
    let spec = ToyLanguageSpec {
        seed: 5,
        ..Default::default()
    };
    let corpus = generate_corpus(&spec, 1500).unwrap();
    let topic = corpus.vocab.id("noun03").unwrap();
    let ds = build_topic_datasets(&corpus, topic, 60, 5).unwrap();
    let cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        d_model: 16,
        n_heads: 2,
        n_encoder_layers: 2,
        n_decoder_layers: 1,
        ff_dim: 32,
        max_seq_len: 16,
        bottleneck_layer: 1,
        dropout: 0.0,
        codebook: CodebookConfig {
            num_codes: corpus.vocab.len(),
            code_dim: 32,
            top_s: 1,
            layer_norm: true,
        },
    };
    let model = Seq2Seq::new(cfg, 21).unwrap();
    (corpus, ds, model)
}

/// Makes the bottleneck query a function of the token alone (no source
/// positions, no attention mixing below the bottleneck), then sets code `t`
/// to the query of token `t`. Every position then selects its own token's
/// code first.
pub fn wire_token_codes(model: &mut Seq2Seq) {
    let bl = model.config().bottleneck_layer;
    let w = &mut model.weights;
    w.src_pos = Tensor::zeros(w.src_pos.shape());
    for layer in &mut w.encoder[..=bl] {
        layer.attn.o.weight = Tensor::zeros(layer.attn.o.weight.shape());
        layer.attn.o.bias = Tensor::zeros(layer.attn.o.bias.shape());
    }
    let tokens: Vec<Vec<usize>> = (EOS + 1..model.config().vocab_size)
        .map(|t| vec![t])
        .collect();
    let batch = SequenceBatch::sources_only(&tokens).unwrap();
    let q = model.bottleneck_queries(&batch).unwrap();
    let f = model.codebook.dim();
    let codes = model.codebook.codes_mut().data_mut();
    for (b, tok) in tokens.iter().enumerate() {
        let row = b * batch.src_len;
        codes[tok[0] * f..][..f].copy_from_slice(&q.data()[row * f..][..f]);
        // the appended end-of-sequence position
        codes[EOS * f..][..f].copy_from_slice(&q.data()[(row + 1) * f..][..f]);
    }
}

pub fn decode_sources(model: &Seq2Seq, samples: &[Sample]) -> Vec<Vec<usize>> {
    let sources: Vec<Vec<usize>> = samples.iter().map(|s| s.pair.source.clone()).collect();
    model
        .greedy_decode_batch(
            &sources,
            model.config().max_seq_len - 1,
            &EncodeOptions::default(),
        )
        .unwrap()
}
