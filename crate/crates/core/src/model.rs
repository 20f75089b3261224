//! Pre-norm encoder–decoder transformer with one codebook bottleneck inside
//! a chosen encoder layer.
//!
//! The bottleneck sits after that layer's self-attention and residual add and
//! *replaces* the residual stream: the feed-forward sublayer and everything
//! after it only ever see the bottleneck's reconstruction.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionLayout, Graph, Var};
use crate::bottleneck::{
    bottleneck_graph, encode_graph, kaiming_fill, unit_sphere_fill, CodebookState, SaeParams,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    /// K
    pub num_codes: usize,
    /// F
    pub code_dim: usize,
    /// S
    pub top_s: usize,
    pub layer_norm: bool,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            num_codes: 512,
            code_dim: 128,
            top_s: 8,
            layer_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    /// 0-based encoder layer hosting the bottleneck.
    pub bottleneck_layer: usize,
    pub dropout: f64,
    pub codebook: CodebookConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 120,
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 3,
            n_decoder_layers: 2,
            ff_dim: 128,
            max_seq_len: 16,
            bottleneck_layer: 2,
            dropout: 0.0,
            codebook: CodebookConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("ff_dim", self.ff_dim),
            ("max_seq_len", self.max_seq_len),
            ("codebook.num_codes", self.codebook.num_codes),
            ("codebook.code_dim", self.codebook.code_dim),
            ("codebook.top_s", self.codebook.top_s),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.vocab_size <= EOS {
            return Err(Error::config("vocab_size", "must exceed the reserved ids"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!(
                    "d_model {} is not divisible by {}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if self.bottleneck_layer >= self.n_encoder_layers {
            return Err(Error::config(
                "bottleneck_layer",
                format!("must be below n_encoder_layers ({})", self.n_encoder_layers),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if self.codebook.code_dim < self.d_model {
            return Err(Error::config(
                "codebook.code_dim",
                "must be at least d_model (the SAE projects upward)",
            ));
        }
        if self.codebook.top_s > self.codebook.num_codes {
            return Err(Error::config("codebook.top_s", "exceeds num_codes"));
        }
        Ok(())
    }
}

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($leaf:ident),* $(,)? } $(nested { $($child:ident : $cty:ident),* $(,)? })?) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $leaf: T,)*
            $($(pub $child: $cty<T>,)*)?
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> $name<U> {
                $name {
                    $($leaf: f(&self.$leaf),)*
                    $($($child: self.$child.map(f),)*)?
                }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f(format!("{prefix}.{}", stringify!($leaf)), &self.$leaf);)*
                $($(self.$child.visit(&format!("{prefix}.{}", stringify!($child)), f);)*)?
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                $(f(format!("{prefix}.{}", stringify!($leaf)), &mut self.$leaf);)*
                $($(self.$child.visit_mut(&format!("{prefix}.{}", stringify!($child)), f);)*)?
            }
        }
    };
}

param_group!(
    /// `x . weight + bias` with `weight` stored `in x out`.
    Linear { weight, bias }
);
param_group!(Norm { gain, bias });
param_group!(AttentionParams {} nested { q: Linear, k: Linear, v: Linear, o: Linear });
param_group!(FeedForward {} nested { up: Linear, down: Linear });
param_group!(EncoderLayer {} nested { norm1: Norm, attn: AttentionParams, norm2: Norm, ff: FeedForward });
param_group!(DecoderLayer {} nested {
    norm1: Norm,
    self_attn: AttentionParams,
    norm2: Norm,
    cross_attn: AttentionParams,
    norm3: Norm,
    ff: FeedForward,
});

/// Every trainable tensor except the code matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub src_embed: T,
    pub src_pos: T,
    pub tgt_embed: T,
    pub tgt_pos: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub enc_norm: Norm<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub dec_norm: Norm<T>,
    pub out: Linear<T>,
    pub sae: SaeParams<T>,
}

impl<T> Weights<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Weights<U> {
        Weights {
            src_embed: f(&self.src_embed),
            src_pos: f(&self.src_pos),
            tgt_embed: f(&self.tgt_embed),
            tgt_pos: f(&self.tgt_pos),
            encoder: self.encoder.iter().map(|l| l.map(f)).collect(),
            enc_norm: self.enc_norm.map(f),
            decoder: self.decoder.iter().map(|l| l.map(f)).collect(),
            dec_norm: self.dec_norm.map(f),
            out: self.out.map(f),
            sae: self.sae.map(f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("src_embed".into(), &self.src_embed);
        f("src_pos".into(), &self.src_pos);
        f("tgt_embed".into(), &self.tgt_embed);
        f("tgt_pos".into(), &self.tgt_pos);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("encoder.{i}"), f);
        }
        self.enc_norm.visit("enc_norm", f);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("decoder.{i}"), f);
        }
        self.dec_norm.visit("dec_norm", f);
        self.out.visit("out", f);
        self.sae.visit("sae", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("src_embed".into(), &mut self.src_embed);
        f("src_pos".into(), &mut self.src_pos);
        f("tgt_embed".into(), &mut self.tgt_embed);
        f("tgt_pos".into(), &mut self.tgt_pos);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("encoder.{i}"), f);
        }
        self.enc_norm.visit_mut("enc_norm", f);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("decoder.{i}"), f);
        }
        self.dec_norm.visit_mut("dec_norm", f);
        self.out.visit_mut("out", f);
        self.sae.visit_mut("sae", f);
    }
}

/// Source/target id matrices, padded with [`PAD`].
///
/// Sources carry a trailing [`EOS`]; the decoder input is `BOS + target` and
/// the labels are `target + EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub source_ids: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub decoder_input: Vec<usize>,
    pub labels: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl SequenceBatch {
    pub fn sources_only(sources: &[Vec<usize>]) -> Result<Self> {
        let empty: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
        Self::new(sources, &empty)
    }

    pub fn new(sources: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<Self> {
        if sources.is_empty() || sources.len() != targets.len() {
            return Err(Error::Contract(format!(
                "batch of {} sources and {} targets",
                sources.len(),
                targets.len()
            )));
        }
        let batch = sources.len();
        let src_lens: Vec<usize> = sources.iter().map(|s| s.len() + 1).collect();
        let tgt_lens: Vec<usize> = targets.iter().map(|t| t.len() + 1).collect();
        let src_len = *src_lens.iter().max().unwrap();
        let tgt_len = *tgt_lens.iter().max().unwrap();
        let mut source_ids = vec![PAD; batch * src_len];
        let mut decoder_input = vec![PAD; batch * tgt_len];
        let mut labels = vec![PAD; batch * tgt_len];
        for (b, (s, t)) in sources.iter().zip(targets).enumerate() {
            let row = &mut source_ids[b * src_len..];
            row[..s.len()].copy_from_slice(s);
            row[s.len()] = EOS;
            let din = &mut decoder_input[b * tgt_len..];
            din[0] = BOS;
            din[1..=t.len()].copy_from_slice(t);
            let lab = &mut labels[b * tgt_len..];
            lab[..t.len()].copy_from_slice(t);
            lab[t.len()] = EOS;
        }
        Ok(Self {
            batch,
            src_len,
            tgt_len,
            source_ids,
            src_lens,
            decoder_input,
            labels,
            tgt_lens,
        })
    }

    /// Row mask over the flattened `batch * src_len` source positions.
    pub fn source_mask(&self) -> Vec<bool> {
        (0..self.batch * self.src_len)
            .map(|i| i % self.src_len < self.src_lens[i / self.src_len])
            .collect()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let longest = self.src_len.max(self.tgt_len);
        if longest > cfg.max_seq_len {
            return Err(Error::Length {
                len: longest,
                max: cfg.max_seq_len,
            });
        }
        let ids = self
            .source_ids
            .iter()
            .chain(&self.decoder_input)
            .chain(&self.labels);
        if let Some(&bad) = ids.clone().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Index(format!(
                "token {bad} with vocabulary {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BottleneckMode {
    #[default]
    Active,
    /// Feeds the pre-bottleneck activation straight through (ablation only).
    Bypass,
}

type Hook<'a> = &'a dyn Fn(&mut Tensor);

/// Encoder-side options. Hooks see flattened `(batch * src_len) x d_model`
/// activations and exist for intervention experiments.
#[derive(Default, Clone, Copy)]
pub struct EncodeOptions<'a> {
    pub mode: BottleneckMode,
    /// Rewrites the stream entering the bottleneck.
    pub pre_hook: Option<Hook<'a>>,
    /// Rewrites the bottleneck reconstruction before it re-enters the stream.
    pub post_hook: Option<Hook<'a>>,
}

/// Bottleneck handles from one encoder pass.
pub struct BottleneckPass {
    pub pre: Var,
    pub a_hat: Var,
    pub h_enc: Var,
    pub selections: Vec<Vec<usize>>,
}

pub struct EncoderPass {
    pub output: Var,
    pub bottleneck: Option<BottleneckPass>,
}

/// Graph handles for every parameter of a [`Seq2Seq`].
pub struct Bound {
    pub weights: Weights<Var>,
    pub codes: Var,
}

impl Bound {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.weights.visit(&mut |_, v| out.push(*v));
        out.push(self.codes);
        out
    }
}

/// Loss terms of one teacher-forced pass.
pub struct LossGraph {
    pub ce: Var,
    pub mse: Option<Var>,
    pub l1: Option<Var>,
    pub joint: Var,
    pub logits: Var,
    pub selections: Vec<Vec<usize>>,
    pub source_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    config: ModelConfig,
    pub weights: Weights<Tensor>,
    pub codebook: CodebookState,
}

fn linear(inp: usize, out: usize) -> Linear<Tensor> {
    Linear {
        weight: Tensor::zeros(&[inp, out]),
        bias: Tensor::zeros(&[out]),
    }
}

fn norm(d: usize) -> Norm<Tensor> {
    Norm {
        gain: Tensor::full(&[d], 1.0),
        bias: Tensor::zeros(&[d]),
    }
}

fn attention_params(d: usize) -> AttentionParams<Tensor> {
    AttentionParams {
        q: linear(d, d),
        k: linear(d, d),
        v: linear(d, d),
        o: linear(d, d),
    }
}

fn feed_forward(d: usize, ff: usize) -> FeedForward<Tensor> {
    FeedForward {
        up: linear(d, ff),
        down: linear(ff, d),
    }
}

impl Seq2Seq {
    /// Builds a randomly initialized model. SAE weights are Kaiming-uniform,
    /// other linear layers Xavier-uniform, the output head small enough that
    /// initial predictions are near uniform. Embeddings are uniform with
    /// variance `1/d`; codes are unit vectors.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let cb = &config.codebook;
        let mut weights = Weights {
            src_embed: Tensor::zeros(&[config.vocab_size, d]),
            src_pos: Tensor::zeros(&[config.max_seq_len, d]),
            tgt_embed: Tensor::zeros(&[config.vocab_size, d]),
            tgt_pos: Tensor::zeros(&[config.max_seq_len, d]),
            encoder: (0..config.n_encoder_layers)
                .map(|_| EncoderLayer {
                    norm1: norm(d),
                    attn: attention_params(d),
                    norm2: norm(d),
                    ff: feed_forward(d, config.ff_dim),
                })
                .collect(),
            enc_norm: norm(d),
            decoder: (0..config.n_decoder_layers)
                .map(|_| DecoderLayer {
                    norm1: norm(d),
                    self_attn: attention_params(d),
                    norm2: norm(d),
                    cross_attn: attention_params(d),
                    norm3: norm(d),
                    ff: feed_forward(d, config.ff_dim),
                })
                .collect(),
            dec_norm: norm(d),
            out: linear(d, config.vocab_size),
            sae: SaeParams::zeros(d, cb.code_dim)?,
        };
        weights.sae.layer_norm = cb.layer_norm;
        let mut codebook =
            CodebookState::new(Tensor::zeros(&[cb.num_codes, cb.code_dim]), cb.top_s)?;

        let mut r = rng::stream(seed, "model.init");
        weights.visit_mut(&mut |name, t| {
            if name.ends_with("embed") || name.ends_with("_pos") {
                let scale = 1.0 / (d as f64).sqrt();
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = r.gen_range(-scale..=scale) * 3f64.sqrt());
            } else if name.ends_with("w_enc") || name.ends_with("w_dec") {
                let fan_in = t.rows();
                kaiming_fill(t, fan_in, &mut r);
            } else if name == "out.weight" {
                // near-uniform predictions at init
                let bound = 1.0 / d as f64;
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = r.gen_range(-bound..=bound));
            } else if name.ends_with("weight") {
                let bound = (6.0 / (t.rows() + t.cols()) as f64).sqrt();
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = r.gen_range(-bound..=bound));
            }
        });
        unit_sphere_fill(codebook.codes_mut(), &mut r);
        Ok(Self {
            config,
            weights,
            codebook,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        weights: Weights<Tensor>,
        codebook: CodebookState,
    ) -> Result<Self> {
        config.validate()?;
        let template = Self::new(config.clone(), 0)?;
        let mut expected = Vec::new();
        template
            .weights
            .visit(&mut |n, t| expected.push((n, t.shape().to_vec())));
        let mut actual = Vec::new();
        weights.visit(&mut |n, t| actual.push((n, t.shape().to_vec())));
        if expected != actual {
            return Err(Error::Dimension(
                "weights do not match the model config".into(),
            ));
        }
        if codebook.codes().shape() != template.codebook.codes().shape()
            || codebook.top_s() != template.codebook.top_s()
        {
            return Err(Error::Dimension(
                "codebook does not match the model config".into(),
            ));
        }
        Ok(Self {
            config,
            weights,
            codebook,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.codebook.codes().len();
        self.weights.visit(&mut |_, t| n += t.len());
        n
    }

    /// Named parameter tensors in canonical order, codes last.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.weights.visit(&mut |n, t| out.push((n, t)));
        out.push(("codebook.codes".into(), self.codebook.codes()));
        out
    }

    /// Mutable parameters in the same order as [`Seq2Seq::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        collect_mut(&mut self.weights, &mut out);
        out.push(self.codebook.codes_mut());
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t)
            } else {
                g.constant(t.clone())
            }
        };
        let weights = self.weights.map(&mut leaf);
        let codes = leaf(self.codebook.codes());
        Bound { weights, codes }
    }

    /// Accumulates graph gradients into the parameter tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        let vars = bound.vars();
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            if let Some(grad) = g.grad(v) {
                p.accumulate_grad(grad)?;
            } else {
                let zeros = vec![0.0; p.len()];
                p.accumulate_grad(&zeros)?;
            }
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, table: Var, pos: Var, ids: &[usize], len: usize) -> Result<Var> {
        let tok = g.embedding(table, ids)?;
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % len).collect();
        let p = g.embedding(pos, &positions)?;
        g.add(tok, p)
    }

    fn lin(g: &mut Graph, x: Var, l: &Linear<Var>) -> Result<Var> {
        let y = g.matmul(x, l.weight)?;
        g.add_row(y, l.bias)
    }

    fn attend(
        &self,
        g: &mut Graph,
        query_src: Var,
        kv_src: Var,
        p: &AttentionParams<Var>,
        layout: AttentionLayout,
    ) -> Result<Var> {
        let q = Self::lin(g, query_src, &p.q)?;
        let k = Self::lin(g, kv_src, &p.k)?;
        let v = Self::lin(g, kv_src, &p.v)?;
        let a = g.attention(q, k, v, layout)?;
        Self::lin(g, a, &p.o)
    }

    fn ff(g: &mut Graph, x: Var, p: &FeedForward<Var>) -> Result<Var> {
        let h = Self::lin(g, x, &p.up)?;
        let h = g.relu(h);
        Self::lin(g, h, &p.down)
    }

    fn dropout(&self, g: &mut Graph, x: Var, train_rng: &mut Option<&mut rng::Rng>) -> Result<Var> {
        let p = self.config.dropout;
        match train_rng {
            Some(r) if p > 0.0 => {
                let shape = g.value(x).shape().to_vec();
                let n = g.value(x).len();
                let keep = 1.0 / (1.0 - p);
                let mask = (0..n)
                    .map(|_| if r.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let m = g.constant(Tensor::new(shape, mask)?);
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    /// Runs the encoder. Selection at the bottleneck uses the live codes of
    /// `self.codebook`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &SequenceBatch,
        opts: &EncodeOptions,
        mut train_rng: Option<&mut rng::Rng>,
    ) -> Result<EncoderPass> {
        batch.validate(&self.config)?;
        let w = &bound.weights;
        let mut x = self.embed(g, w.src_embed, w.src_pos, &batch.source_ids, batch.src_len)?;
        let layout = AttentionLayout {
            batch: batch.batch,
            q_len: batch.src_len,
            k_len: batch.src_len,
            heads: self.config.n_heads,
            key_lens: batch.src_lens.clone(),
            causal: false,
        };
        let mut pass = None;
        for (li, layer) in w.encoder.iter().enumerate() {
            let h = g.layer_norm(x, layer.norm1.gain, layer.norm1.bias, LN_EPS)?;
            let a = self.attend(g, h, h, &layer.attn, layout.clone())?;
            let a = self.dropout(g, a, &mut train_rng)?;
            x = g.add(x, a)?;
            if li == self.config.bottleneck_layer {
                if let Some(hook) = opts.pre_hook {
                    let mut t = g.value(x).clone();
                    hook(&mut t);
                    x = g.constant(t);
                }
                match opts.mode {
                    BottleneckMode::Active => {
                        let out = bottleneck_graph(g, x, &w.sae, bound.codes, &self.codebook)?;
                        let mut a_hat = out.a_hat;
                        if let Some(hook) = opts.post_hook {
                            let mut t = g.value(a_hat).clone();
                            hook(&mut t);
                            a_hat = g.constant(t);
                        }
                        pass = Some(BottleneckPass {
                            pre: x,
                            a_hat,
                            h_enc: out.h_enc,
                            selections: out.selections,
                        });
                        x = a_hat;
                    }
                    BottleneckMode::Bypass => {}
                }
            }
            let h = g.layer_norm(x, layer.norm2.gain, layer.norm2.bias, LN_EPS)?;
            let f = Self::ff(g, h, &layer.ff)?;
            let f = self.dropout(g, f, &mut train_rng)?;
            x = g.add(x, f)?;
        }
        let output = g.layer_norm(x, w.enc_norm.gain, w.enc_norm.bias, LN_EPS)?;
        Ok(EncoderPass {
            output,
            bottleneck: pass,
        })
    }

    /// Decoder logits (`(batch * tgt_len) x vocab`) for the given decoder input.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        enc: Var,
        src_len: usize,
        src_lens: &[usize],
        decoder_input: &[usize],
        tgt_len: usize,
        tgt_lens: &[usize],
        mut train_rng: Option<&mut rng::Rng>,
    ) -> Result<Var> {
        let w = &bound.weights;
        let batch = src_lens.len();
        let mut y = self.embed(g, w.tgt_embed, w.tgt_pos, decoder_input, tgt_len)?;
        let self_layout = AttentionLayout {
            batch,
            q_len: tgt_len,
            k_len: tgt_len,
            heads: self.config.n_heads,
            key_lens: tgt_lens.to_vec(),
            causal: true,
        };
        let cross_layout = AttentionLayout {
            batch,
            q_len: tgt_len,
            k_len: src_len,
            heads: self.config.n_heads,
            key_lens: src_lens.to_vec(),
            causal: false,
        };
        for layer in &w.decoder {
            let h = g.layer_norm(y, layer.norm1.gain, layer.norm1.bias, LN_EPS)?;
            let a = self.attend(g, h, h, &layer.self_attn, self_layout.clone())?;
            let a = self.dropout(g, a, &mut train_rng)?;
            y = g.add(y, a)?;
            let h = g.layer_norm(y, layer.norm2.gain, layer.norm2.bias, LN_EPS)?;
            let a = self.attend(g, h, enc, &layer.cross_attn, cross_layout.clone())?;
            let a = self.dropout(g, a, &mut train_rng)?;
            y = g.add(y, a)?;
            let h = g.layer_norm(y, layer.norm3.gain, layer.norm3.bias, LN_EPS)?;
            let f = Self::ff(g, h, &layer.ff)?;
            let f = self.dropout(g, f, &mut train_rng)?;
            y = g.add(y, f)?;
        }
        let y = g.layer_norm(y, w.dec_norm.gain, w.dec_norm.bias, LN_EPS)?;
        Self::lin(g, y, &w.out)
    }

    /// Builds `L_joint = MSE + lambda * L1(selected codes) + CE` for a batch.
    /// Padding positions are excluded from every term.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &SequenceBatch,
        lambda_l1: f64,
        opts: &EncodeOptions,
        mut train_rng: Option<&mut rng::Rng>,
    ) -> Result<LossGraph> {
        let enc = self.encode_graph(g, bound, batch, opts, train_rng.as_deref_mut())?;
        let logits = self.decode_graph(
            g,
            bound,
            enc.output,
            batch.src_len,
            &batch.src_lens,
            &batch.decoder_input,
            batch.tgt_len,
            &batch.tgt_lens,
            train_rng,
        )?;
        let ce = g.cross_entropy(logits, &batch.labels, PAD)?;
        let source_mask = batch.source_mask();
        let (mse, l1, joint, selections) = match enc.bottleneck {
            Some(bp) => {
                let mse = g.mse(bp.pre, bp.a_hat, Some(&source_mask))?;
                let live_sel = bp
                    .selections
                    .iter()
                    .zip(&source_mask)
                    .filter(|(_, m)| **m)
                    .map(|(s, _)| s.as_slice());
                let l1_raw = g.codes_l1(bound.codes, live_sel)?;
                let l1 = g.scale(l1_raw, lambda_l1);
                let cb = g.add(mse, l1)?;
                let joint = g.add(cb, ce)?;
                (Some(mse), Some(l1), joint, bp.selections)
            }
            None => (None, None, ce, Vec::new()),
        };
        Ok(LossGraph {
            ce,
            mse,
            l1,
            joint,
            logits,
            selections,
            source_mask,
        })
    }

    /// Encoder output as a `(batch * src_len) x d_model` tensor.
    pub fn encode(&self, batch: &SequenceBatch, opts: &EncodeOptions) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let pass = self.encode_graph(&mut g, &bound, batch, opts, None)?;
        Ok(g.value(pass.output).clone())
    }

    /// Query vectors the codebook sees for each source position
    /// (`(batch * src_len) x F`, padding rows included).
    pub fn bottleneck_queries(&self, batch: &SequenceBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        batch.validate(&self.config)?;
        // Run the encoder up to the bottleneck through a pre-hook capture.
        let captured = std::cell::RefCell::new(None);
        let capture = |t: &mut Tensor| {
            *captured.borrow_mut() = Some(t.clone());
        };
        let opts = EncodeOptions {
            mode: BottleneckMode::Bypass,
            pre_hook: Some(&capture),
            post_hook: None,
        };
        self.encode_graph(&mut g, &bound, batch, &opts, None)?;
        let pre = captured.into_inner().expect("bottleneck layer always runs");
        let a = g.constant(pre);
        let h = encode_graph(&mut g, a, &bound.weights.sae)?;
        Ok(g.value(h).clone())
    }

    pub fn forward_teacher_forced(
        &self,
        batch: &SequenceBatch,
        opts: &EncodeOptions,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let enc = self.encode_graph(&mut g, &bound, batch, opts, None)?;
        let logits = self.decode_graph(
            &mut g,
            &bound,
            enc.output,
            batch.src_len,
            &batch.src_lens,
            &batch.decoder_input,
            batch.tgt_len,
            &batch.tgt_lens,
            None,
        )?;
        let mut t = g.value(logits).clone();
        t = t.reshape(vec![batch.batch, batch.tgt_len, self.config.vocab_size])?;
        Ok(t)
    }

    /// Temperature-0 decoding: argmax at each step, ties toward the lower id,
    /// until [`EOS`] or `max_len` generated tokens. EOS is not returned.
    pub fn greedy_decode(&self, source: &[usize], max_len: usize) -> Result<Vec<usize>> {
        Ok(self
            .greedy_decode_batch(&[source.to_vec()], max_len, &EncodeOptions::default())?
            .remove(0))
    }

    pub fn greedy_decode_batch(
        &self,
        sources: &[Vec<usize>],
        max_len: usize,
        opts: &EncodeOptions,
    ) -> Result<Vec<Vec<usize>>> {
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let max_len = max_len.min(self.config.max_seq_len.saturating_sub(1));
        let batch = SequenceBatch::sources_only(sources)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let enc = self.encode_graph(&mut g, &bound, &batch, opts, None)?;
        let enc_value = g.value(enc.output).clone();
        let n = sources.len();
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        let v = self.config.vocab_size;
        for step in 0..max_len {
            let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            let len = step + 1;
            let mut dec_in = Vec::with_capacity(active.len() * len);
            let mut enc_rows =
                Vec::with_capacity(active.len() * batch.src_len * self.config.d_model);
            let mut src_lens = Vec::with_capacity(active.len());
            for &i in &active {
                dec_in.push(BOS);
                dec_in.extend_from_slice(&outputs[i]);
                for r in 0..batch.src_len {
                    enc_rows.extend_from_slice(enc_value.row(i * batch.src_len + r));
                }
                src_lens.push(batch.src_lens[i]);
            }
            let mut sg = Graph::new();
            let sbound = self.bind_decoder(&mut sg);
            let enc_var = sg.constant(Tensor::new(
                vec![active.len() * batch.src_len, self.config.d_model],
                enc_rows,
            )?);
            let logits = self.decode_graph(
                &mut sg,
                &sbound,
                enc_var,
                batch.src_len,
                &src_lens,
                &dec_in,
                len,
                &vec![len; active.len()],
                None,
            )?;
            let lv = sg.value(logits);
            for (a, &i) in active.iter().enumerate() {
                let row = lv.row(a * len + len - 1);
                let mut best = 0;
                for j in 1..v {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == EOS {
                    done[i] = true;
                } else {
                    outputs[i].push(best);
                }
            }
        }
        Ok(outputs)
    }

    /// Binds only what the decoder reads; encoder-side tensors are left out of
    /// the graph to keep per-step decoding cheap.
    fn bind_decoder(&self, g: &mut Graph) -> Bound {
        let placeholder = g.constant(Tensor::scalar(0.0));
        let w = &self.weights;
        let mut c = |t: &Tensor| g.constant(t.clone());
        let weights = Weights {
            src_embed: placeholder,
            src_pos: placeholder,
            tgt_embed: c(&w.tgt_embed),
            tgt_pos: c(&w.tgt_pos),
            encoder: Vec::new(),
            enc_norm: w.enc_norm.map(&mut |_| placeholder),
            decoder: w.decoder.iter().map(|l| l.map(&mut c)).collect(),
            dec_norm: w.dec_norm.map(&mut c),
            out: w.out.map(&mut c),
            sae: w.sae.map(&mut |_| placeholder),
        };
        Bound {
            weights,
            codes: placeholder,
        }
    }
}

fn collect_mut<'a>(w: &'a mut Weights<Tensor>, out: &mut Vec<&'a mut Tensor>) {
    let Weights {
        src_embed,
        src_pos,
        tgt_embed,
        tgt_pos,
        encoder,
        enc_norm,
        decoder,
        dec_norm,
        out: out_proj,
        sae,
    } = w;
    out.push(src_embed);
    out.push(src_pos);
    out.push(tgt_embed);
    out.push(tgt_pos);
    for l in encoder.iter_mut() {
        push_encoder(l, out);
    }
    push_norm(enc_norm, out);
    for l in decoder.iter_mut() {
        push_decoder(l, out);
    }
    push_norm(dec_norm, out);
    push_linear(out_proj, out);
    let SaeParams {
        w_enc,
        b_enc,
        norm_gain,
        norm_bias,
        w_dec,
        b_dec,
        ..
    } = sae;
    out.extend([w_enc, b_enc, norm_gain, norm_bias, w_dec, b_dec]);
}

fn push_linear<'a>(l: &'a mut Linear<Tensor>, out: &mut Vec<&'a mut Tensor>) {
    out.push(&mut l.weight);
    out.push(&mut l.bias);
}

fn push_norm<'a>(n: &'a mut Norm<Tensor>, out: &mut Vec<&'a mut Tensor>) {
    out.push(&mut n.gain);
    out.push(&mut n.bias);
}

fn push_attention<'a>(a: &'a mut AttentionParams<Tensor>, out: &mut Vec<&'a mut Tensor>) {
    push_linear(&mut a.q, out);
    push_linear(&mut a.k, out);
    push_linear(&mut a.v, out);
    push_linear(&mut a.o, out);
}

fn push_ff<'a>(f: &'a mut FeedForward<Tensor>, out: &mut Vec<&'a mut Tensor>) {
    push_linear(&mut f.up, out);
    push_linear(&mut f.down, out);
}

fn push_encoder<'a>(l: &'a mut EncoderLayer<Tensor>, out: &mut Vec<&'a mut Tensor>) {
    push_norm(&mut l.norm1, out);
    push_attention(&mut l.attn, out);
    push_norm(&mut l.norm2, out);
    push_ff(&mut l.ff, out);
}

fn push_decoder<'a>(l: &'a mut DecoderLayer<Tensor>, out: &mut Vec<&'a mut Tensor>) {
    push_norm(&mut l.norm1, out);
    push_attention(&mut l.self_attn, out);
    push_norm(&mut l.norm2, out);
    push_attention(&mut l.cross_attn, out);
    push_norm(&mut l.norm3, out);
    push_ff(&mut l.ff, out);
}
