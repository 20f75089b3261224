//! Translation metrics, the normalized improvement drop, and topic-vs-rest
//! reports.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::Pair;
use crate::error::{Error, Result};
use crate::model::{EncodeOptions, Seq2Seq};

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with brevity penalty. For orders `n >= 2` whose clipped match
/// count is zero the precision becomes `1 / (total + 1)`.
pub fn bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>], max_n: usize) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "bleu needs equal non-empty corpora, got {} hypotheses and {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Contract("max_n must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else {
            1.0 / (totals[n] as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((bp * (log_sum / max_n as f64).exp()).clamp(0.0, 1.0))
}

/// Exact-match METEOR with leftmost-greedy alignment and no synonym stage.
pub fn meteor_lite(hypothesis: &[usize], reference: &[usize]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<usize> = Vec::new();
    for tok in hypothesis {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok) {
            used[j] = true;
            alignment.push(j);
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + alignment.windows(2).filter(|w| w[1] != w[0] + 1).count();
    let p = m as f64 / hypothesis.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

/// Mean sentence-level [`meteor_lite`].
pub fn corpus_meteor(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::Contract(
            "meteor needs equal non-empty corpora".into(),
        ));
    }
    let total: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| meteor_lite(h, r))
        .sum();
    Ok(total / hypotheses.len() as f64)
}

/// Share of positions where hypothesis and reference agree, over the longer
/// of the two; two empty sequences agree fully.
pub fn sentence_token_accuracy(hypothesis: &[usize], reference: &[usize]) -> f64 {
    let longest = hypothesis.len().max(reference.len());
    if longest == 0 {
        return 1.0;
    }
    let hits = hypothesis
        .iter()
        .zip(reference)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / longest as f64
}

/// Corpus mean of [`sentence_token_accuracy`]; 0 for an empty corpus.
pub fn token_accuracy(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> f64 {
    if hypotheses.is_empty() {
        return 0.0;
    }
    let total: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_token_accuracy(h, r))
        .sum();
    total / hypotheses.len() as f64
}

/// `100 * (unlearned - codebook) / (codebook - zero_shot)`, or `None` when the
/// two baselines coincide.
pub fn normalized_improvement_drop(unlearned: f64, base: &MetricBaseline) -> Option<f64> {
    let denom = base.codebook - base.zero_shot;
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    // ratio first, so a zero-shot-equal score lands exactly on -100
    Some(100.0 * ((unlearned - base.codebook) / denom))
}

/// Relative change against the pre-unlearning model, in percent.
pub fn percent_change(unlearned: f64, codebook: f64) -> Option<f64> {
    if codebook == 0.0 {
        None
    } else {
        Some(100.0 * ((unlearned - codebook) / codebook))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    Meteor,
    TokenAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Bleu, Metric::Meteor, Metric::TokenAccuracy];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::Meteor => "meteor",
            Metric::TokenAccuracy => "token_accuracy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu: f64,
    pub meteor: f64,
    pub token_accuracy: f64,
}

impl Scores {
    pub fn compute(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<Self> {
        Ok(Self {
            bleu: bleu(hypotheses, references, 4)?,
            meteor: corpus_meteor(hypotheses, references)?,
            token_accuracy: token_accuracy(hypotheses, references),
        })
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Bleu => self.bleu,
            Metric::Meteor => self.meteor,
            Metric::TokenAccuracy => self.token_accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBaseline {
    pub zero_shot: f64,
    pub codebook: f64,
}

/// Scores of the untrained model and of the trained model before
/// unlearning, on one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselinePair {
    pub zero_shot: Scores,
    pub codebook: Scores,
}

impl BaselinePair {
    pub fn metric(&self, m: Metric) -> MetricBaseline {
        MetricBaseline {
            zero_shot: self.zero_shot.get(m),
            codebook: self.codebook.get(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetTag {
    #[serde(rename = "D_T_prime")]
    TopicEval,
    #[serde(rename = "D_R")]
    Rest,
}

impl DatasetTag {
    pub fn name(self) -> &'static str {
        match self {
            DatasetTag::TopicEval => "D_T_prime",
            DatasetTag::Rest => "D_R",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetTag,
    pub samples: usize,
    pub raw: Scores,
    pub baselines: BaselinePair,
}

impl EvalReport {
    pub fn nid(&self, m: Metric) -> Option<f64> {
        normalized_improvement_drop(self.raw.get(m), &self.baselines.metric(m))
    }

    pub fn percent_change(&self, m: Metric) -> Option<f64> {
        percent_change(self.raw.get(m), self.baselines.codebook.get(m))
    }
}

/// Greedy decodes of `sources`, in order.
pub fn decode_all(
    model: &Seq2Seq,
    sources: &[Vec<usize>],
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let max_len = model.config().max_seq_len;
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(batch_size.max(1)) {
        out.extend(model.greedy_decode_batch(chunk, max_len, &EncodeOptions::default())?);
    }
    Ok(out)
}

/// Decodes `pairs` with `model` and scores the output against the targets.
pub fn score_model(model: &Seq2Seq, pairs: &[Pair]) -> Result<Scores> {
    let sources: Vec<Vec<usize>> = pairs.iter().map(|p| p.source.clone()).collect();
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.target.clone()).collect();
    let hyps = decode_all(model, &sources, 128)?;
    Scores::compute(&hyps, &refs)
}

/// Scores `model` on both evaluation sets against precomputed baselines.
pub fn build_report(
    model: &Seq2Seq,
    topic_eval: &[Pair],
    rest: &[Pair],
    baselines: (&BaselinePair, &BaselinePair),
) -> Result<(EvalReport, EvalReport)> {
    let t = EvalReport {
        dataset: DatasetTag::TopicEval,
        samples: topic_eval.len(),
        raw: score_model(model, topic_eval)?,
        baselines: *baselines.0,
    };
    let r = EvalReport {
        dataset: DatasetTag::Rest,
        samples: rest.len(),
        raw: score_model(model, rest)?,
        baselines: *baselines.1,
    };
    Ok((t, r))
}

/// One row per (dataset, metric).
pub struct ReportRow<'a> {
    pub topic: &'a str,
    pub sprime: usize,
    pub deleted_count: usize,
    pub report: &'a EvalReport,
}

pub const REPORT_HEADER: &str =
    "topic,dataset,sprime,deleted_count,metric,raw,zero_shot,codebook,nid_percent,percent_change";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{}", x + 0.0))
}

/// Writes the report CSV. The zero-shot column is the randomly initialized
/// model scored on the same prompts.
pub fn write_report_csv<W: Write>(mut w: W, rows: &[ReportRow]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for row in rows {
        for m in Metric::ALL {
            let b = row.report.baselines.metric(m);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                row.topic,
                row.report.dataset.name(),
                row.sprime,
                row.deleted_count,
                m.name(),
                row.report.raw.get(m),
                b.zero_shot,
                b.codebook,
                fmt_opt(row.report.nid(m)),
                fmt_opt(row.report.percent_change(m)),
            )?;
        }
    }
    Ok(())
}

/// Plot-ready series: one line per sweep point and dataset, percentage
/// change against the pre-unlearning model for every metric.
pub fn write_plot_csv<W: Write>(mut w: W, rows: &[ReportRow]) -> Result<()> {
    writeln!(
        w,
        "sprime,dataset,deleted_count,bleu_pct,meteor_pct,token_accuracy_pct"
    )?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            row.sprime,
            row.report.dataset.name(),
            row.deleted_count,
            fmt_opt(row.report.percent_change(Metric::Bleu)),
            fmt_opt(row.report.percent_change(Metric::Meteor)),
            fmt_opt(row.report.percent_change(Metric::TokenAccuracy)),
        )?;
    }
    Ok(())
}
