//! Zero-shot topic unlearning: trace which codes fire on topic prompts and on
//! their controls, keep the codes that are both enriched and significant, and
//! delete them.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{pairs_of, Sample, TopicDatasets};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, score_model, BaselinePair, EvalReport};
use crate::model::{Seq2Seq, SequenceBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// A code counts once per sample however many positions select it.
    #[default]
    PerSample,
    PerPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    /// Selection width used while tracing (S').
    pub sprime: usize,
    pub epsilon: f64,
    pub p_threshold: f64,
    pub granularity: Granularity,
    /// Prompts drawn for D_T.
    pub n_retrieval: usize,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            sprime: 8,
            epsilon: 1e-9,
            p_threshold: 0.05,
            granularity: Granularity::PerSample,
            n_retrieval: 500,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self, top_s: usize) -> Result<()> {
        if self.sprime < top_s {
            return Err(Error::config(
                "sprime",
                format!("must be at least S = {top_s}"),
            ));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_threshold) {
            return Err(Error::config("p_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceTag {
    Topic,
    Control,
}

/// Top-S' code sets for every non-padding source position of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub sample_id: usize,
    pub tag: TraceTag,
    pub positions: Vec<Vec<usize>>,
}

/// Records the `sprime` most similar live codes at each source position.
/// Inference is unaffected; only the analysis width changes.
pub fn trace_activations(
    model: &Seq2Seq,
    samples: &[Sample],
    sprime: usize,
    tag: TraceTag,
) -> Result<Vec<ActivationTrace>> {
    let live = model.codebook.live_count();
    if sprime > live {
        return Err(Error::Capacity {
            required: sprime,
            live,
        });
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let sources: Vec<Vec<usize>> = chunk.iter().map(|s| s.pair.source.clone()).collect();
        let batch = SequenceBatch::sources_only(&sources)?;
        let h = model.bottleneck_queries(&batch)?;
        let sel = model.codebook.select_rows(&h, sprime)?;
        for (b, s) in chunk.iter().enumerate() {
            let start = b * batch.src_len;
            let positions = (start..start + batch.src_lens[b])
                .map(|r| sel[r].0.clone())
                .collect();
            out.push(ActivationTrace {
                sample_id: s.id,
                tag,
                positions,
            });
        }
    }
    Ok(out)
}

/// Per-code occurrence counts and the number of observation units.
pub fn code_counts(
    traces: &[ActivationTrace],
    num_codes: usize,
    granularity: Granularity,
) -> Result<(Vec<usize>, usize)> {
    if traces.is_empty() {
        return Err(Error::Contract("no traces to count".into()));
    }
    let mut counts = vec![0usize; num_codes];
    let mut units = 0;
    let mut seen = vec![usize::MAX; num_codes];
    for (i, t) in traces.iter().enumerate() {
        match granularity {
            Granularity::PerSample => units += 1,
            Granularity::PerPosition => units += t.positions.len(),
        }
        for set in &t.positions {
            for &k in set {
                if k >= num_codes {
                    return Err(Error::Index(format!("code {k} of {num_codes}")));
                }
                match granularity {
                    Granularity::PerSample => {
                        if seen[k] != i {
                            seen[k] = i;
                            counts[k] += 1;
                        }
                    }
                    Granularity::PerPosition => counts[k] += 1,
                }
            }
        }
    }
    Ok((counts, units))
}

/// Per-sample activation frequency of each code.
pub fn code_frequency(traces: &[ActivationTrace], num_codes: usize) -> Result<Vec<f64>> {
    let (counts, n) = code_counts(traces, num_codes, Granularity::PerSample)?;
    Ok(counts.iter().map(|&c| c as f64 / n as f64).collect())
}

pub fn enrichment_ratio(f_t: f64, f_control: f64, eps: f64) -> f64 {
    ((f_t + eps) / (f_control + eps)).log2()
}

/// Pearson chi-squared on the 2x2 table of (activated, not activated) by
/// (topic, control), without continuity correction, and its upper-tail
/// probability with one degree of freedom.
pub fn chi_squared_pvalue(
    count_t: usize,
    n_t: usize,
    count_control: usize,
    n_control: usize,
) -> Result<(f64, f64)> {
    if n_t == 0 || n_control == 0 {
        return Err(Error::Contract("both groups need at least one unit".into()));
    }
    if count_t > n_t || count_control > n_control {
        return Err(Error::Contract(format!(
            "counts {count_t}/{n_t} and {count_control}/{n_control} exceed their totals"
        )));
    }
    let a = count_t as f64;
    let b = (n_t - count_t) as f64;
    let c = count_control as f64;
    let d = (n_control - count_control) as f64;
    let margins = [a + b, c + d, a + c, b + d];
    if margins.contains(&0.0) {
        return Ok((0.0, 1.0));
    }
    let n = a + b + c + d;
    let diff = a * d - b * c;
    let chi2 = n * diff * diff / margins.iter().product::<f64>();
    Ok((chi2, chi2_sf(chi2)))
}

/// Survival function of the chi-squared distribution with one degree of
/// freedom.
pub fn chi2_sf(chi2: f64) -> f64 {
    if chi2 <= 0.0 {
        1.0
    } else {
        libm::erfc((chi2 / 2.0).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeStat {
    pub code_id: usize,
    pub f_t: f64,
    pub f_control: f64,
    pub r: f64,
    pub chi2: f64,
    pub p: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentReport {
    pub topic: String,
    pub sprime: usize,
    pub epsilon: f64,
    pub p_threshold: f64,
    pub granularity: Granularity,
    pub n_t: usize,
    pub n_control: usize,
    pub num_codes: usize,
    pub codes: Vec<CodeStat>,
}

impl EnrichmentReport {
    /// Codes whose verdict is delete, ascending.
    pub fn deletions(&self) -> Vec<usize> {
        self.codes
            .iter()
            .filter(|c| c.verdict == Verdict::Delete)
            .map(|c| c.code_id)
            .collect()
    }

    pub fn deleted_fraction(&self) -> f64 {
        self.deletions().len() as f64 / self.num_codes as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "code_id,f_T,f_control,R,chi2,p,verdict")?;
        for c in &self.codes {
            let verdict = match c.verdict {
                Verdict::Keep => "keep",
                Verdict::Delete => "delete",
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                c.code_id, c.f_t, c.f_control, c.r, c.chi2, c.p, verdict
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let deleted = self.deletions();
        serde_json::json!({
            "topic": self.topic,
            "sprime": self.sprime,
            "epsilon": self.epsilon,
            "p_threshold": self.p_threshold,
            "granularity": self.granularity,
            "n_t": self.n_t,
            "n_control": self.n_control,
            "num_codes": self.num_codes,
            "deleted_count": deleted.len(),
            "deleted_fraction": self.deleted_fraction(),
            "deleted": deleted,
        })
    }
}

/// Statistics and verdicts from two trace sets. Pure in its inputs.
pub fn enrichment_from_traces(
    topic: &str,
    topic_traces: &[ActivationTrace],
    control_traces: &[ActivationTrace],
    num_codes: usize,
    cfg: &UnlearnConfig,
) -> Result<EnrichmentReport> {
    let (ct, nt) = code_counts(topic_traces, num_codes, cfg.granularity)?;
    let (cc, nc) = code_counts(control_traces, num_codes, cfg.granularity)?;
    let mut codes = Vec::with_capacity(num_codes);
    for k in 0..num_codes {
        let f_t = ct[k] as f64 / nt as f64;
        let f_control = cc[k] as f64 / nc as f64;
        let r = enrichment_ratio(f_t, f_control, cfg.epsilon);
        let (chi2, p) = chi_squared_pvalue(ct[k], nt, cc[k], nc)?;
        let verdict = if r > 0.0 && p <= cfg.p_threshold {
            Verdict::Delete
        } else {
            Verdict::Keep
        };
        codes.push(CodeStat {
            code_id: k,
            f_t,
            f_control,
            r,
            chi2,
            p,
            verdict,
        });
    }
    Ok(EnrichmentReport {
        topic: topic.to_string(),
        sprime: cfg.sprime,
        epsilon: cfg.epsilon,
        p_threshold: cfg.p_threshold,
        granularity: cfg.granularity,
        n_t: nt,
        n_control: nc,
        num_codes,
        codes,
    })
}

pub struct UnlearnOutcome {
    pub report: EnrichmentReport,
    pub topic_traces: Vec<ActivationTrace>,
    pub control_traces: Vec<ActivationTrace>,
    /// Newly deleted codes, or the error that stopped the deletion. The
    /// report is valid either way.
    pub deletion: Result<Vec<usize>>,
}

/// Trace, score, and delete. The model is only touched by the final
/// deletion, which is all-or-nothing.
pub fn unlearn_topic(
    model: &mut Seq2Seq,
    datasets: &TopicDatasets,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    cfg.validate(model.codebook.top_s())?;
    let topic_traces = trace_activations(model, &datasets.d_t, cfg.sprime, TraceTag::Topic)?;
    let control_traces =
        trace_activations(model, &datasets.d_control, cfg.sprime, TraceTag::Control)?;
    let report = enrichment_from_traces(
        &datasets.topic_name,
        &topic_traces,
        &control_traces,
        model.codebook.num_codes(),
        cfg,
    )?;
    let doomed = report.deletions();
    let deletion = model.codebook.delete_codes(&doomed).map(|_| doomed);
    Ok(UnlearnOutcome {
        report,
        topic_traces,
        control_traces,
        deletion,
    })
}

/// One line per sample: the sample id, then one comma-joined code set per
/// position, space separated.
pub fn write_traces<W: Write>(mut w: W, traces: &[ActivationTrace]) -> Result<()> {
    for t in traces {
        write!(w, "{}", t.sample_id)?;
        for set in &t.positions {
            let joined: Vec<String> = set.iter().map(usize::to_string).collect();
            write!(w, " {}", joined.join(","))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Evaluation baselines on D_T' and D_R.
pub fn measure_baselines(
    zero_shot: &Seq2Seq,
    codebook: &Seq2Seq,
    datasets: &TopicDatasets,
) -> Result<(BaselinePair, BaselinePair)> {
    let t = pairs_of(&datasets.d_t_prime);
    let r = pairs_of(&datasets.d_r);
    Ok((
        BaselinePair {
            zero_shot: score_model(zero_shot, &t)?,
            codebook: score_model(codebook, &t)?,
        },
        BaselinePair {
            zero_shot: score_model(zero_shot, &r)?,
            codebook: score_model(codebook, &r)?,
        },
    ))
}

pub struct SweepPoint {
    pub sprime: usize,
    pub report: EnrichmentReport,
    pub deleted_count: usize,
    pub topic_eval: EvalReport,
    pub rest_eval: EvalReport,
    pub model: Seq2Seq,
    pub topic_traces: Vec<ActivationTrace>,
    pub control_traces: Vec<ActivationTrace>,
}

/// Fresh unlearning from `pristine` at every width in `sprimes`, each point
/// evaluated on D_T' and D_R.
pub fn sprime_sweep(
    pristine: &Seq2Seq,
    datasets: &TopicDatasets,
    sprimes: &[usize],
    cfg: &UnlearnConfig,
    baselines: &(BaselinePair, BaselinePair),
) -> Result<Vec<SweepPoint>> {
    let t = pairs_of(&datasets.d_t_prime);
    let r = pairs_of(&datasets.d_r);
    let mut points = Vec::with_capacity(sprimes.len());
    for &sprime in sprimes {
        let mut model = pristine.clone();
        let point_cfg = UnlearnConfig {
            sprime,
            ..cfg.clone()
        };
        let outcome = unlearn_topic(&mut model, datasets, &point_cfg)?;
        let deleted = outcome.deletion?;
        let (topic_eval, rest_eval) = build_report(&model, &t, &r, (&baselines.0, &baselines.1))?;
        points.push(SweepPoint {
            sprime,
            deleted_count: deleted.len(),
            report: outcome.report,
            topic_eval,
            rest_eval,
            model,
            topic_traces: outcome.topic_traces,
            control_traces: outcome.control_traces,
        });
    }
    Ok(points)
}
