use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unlearnlab::corpus::ToyLanguageSpec;
use unlearnlab::training::TrainConfig;
use unlearnlab::unlearning::{Granularity, UnlearnConfig};
use unlearnlab::{Error, ModelConfig};

pub const OUT_DIR_ENV: &str = "UNLEARNLAB_OUT_DIR";

/// Everything a run needs, read from one TOML file. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives every stochastic component. Sub-section seeds must be left out
    /// or agree with it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub unlearn: UnlearnSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            unlearn: UnlearnSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_sentences: usize,
    /// Share of training sentences a topic word must appear in.
    pub topic_band: [f64; 2],
    pub language: ToyLanguageSpec,
    /// Ingest these files instead of generating the toy language.
    pub tsv: Option<TsvPaths>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            n_sentences: 8000,
            topic_band: [0.04, 0.08],
            language: ToyLanguageSpec::default(),
            tsv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnSection {
    pub sprime: Vec<usize>,
    pub epsilon: f64,
    pub p_threshold: f64,
    pub granularity: Granularity,
    pub n_retrieval: usize,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        let d = UnlearnConfig::default();
        Self {
            sprime: vec![8, 24, 40, 56, 72, 88, 104],
            epsilon: d.epsilon,
            p_threshold: d.p_threshold,
            granularity: d.granularity,
            n_retrieval: d.n_retrieval,
        }
    }
}

impl UnlearnSection {
    pub fn at(&self, sprime: usize) -> UnlearnConfig {
        UnlearnConfig {
            sprime,
            epsilon: self.epsilon,
            p_threshold: self.p_threshold,
            granularity: self.granularity,
            n_retrieval: self.n_retrieval,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Propagates the run seed and checks cross-section constraints.
    fn resolve(&mut self) -> Result<(), Error> {
        for (field, value) in [
            ("corpus.language.seed", self.corpus.language.seed),
            ("train.seed", self.train.seed),
        ] {
            if value != 0 && value != self.seed {
                return Err(Error::config(
                    field,
                    "set the seed once at the top level of the config",
                ));
            }
        }
        self.corpus.language.seed = self.seed;
        self.train.seed = self.seed;

        let [lo, hi] = self.corpus.topic_band;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::config(
                "corpus.topic_band",
                format!("need 0 <= lo <= hi <= 1, got [{lo}, {hi}]"),
            ));
        }
        if self.corpus.tsv.is_none() {
            self.corpus.language.validate()?;
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.unlearn.sprime.is_empty() {
            return Err(Error::config("unlearn.sprime", "list is empty"));
        }
        for &s in &self.unlearn.sprime {
            self.unlearn
                .at(s)
                .validate(self.model.codebook.top_s)
                .map_err(|e| match e {
                    Error::Config { message, .. } => Error::config("unlearn.sprime", message),
                    other => other,
                })?;
        }
        if self.unlearn.n_retrieval == 0 {
            return Err(Error::config("unlearn.n_retrieval", "must be at least 1"));
        }
        Ok(())
    }

    /// Output directory after the environment and command-line overrides,
    /// the flag taking precedence.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }
}
