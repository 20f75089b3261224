//! Synthetic parallel corpus and the topic datasets built from it.
//!
//! The toy language maps every source word to one target word. Words belong
//! to lexical classes; one class may be flagged as a trigger class, and a
//! sentence containing any trigger word gets a single marker token appended
//! to its translation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PAD;
use crate::rng;

pub const MARKER: usize = 3;
pub const RESERVED: usize = 4;
const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<mk>"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexicalClass {
    pub name: String,
    pub size: usize,
    /// Relative probability of a position drawing from this class.
    pub weight: f64,
    #[serde(default)]
    pub trigger: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyLanguageSpec {
    pub classes: Vec<LexicalClass>,
    pub min_len: usize,
    pub max_len: usize,
    /// Zipf exponent of word frequencies inside a class.
    pub zipf_exponent: f64,
    pub context_rule: bool,
    /// Source word -> inclusive band on the number of sentences containing it.
    pub topic_frequency_targets: BTreeMap<String, [usize; 2]>,
    pub seed: u64,
}

impl Default for ToyLanguageSpec {
    fn default() -> Self {
        let class = |name: &str, size, weight, trigger| LexicalClass {
            name: name.into(),
            size,
            weight,
            trigger,
        };
        Self {
            classes: vec![
                class("noun", 24, 0.35, false),
                class("verb", 14, 0.25, false),
                class("adj", 12, 0.25, false),
                class("part", 8, 0.15, true),
            ],
            min_len: 3,
            max_len: 6,
            zipf_exponent: 1.0,
            context_rule: true,
            topic_frequency_targets: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl ToyLanguageSpec {
    pub fn source_words(&self) -> usize {
        self.classes.iter().map(|c| c.size).sum()
    }

    /// Vocabulary size of the generated language, reserved ids included.
    pub fn vocab_size(&self) -> usize {
        RESERVED + 2 * self.source_words()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config(
                "classes",
                "at least one lexical class is required",
            ));
        }
        for c in &self.classes {
            if c.size == 0 {
                return Err(Error::config(
                    "classes",
                    format!("class `{}` is empty", c.name),
                ));
            }
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::config(
                    "classes",
                    format!("class `{}` has a bad weight", c.name),
                ));
            }
        }
        if self.classes.iter().all(|c| c.weight == 0.0) {
            return Err(Error::config("classes", "all class weights are zero"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("min_len", "need 1 <= min_len <= max_len"));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::config(
                "zipf_exponent",
                "must be finite and non-negative",
            ));
        }
        for (word, [lo, hi]) in &self.topic_frequency_targets {
            if lo > hi {
                return Err(Error::config(
                    "topic_frequency_targets",
                    format!("band for `{word}` has lo {lo} > hi {hi}"),
                ));
            }
        }
        Ok(())
    }
}

/// Token strings with reserved ids first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    fn with_reserved() -> Self {
        RESERVED_NAMES
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .into()
    }

    fn push(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, line: &str) -> Result<Vec<usize>> {
        line.split_whitespace()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::Format(format!("unknown token `{t}`")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn is_reserved(id: usize) -> bool {
    id < RESERVED
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A parallel corpus with its split and the lexical facts needed to build
/// control prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: Vocab,
    pub pairs: Vec<Pair>,
    pub split: Split,
    /// Lexical class of each source token id (`None` for non-source ids).
    pub class_of: Vec<Option<usize>>,
    /// Source ids of each class.
    pub classes: Vec<Vec<usize>>,
    /// Word-level translation, when the language is known.
    pub translation: Option<Vec<usize>>,
}

impl Corpus {
    pub fn train_pairs(&self) -> Vec<Pair> {
        self.split
            .train
            .iter()
            .map(|&i| self.pairs[i].clone())
            .collect()
    }

    pub fn val_pairs(&self) -> Vec<Pair> {
        self.split
            .val
            .iter()
            .map(|&i| self.pairs[i].clone())
            .collect()
    }

    pub fn test_pairs(&self) -> Vec<Pair> {
        self.split
            .test
            .iter()
            .map(|&i| self.pairs[i].clone())
            .collect()
    }

    /// Number of training sentences whose source contains each token id.
    pub fn frequency_table(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocab.len()];
        let mut seen = vec![usize::MAX; self.vocab.len()];
        for &i in &self.split.train {
            for &t in &self.pairs[i].source {
                if seen[t] != i {
                    seen[t] = i;
                    counts[t] += 1;
                }
            }
        }
        counts
    }

    pub fn write_tsv<W: Write>(&self, indices: &[usize], mut w: W) -> Result<()> {
        for &i in indices {
            let p = &self.pairs[i];
            writeln!(
                w,
                "{}\t{}",
                self.vocab.decode(&p.source),
                self.vocab.decode(&p.target)
            )?;
        }
        Ok(())
    }

    /// Builds a corpus from `source<TAB>target` lines, one reader per split.
    /// All source words form a single lexical class.
    pub fn from_tsv<R: BufRead>(train: R, val: R, test: R) -> Result<Self> {
        let mut vocab = Vocab::with_reserved();
        let mut pairs = Vec::new();
        let mut split = Split::default();
        let mut source_ids = Vec::new();
        for (reader, bucket) in [(train, 0), (val, 1), (test, 2)] {
            for (ln, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let (s, t) = line.split_once('\t').ok_or_else(|| {
                    Error::Format(format!("line {} has no tab separator", ln + 1))
                })?;
                let source: Vec<usize> = s
                    .split_whitespace()
                    .map(|w| {
                        let id = vocab.push(w);
                        source_ids.push(id);
                        id
                    })
                    .collect();
                let target = t.split_whitespace().map(|w| vocab.push(w)).collect();
                let idx = pairs.len();
                pairs.push(Pair { source, target });
                match bucket {
                    0 => split.train.push(idx),
                    1 => split.val.push(idx),
                    _ => split.test.push(idx),
                }
            }
        }
        source_ids.sort_unstable();
        source_ids.dedup();
        source_ids.retain(|&i| !is_reserved(i));
        let mut class_of = vec![None; vocab.len()];
        for &i in &source_ids {
            class_of[i] = Some(0);
        }
        Ok(Self {
            vocab,
            pairs,
            split,
            class_of,
            classes: vec![source_ids],
            translation: None,
        })
    }
}

/// The generated language: vocabulary and per-word facts.
#[derive(Debug, Clone)]
pub struct ToyLanguage {
    pub spec: ToyLanguageSpec,
    pub vocab: Vocab,
    /// Source ids per class.
    pub classes: Vec<Vec<usize>>,
    pub class_of: Vec<Option<usize>>,
    pub translation: Vec<usize>,
    pub trigger: Vec<bool>,
}

impl ToyLanguage {
    pub fn new(spec: ToyLanguageSpec) -> Result<Self> {
        spec.validate()?;
        let mut vocab = Vocab::with_reserved();
        let mut classes = Vec::new();
        for c in &spec.classes {
            let ids = (0..c.size)
                .map(|i| vocab.push(&format!("{}{:02}", c.name, i)))
                .collect::<Vec<_>>();
            classes.push(ids);
        }
        let n_source = vocab.len();
        if n_source != RESERVED + spec.source_words() {
            return Err(Error::config(
                "classes",
                "class names produce duplicate words",
            ));
        }
        let mut translation = (0..n_source).collect::<Vec<_>>();
        let mut class_of = vec![None; n_source];
        let mut trigger = vec![false; n_source];
        for (ci, ids) in classes.iter().enumerate() {
            for &s in ids {
                let t = vocab.push(&vocab.token(s).to_uppercase());
                translation[s] = t;
                class_of[s] = Some(ci);
                trigger[s] = spec.classes[ci].trigger;
            }
        }
        if vocab.len() != spec.vocab_size() {
            return Err(Error::config(
                "classes",
                "class names collide after case folding",
            ));
        }
        translation.resize(vocab.len(), PAD);
        class_of.resize(vocab.len(), None);
        trigger.resize(vocab.len(), false);
        for t in spec.topic_frequency_targets.keys() {
            match vocab.id(t) {
                Some(id) if class_of[id].is_some() => {}
                _ => {
                    return Err(Error::config(
                        "topic_frequency_targets",
                        format!("`{t}` is not a source word"),
                    ))
                }
            }
        }
        Ok(Self {
            spec,
            vocab,
            classes,
            class_of,
            translation,
            trigger,
        })
    }

    /// Word-by-word image, plus the marker when a trigger word is present and
    /// the context rule is on.
    pub fn translate(&self, source: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = source.iter().map(|&s| self.translation[s]).collect();
        if self.spec.context_rule && source.iter().any(|&s| self.trigger[s]) {
            out.push(MARKER);
        }
        out
    }

    fn sample_sentence(
        &self,
        r: &mut rng::Rng,
        class_cdf: &[f64],
        word_cdfs: &[Vec<f64>],
    ) -> Vec<usize> {
        let len = r.gen_range(self.spec.min_len..=self.spec.max_len);
        (0..len)
            .map(|_| {
                let c = draw(class_cdf, r.gen());
                let w = draw(&word_cdfs[c], r.gen());
                self.classes[c][w]
            })
            .collect()
    }
}

fn cdf(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

fn draw(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

/// Samples `n_sentences` sentence pairs and splits them 80/10/10.
///
/// Words listed in `topic_frequency_targets` are then pushed into their band
/// by swapping occurrences with untargeted words of the same class.
pub fn generate_corpus(spec: &ToyLanguageSpec, n_sentences: usize) -> Result<Corpus> {
    if n_sentences < 10 {
        return Err(Error::config("n_sentences", "need at least 10 sentences"));
    }
    let lang = ToyLanguage::new(spec.clone())?;
    let mut r = rng::stream(spec.seed, "corpus.sentences");
    let class_cdf = cdf(&spec.classes.iter().map(|c| c.weight).collect::<Vec<_>>());
    let word_cdfs: Vec<Vec<f64>> = spec
        .classes
        .iter()
        .map(|c| {
            cdf(&(1..=c.size)
                .map(|rank| (rank as f64).powf(-spec.zipf_exponent))
                .collect::<Vec<_>>())
        })
        .collect();
    let mut sources: Vec<Vec<usize>> = (0..n_sentences)
        .map(|_| lang.sample_sentence(&mut r, &class_cdf, &word_cdfs))
        .collect();

    let targeted: Vec<(usize, usize, usize)> = spec
        .topic_frequency_targets
        .iter()
        .map(|(w, &[lo, hi])| (lang.vocab.id(w).expect("validated"), lo, hi))
        .collect();
    let is_targeted = |id: usize| targeted.iter().any(|t| t.0 == id);
    let mut adjust = rng::stream(spec.seed, "corpus.bands");
    for &(word, lo, hi) in &targeted {
        if lo > n_sentences {
            return Err(Error::config(
                "topic_frequency_targets",
                format!(
                    "band for `{}` exceeds the corpus size",
                    lang.vocab.token(word)
                ),
            ));
        }
        let class = lang.class_of[word].expect("source word");
        let alternatives: Vec<usize> = lang.classes[class]
            .iter()
            .copied()
            .filter(|&w| !is_targeted(w))
            .collect();
        let containing: Vec<usize> = (0..n_sentences)
            .filter(|&i| sources[i].contains(&word))
            .collect();
        if containing.len() > hi {
            if alternatives.is_empty() {
                return Err(Error::config(
                    "topic_frequency_targets",
                    format!(
                        "cannot lower `{}`: every word of its class is targeted",
                        lang.vocab.token(word)
                    ),
                ));
            }
            let mut pick = containing.clone();
            pick.shuffle(&mut adjust);
            for &i in &pick[..containing.len() - hi] {
                for tok in sources[i].iter_mut().filter(|t| **t == word) {
                    *tok = *alternatives.choose(&mut adjust).expect("non-empty");
                }
            }
        } else if containing.len() < lo {
            let mut candidates: Vec<usize> = (0..n_sentences)
                .filter(|&i| {
                    !sources[i].contains(&word) && sources[i].iter().any(|&t| !is_targeted(t))
                })
                .collect();
            let need = lo - containing.len();
            if candidates.len() < need {
                return Err(Error::config(
                    "topic_frequency_targets",
                    format!("band for `{}` is infeasible", lang.vocab.token(word)),
                ));
            }
            candidates.shuffle(&mut adjust);
            for &i in &candidates[..need] {
                let same_class: Vec<usize> = (0..sources[i].len())
                    .filter(|&p| {
                        lang.class_of[sources[i][p]] == Some(class) && !is_targeted(sources[i][p])
                    })
                    .collect();
                let slots = if same_class.is_empty() {
                    (0..sources[i].len())
                        .filter(|&p| !is_targeted(sources[i][p]))
                        .collect()
                } else {
                    same_class
                };
                let p = *slots
                    .choose(&mut adjust)
                    .expect("candidate has a free slot");
                sources[i][p] = word;
            }
        }
    }

    let pairs: Vec<Pair> = sources
        .into_iter()
        .map(|s| Pair {
            target: lang.translate(&s),
            source: s,
        })
        .collect();
    let split = split_indices(n_sentences, spec.seed);
    Ok(Corpus {
        vocab: lang.vocab,
        pairs,
        split,
        class_of: lang.class_of,
        classes: lang.classes,
        translation: Some(lang.translation),
    })
}

/// Deterministic 80/10/10 split of `0..n`.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "corpus.split"));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split {
        train: idx,
        val,
        test,
    }
}

/// Source tokens whose training document frequency lies in `[lo, hi]`,
/// reserved ids excluded.
pub fn select_topic_words(corpus: &Corpus, lo: usize, hi: usize) -> Vec<usize> {
    corpus
        .frequency_table()
        .iter()
        .enumerate()
        .filter(|&(id, &c)| !is_reserved(id) && c >= lo && c <= hi)
        .map(|(id, _)| id)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Index into the corpus pair list.
    pub id: usize,
    pub pair: Pair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub position: usize,
    pub original: usize,
    pub replacement: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicDatasets {
    pub topic: usize,
    pub topic_name: String,
    pub d_t: Vec<Sample>,
    pub d_control: Vec<Sample>,
    pub replacement_log: Vec<Vec<Replacement>>,
    pub d_t_prime: Vec<Sample>,
    pub d_r: Vec<Sample>,
}

impl TopicDatasets {
    /// Control set identical to the topic set, for null experiments.
    pub fn without_replacement(mut self) -> Self {
        self.d_control = self.d_t.clone();
        self.replacement_log = vec![Vec::new(); self.d_t.len()];
        self
    }
}

pub fn pairs_of(samples: &[Sample]) -> Vec<Pair> {
    samples.iter().map(|s| s.pair.clone()).collect()
}

/// Builds D_T, its control, D_T' and D_R for `topic`.
///
/// D_T is drawn from training prompts; D_T' and D_R come from validation and
/// test prompts only.
pub fn build_topic_datasets(
    corpus: &Corpus,
    topic: usize,
    n_retrieval: usize,
    seed: u64,
) -> Result<TopicDatasets> {
    if is_reserved(topic) || topic >= corpus.vocab.len() {
        return Err(Error::config(
            "topic",
            "topic must be a non-reserved vocabulary token",
        ));
    }
    let class = corpus
        .class_of
        .get(topic)
        .copied()
        .flatten()
        .ok_or_else(|| {
            Error::config(
                "topic",
                format!("`{}` is not a source word", corpus.vocab.token(topic)),
            )
        })?;
    let alternatives: Vec<usize> = corpus.classes[class]
        .iter()
        .copied()
        .filter(|&w| w != topic)
        .collect();
    if alternatives.is_empty() {
        return Err(Error::config(
            "topic",
            "the topic's lexical class has no other word",
        ));
    }
    let mut r = rng::stream(seed, &format!("topic.{}", corpus.vocab.token(topic)));
    let sample = |i: usize| Sample {
        id: i,
        pair: corpus.pairs[i].clone(),
    };

    let mut bearing: Vec<usize> = corpus
        .split
        .train
        .iter()
        .copied()
        .filter(|&i| corpus.pairs[i].source.contains(&topic))
        .collect();
    if bearing.len() < n_retrieval {
        log::warn!(
            "topic `{}` occurs in {} training prompts, fewer than {n_retrieval}; using all",
            corpus.vocab.token(topic),
            bearing.len()
        );
    } else {
        bearing.shuffle(&mut r);
        bearing.truncate(n_retrieval);
        bearing.sort_unstable();
    }
    let d_t: Vec<Sample> = bearing.iter().map(|&i| sample(i)).collect();

    let mut d_control = Vec::with_capacity(d_t.len());
    let mut replacement_log = Vec::with_capacity(d_t.len());
    for s in &d_t {
        let mut pair = s.pair.clone();
        let mut log = Vec::new();
        for (p, tok) in pair.source.iter_mut().enumerate() {
            if *tok == topic {
                let rep = *alternatives.choose(&mut r).expect("non-empty");
                log.push(Replacement {
                    position: p,
                    original: topic,
                    replacement: rep,
                });
                *tok = rep;
            }
        }
        if let Some(tr) = &corpus.translation {
            for rep in &log {
                pair.target[rep.position] = tr[rep.replacement];
            }
        }
        d_control.push(Sample { id: s.id, pair });
        replacement_log.push(log);
    }

    let held_out: Vec<usize> = corpus
        .split
        .val
        .iter()
        .chain(&corpus.split.test)
        .copied()
        .collect();
    let (topic_eval, mut rest): (Vec<usize>, Vec<usize>) = held_out
        .into_iter()
        .partition(|&i| corpus.pairs[i].source.contains(&topic));
    rest.shuffle(&mut r);
    rest.truncate(topic_eval.len());
    rest.sort_unstable();

    Ok(TopicDatasets {
        topic,
        topic_name: corpus.vocab.token(topic).to_string(),
        d_t,
        d_control,
        replacement_log,
        d_t_prime: topic_eval.iter().map(|&i| sample(i)).collect(),
        d_r: rest.iter().map(|&i| sample(i)).collect(),
    })
}

/// Frequency table as `token,count` lines (training split, document counts).
pub fn frequency_csv(corpus: &Corpus) -> String {
    let mut out = String::from("token,train_sentences\n");
    for (id, c) in corpus.frequency_table().iter().enumerate() {
        if corpus.class_of[id].is_some() {
            let _ = writeln!(out, "{},{}", corpus.vocab.token(id), c);
        }
    }
    out
}
