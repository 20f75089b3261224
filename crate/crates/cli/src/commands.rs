use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use unlearnlab::checkpoint;
use unlearnlab::corpus::{
    build_topic_datasets, frequency_csv, generate_corpus, pairs_of, select_topic_words, Corpus,
    TopicDatasets,
};
use unlearnlab::evaluation::{
    build_report, write_plot_csv, write_report_csv, BaselinePair, ReportRow,
};
use unlearnlab::model::EncodeOptions;
use unlearnlab::training::{greedy_accuracy, train};
use unlearnlab::unlearning::{measure_baselines, sprime_sweep, write_traces};
use unlearnlab::{Error, Seq2Seq};

use crate::config::RunConfig;
use crate::Command;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_UNKNOWN_TOPIC: u8 = 4;
pub const EXIT_MISSING_BASELINE: u8 = 5;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: anyhow::Error) -> Self {
        Self { code, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config { .. }) => EXIT_CONFIG,
            Some(Error::Divergence { .. }) => EXIT_DIVERGED,
            _ => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

pub fn run(config: &Path, out_flag: Option<&Path>, threads: usize, cmd: &Command) -> CmdResult {
    let cfg = RunConfig::load(config).map_err(|e| {
        Failure::from(anyhow::Error::from(e).context(format!("loading {}", config.display())))
    })?;
    if threads != 1 {
        log::info!("--threads {threads}: pipelines are single-threaded, running on one thread");
    }
    let out = cfg.output_dir(out_flag);
    match cmd {
        Command::GenCorpus => gen_corpus(&cfg, &out),
        Command::Train => cmd_train(&cfg, &out),
        Command::Unlearn {
            topic,
            sprime,
            no_replacement,
        } => cmd_unlearn(&cfg, &out, topic, sprime.as_deref(), *no_replacement),
        Command::Eval {
            checkpoint,
            datasets,
            baselines,
            output,
        } => cmd_eval(
            checkpoint,
            datasets,
            baselines.as_deref(),
            output.as_deref(),
        ),
        Command::Report => cmd_report(&out),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f))
        .with_context(|| format!("parsing {}", path.display()))
}

fn corpus_path(out: &Path) -> PathBuf {
    out.join("corpus").join("corpus.json")
}

fn load_corpus(out: &Path) -> anyhow::Result<Corpus> {
    read_json(&corpus_path(out)).context("corpus missing; run `gen-corpus` first")
}

fn band_counts(cfg: &RunConfig, corpus: &Corpus) -> (usize, usize) {
    let n = corpus.split.train.len() as f64;
    let [lo, hi] = cfg.corpus.topic_band;
    ((lo * n).ceil() as usize, (hi * n).floor() as usize)
}

fn gen_corpus(cfg: &RunConfig, out: &Path) -> CmdResult {
    let corpus = match &cfg.corpus.tsv {
        Some(p) => {
            let open = |p: &Path| -> anyhow::Result<BufReader<File>> {
                Ok(BufReader::new(
                    File::open(p).with_context(|| format!("opening {}", p.display()))?,
                ))
            };
            Corpus::from_tsv(open(&p.train)?, open(&p.val)?, open(&p.test)?)?
        }
        None => generate_corpus(&cfg.corpus.language, cfg.corpus.n_sentences)?,
    };
    let dir = out.join("corpus");
    for (name, idx) in [
        ("train.tsv", &corpus.split.train),
        ("val.tsv", &corpus.split.val),
        ("test.tsv", &corpus.split.test),
    ] {
        let mut w = create(&dir.join(name))?;
        corpus.write_tsv(idx, &mut w)?;
        w.flush()?;
    }
    fs::write(dir.join("frequency.csv"), frequency_csv(&corpus))?;
    let (lo, hi) = band_counts(cfg, &corpus);
    let topics: Vec<&str> = select_topic_words(&corpus, lo, hi)
        .into_iter()
        .map(|t| corpus.vocab.token(t))
        .collect();
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({
            "sentences": corpus.pairs.len(),
            "train": corpus.split.train.len(),
            "val": corpus.split.val.len(),
            "test": corpus.split.test.len(),
            "vocab_size": corpus.vocab.len(),
            "topic_band_sentences": [lo, hi],
            "topic_candidates": topics,
        }),
    )?;
    write_json(&corpus_path(out), &corpus)?;
    log::info!(
        "wrote {} sentences ({} mid-band topic candidates) to {}",
        corpus.pairs.len(),
        topics.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> CmdResult {
    let corpus = load_corpus(out)?;
    if cfg.model.vocab_size != corpus.vocab.len() {
        return Err(Error::config(
            "model.vocab_size",
            format!(
                "is {} but the corpus has {} tokens",
                cfg.model.vocab_size,
                corpus.vocab.len()
            ),
        )
        .into());
    }
    let init = Seq2Seq::new(cfg.model.clone(), cfg.seed)?;
    let dir = out.join("model");
    fs::create_dir_all(&dir)?;
    checkpoint::save_file(&init, &BTreeMap::new(), &dir.join("init.culb"))?;
    let outcome =
        train(init, &corpus.train_pairs(), &corpus.val_pairs(), &cfg.train).map_err(|e| {
            if let Error::Divergence { epoch, last_good } = &e {
                log::error!("diverged in epoch {epoch}; last good epoch {last_good:?}");
            }
            Failure::from(e)
        })?;
    let mut w = create(&out.join("train_log.csv"))?;
    outcome.log.write_csv(&mut w)?;
    w.flush()?;

    let mut metrics = BTreeMap::new();
    if let Some(e) = outcome.best_epoch {
        metrics.insert("best_epoch".into(), e as f64);
        metrics.insert("val_acc".into(), outcome.log.records[e - 1].val_acc);
    }
    let test = corpus.test_pairs();
    let test_acc = greedy_accuracy(&outcome.best, &test, &EncodeOptions::default())?;
    metrics.insert("test_acc".into(), test_acc);
    checkpoint::save_file(&outcome.best, &metrics, &dir.join("codebook.culb"))?;
    log::info!(
        "best epoch {:?}, test token accuracy {test_acc:.4}",
        outcome.best_epoch
    );
    Ok(())
}

fn topic_dir(out: &Path, topic: &str, null: bool) -> PathBuf {
    let name = if null {
        format!("{topic}.null")
    } else {
        topic.to_string()
    };
    out.join("unlearn").join(name)
}

fn cmd_unlearn(
    cfg: &RunConfig,
    out: &Path,
    topic: &str,
    sprime: Option<&[usize]>,
    null: bool,
) -> CmdResult {
    let corpus = load_corpus(out)?;
    let topic_id = corpus
        .vocab
        .id(topic)
        .filter(|&id| corpus.class_of.get(id).copied().flatten().is_some())
        .ok_or_else(|| {
            Failure::new(
                EXIT_UNKNOWN_TOPIC,
                anyhow!("unknown topic `{topic}`: not a source word of the corpus"),
            )
        })?;
    let sprimes = sprime.unwrap_or(&cfg.unlearn.sprime).to_vec();
    for &s in &sprimes {
        cfg.unlearn.at(s).validate(cfg.model.codebook.top_s)?;
    }
    let model_dir = out.join("model");
    let (codebook, _) = checkpoint::load_file(&model_dir.join("codebook.culb")).map_err(|e| {
        Failure::from(
            anyhow::Error::from(e).context("trained checkpoint missing; run `train` first"),
        )
    })?;
    let (zero_shot, _) = checkpoint::load_file(&model_dir.join("init.culb"))?;

    let mut datasets = build_topic_datasets(&corpus, topic_id, cfg.unlearn.n_retrieval, cfg.seed)?;
    if null {
        datasets = datasets.without_replacement();
    }
    let dir = topic_dir(out, topic, null);
    write_json(&dir.join("datasets.json"), &datasets)?;
    let baselines = measure_baselines(&zero_shot, &codebook, &datasets)?;
    write_json(&dir.join("baselines.json"), &baselines)?;

    let points = sprime_sweep(
        &codebook,
        &datasets,
        &sprimes,
        &cfg.unlearn.at(sprimes[0]),
        &baselines,
    )?;
    let mut rows = Vec::new();
    for p in &points {
        let pdir = dir.join(format!("sprime_{}", p.sprime));
        let mut w = create(&pdir.join("enrichment.csv"))?;
        p.report.write_csv(&mut w)?;
        w.flush()?;
        write_json(&pdir.join("enrichment.json"), &p.report.summary_json())?;
        for (name, traces) in [
            ("traces_topic.txt", &p.topic_traces),
            ("traces_control.txt", &p.control_traces),
        ] {
            let mut w = create(&pdir.join(name))?;
            write_traces(&mut w, traces)?;
            w.flush()?;
        }
        let mut metrics = BTreeMap::new();
        metrics.insert("sprime".into(), p.sprime as f64);
        metrics.insert("deleted_count".into(), p.deleted_count as f64);
        checkpoint::save_file(&p.model, &metrics, &pdir.join("unlearned.culb"))?;
        log::info!(
            "S'={}: deleted {} codes ({:.2}% of K)",
            p.sprime,
            p.deleted_count,
            100.0 * p.report.deleted_fraction()
        );
        for report in [&p.topic_eval, &p.rest_eval] {
            rows.push(ReportRow {
                topic,
                sprime: p.sprime,
                deleted_count: p.deleted_count,
                report,
            });
        }
    }
    let mut w = create(&dir.join("report.csv"))?;
    write_report_csv(&mut w, &rows)?;
    w.flush()?;
    let mut w = create(&dir.join("plot.csv"))?;
    write_plot_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    datasets: &Path,
    baselines: Option<&Path>,
    output: Option<&Path>,
) -> CmdResult {
    let baseline_path = match baselines {
        Some(p) => p.to_path_buf(),
        None => datasets.with_file_name("baselines.json"),
    };
    if !baseline_path.exists() {
        return Err(Failure::new(
            EXIT_MISSING_BASELINE,
            anyhow!(
                "baseline file {} not found; normalized scores need the zero-shot and codebook baselines",
                baseline_path.display()
            ),
        ));
    }
    let baselines: (BaselinePair, BaselinePair) = read_json(&baseline_path)?;
    let ds: TopicDatasets = read_json(datasets)?;
    let (model, manifest) = checkpoint::load_file(ckpt)?;
    let (t, r) = build_report(
        &model,
        &pairs_of(&ds.d_t_prime),
        &pairs_of(&ds.d_r),
        (&baselines.0, &baselines.1),
    )?;
    let deleted = manifest.deleted.len();
    let sprime = manifest.metrics.get("sprime").map_or(0, |&s| s as usize);
    let rows: Vec<ReportRow> = [&t, &r]
        .into_iter()
        .map(|report| ReportRow {
            topic: &ds.topic_name,
            sprime,
            deleted_count: deleted,
            report,
        })
        .collect();
    match output {
        Some(p) => {
            let mut w = create(p)?;
            write_report_csv(&mut w, &rows)?;
            w.flush()?;
        }
        None => write_report_csv(io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn cmd_report(out: &Path) -> CmdResult {
    let root = out.join("unlearn");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .with_context(|| format!("reading {}; run `unlearn` first", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.csv").exists())
        .collect();
    dirs.sort();
    let mut header: Option<csv::StringRecord> = None;
    let mut records = Vec::new();
    for d in &dirs {
        let mut rdr = csv::Reader::from_path(d.join("report.csv"))?;
        let h = rdr.headers()?.clone();
        if header.as_ref().is_some_and(|old| *old != h) {
            return Err(anyhow!("{} has a different header", d.display()).into());
        }
        header = Some(h);
        for rec in rdr.records() {
            records.push(rec?);
        }
    }
    let header = header.ok_or_else(|| anyhow!("no topic reports under {}", root.display()))?;
    let mut w = csv::Writer::from_path(out.join("report.csv"))?;
    w.write_record(&header)?;
    for r in &records {
        w.write_record(r)?;
    }
    w.flush()?;

    let col = |name: &str| header.iter().position(|h| h == name).expect("known column");
    let (topic, dataset, sprime, deleted, metric, nid) = (
        col("topic"),
        col("dataset"),
        col("sprime"),
        col("deleted_count"),
        col("metric"),
        col("nid_percent"),
    );
    let stdout = io::stdout();
    let mut o = stdout.lock();
    writeln!(
        o,
        "{:<14} {:>6} {:>8} {:<10} {:<15} {:>10}",
        "topic", "S'", "deleted", "dataset", "metric", "NID %"
    )?;
    for r in &records {
        writeln!(
            o,
            "{:<14} {:>6} {:>8} {:<10} {:<15} {:>10}",
            &r[topic], &r[sprime], &r[deleted], &r[dataset], &r[metric], &r[nid]
        )?;
    }
    Ok(())
}
