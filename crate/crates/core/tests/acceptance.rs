//! Acceptance criteria 1 to 10. Each test prints one PASS/FAIL line and
//! fails when its criterion is not met. Criteria 4 to 7 share three trained
//! acceptance-scale models (seeds 1, 2, 3), built once.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use unlearnlab::bottleneck::select_top_s;
use unlearnlab::checkpoint::{load, save};
use unlearnlab::corpus::{
    build_topic_datasets, generate_corpus, select_topic_words, ToyLanguageSpec,
};
use unlearnlab::evaluation::{bleu, meteor_lite, EvalReport, Metric};
use unlearnlab::model::{BottleneckMode, CodebookConfig, EncodeOptions};
use unlearnlab::training::{greedy_accuracy, train, TrainConfig};
use unlearnlab::unlearning::{
    chi2_sf, enrichment_ratio, measure_baselines, sprime_sweep, trace_activations, unlearn_topic,
    write_traces, TraceTag, UnlearnConfig,
};
use unlearnlab::{ModelConfig, Seq2Seq, SequenceBatch};

const SEEDS: [u64; 3] = [1, 2, 3];
const SENTENCES: usize = 8000;
const EPOCHS: usize = 30;
const TOPICS_PER_SEED: usize = 3;
const SPRIME_MULTIPLES: [usize; 7] = [1, 3, 5, 7, 9, 11, 13];

fn verdict(n: u32, title: &str, pass: bool, detail: &str) {
    let mark = if pass { "PASS" } else { "FAIL" };
    // written past the test harness capture so the line is always visible
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2} [{mark}] {title}: {detail}"
    );
    assert!(pass, "criterion {n} ({title}) failed: {detail}");
}

fn note(line: &str) {
    let _ = writeln!(std::io::stderr(), "    {line}");
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let mut instances = 0;
    let mut worst = (0.0f64, String::new());
    let mut record = |name: String, e: f64| {
        instances += 1;
        if e.is_nan() || e > worst.0 {
            worst = (e, name);
        }
    };
    for (name, case) in op_cases() {
        for seed in 0..10 {
            record(format!("{name} #{seed}"), case(seed));
        }
    }
    let cfg = micro_config();
    let select = downstream_of_selection(&cfg);
    let mut skipped = 0;
    for seed in 0..3 {
        let model = Seq2Seq::new(cfg.clone(), seed).unwrap();
        let mut r = rng(seed + 1000);
        let src = random_sequences(&mut r, 3, cfg.vocab_size, 1, 5);
        let tgt = random_sequences(&mut r, 3, cfg.vocab_size, 1, 5);
        let batch = SequenceBatch::new(&src, &tgt).unwrap();
        let (errs, _) = check_model(
            &model,
            &batch,
            BottleneckMode::Bypass,
            0.0,
            &|_| true,
            4,
            seed,
        );
        for (n, e) in errs {
            record(format!("model bypass {n}"), e);
        }
        let (errs, s) = check_model(
            &model,
            &batch,
            BottleneckMode::Active,
            0.01,
            &select,
            4,
            seed,
        );
        skipped += s;
        for (n, e) in errs {
            record(format!("model active {n}"), e);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.0 <= 1e-4 && instances >= 100 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{instances} instances, worst relative error {:.2e} ({}), {skipped} selection-flipping probes skipped, {:.1}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_selection_oracle() {
    let start = Instant::now();
    let mismatches = (0..1000)
        .filter(|&seed| {
            let (h, cb, s) = selection_instance(seed);
            select_top_s(&h, &cb, s).unwrap().omega != oracle_top(&h, &cb, s)
        })
        .count();
    let elapsed = start.elapsed();
    verdict(
        2,
        "selection oracle",
        mismatches == 0 && elapsed < Duration::from_secs(10),
        &format!(
            "1000 instances (half with ties), {mismatches} mismatches, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_statistics_oracle() {
    let mut worst = 0.0f64;
    for x in [0.0, 0.5, 1.0, 3.841, 10.0, 30.0] {
        worst = worst.max((chi2_sf(x) - chi2_tail_by_integration(x)).abs());
    }
    let ratios = [
        (enrichment_ratio(0.5, 0.25, 1e-9), 1.0),
        (enrichment_ratio(0.3, 0.3, 1e-9), 0.0),
        (enrichment_ratio(0.25, 0.5, 1e-9), -1.0),
        (enrichment_ratio(0.0, 0.0, 1e-9), 0.0),
    ];
    let ratio_err = ratios
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    verdict(
        3,
        "statistics oracle",
        worst <= 1e-6 && ratio_err <= 1e-8,
        &format!(
            "max |p - integral| {worst:.2e} over 6 points, enrichment max error {ratio_err:.1e}"
        ),
    );
}

struct TopicRun {
    name: String,
    deleted: Vec<usize>,
    num_codes: usize,
    /// NID at the widest point: (topic BLEU, topic accuracy, rest BLEU, rest accuracy).
    last: [f64; 4],
    null_deleted: usize,
    null_max_nid: f64,
}

struct SeedRun {
    seed: u64,
    train_secs: f64,
    sweep_secs: f64,
    first_losses: Vec<f64>,
    test_acc: f64,
    bypass_acc: f64,
    topics: Vec<TopicRun>,
}

fn nid(r: &EvalReport, m: Metric) -> f64 {
    r.nid(m).unwrap_or(f64::NAN)
}

fn run_seed(seed: u64) -> SeedRun {
    let spec = ToyLanguageSpec {
        seed,
        ..Default::default()
    };
    let corpus = generate_corpus(&spec, SENTENCES).unwrap();
    let config = ModelConfig {
        vocab_size: corpus.vocab.len(),
        ..Default::default()
    };
    let init = Seq2Seq::new(config.clone(), seed).unwrap();
    let tc = TrainConfig {
        epochs: EPOCHS,
        seed,
        ..Default::default()
    };
    let start = Instant::now();
    let outcome = train(
        init.clone(),
        &corpus.train_pairs(),
        &corpus.val_pairs(),
        &tc,
    )
    .unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let model = outcome.best;
    let test = corpus.test_pairs();
    let test_acc = greedy_accuracy(&model, &test, &EncodeOptions::default()).unwrap();
    let bypass = EncodeOptions {
        mode: BottleneckMode::Bypass,
        ..Default::default()
    };
    let bypass_acc = greedy_accuracy(&model, &test, &bypass).unwrap();

    let start = Instant::now();
    let n = corpus.split.train.len() as f64;
    let band = ((0.04 * n).ceil() as usize, (0.08 * n).floor() as usize);
    let s = config.codebook.top_s;
    let sprimes: Vec<usize> = SPRIME_MULTIPLES.iter().map(|m| m * s).collect();
    let cfg = UnlearnConfig::default();
    let mut topics = Vec::new();
    for topic in select_topic_words(&corpus, band.0, band.1)
        .into_iter()
        .take(TOPICS_PER_SEED)
    {
        let ds = build_topic_datasets(&corpus, topic, cfg.n_retrieval, seed).unwrap();
        let baselines = measure_baselines(&init, &model, &ds).unwrap();
        let points = sprime_sweep(&model, &ds, &sprimes, &cfg, &baselines).unwrap();
        let widest = points.last().unwrap();
        let last = [
            nid(&widest.topic_eval, Metric::Bleu),
            nid(&widest.topic_eval, Metric::TokenAccuracy),
            nid(&widest.rest_eval, Metric::Bleu),
            nid(&widest.rest_eval, Metric::TokenAccuracy),
        ];
        let null_ds = ds.clone().without_replacement();
        let null_points = sprime_sweep(
            &model,
            &null_ds,
            &[sprimes[0], sprimes[6]],
            &cfg,
            &baselines,
        )
        .unwrap();
        let mut null_max_nid = 0.0f64;
        for p in &null_points {
            for r in [&p.topic_eval, &p.rest_eval] {
                for m in Metric::ALL {
                    if let Some(v) = r.nid(m) {
                        null_max_nid = null_max_nid.max(v.abs());
                    }
                }
            }
        }
        topics.push(TopicRun {
            name: ds.topic_name.clone(),
            deleted: points.iter().map(|p| p.deleted_count).collect(),
            num_codes: config.codebook.num_codes,
            last,
            null_deleted: null_points.iter().map(|p| p.deleted_count).sum(),
            null_max_nid,
        });
    }
    SeedRun {
        seed,
        train_secs,
        sweep_secs: start.elapsed().as_secs_f64(),
        first_losses: outcome
            .log
            .records
            .iter()
            .take(5)
            .map(|r| r.l_joint)
            .collect(),
        test_acc,
        bypass_acc,
        topics,
    }
}

fn runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let run = run_seed(seed);
                note(&format!(
                    "seed {}: trained {EPOCHS} epochs in {:.0}s, sweeps {:.0}s, test acc {:.4}, bypass {:.4}",
                    run.seed, run.train_secs, run.sweep_secs, run.test_acc, run.bypass_acc
                ));
                for t in &run.topics {
                    note(&format!(
                        "  {:<8} deleted {:?}  NID at widest: T bleu {:.1} acc {:.1} | R bleu {:.1} acc {:.1}",
                        t.name, t.deleted, t.last[0], t.last[1], t.last[2], t.last[3]
                    ));
                }
                run
            })
            .collect()
    })
}

#[test]
fn criterion_04_training_viability() {
    let runs = runs();
    let min_acc = runs
        .iter()
        .map(|r| r.test_acc)
        .fold(f64::INFINITY, f64::min);
    let min_drop = runs
        .iter()
        .map(|r| 100.0 * (r.test_acc - r.bypass_acc))
        .fold(f64::INFINITY, f64::min);
    let max_train = runs.iter().map(|r| r.train_secs).fold(0.0, f64::max);
    let falling = runs
        .iter()
        .all(|r| r.first_losses.len() == 5 && r.first_losses[4] < r.first_losses[0]);
    let drops: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.1}", 100.0 * (r.test_acc - r.bypass_acc)))
        .collect();
    verdict(
        4,
        "training viability",
        min_acc >= 0.90 && min_drop >= 10.0 && max_train < 1800.0 && falling,
        &format!(
            "min held-out accuracy {:.1}% (need >= 90), bypass drop per seed {} points (need >= 10), \
             slowest training {max_train:.0}s, joint loss falls over first 5 epochs: {falling}",
            100.0 * min_acc,
            drops.join("/")
        ),
    );
}

#[test]
fn criterion_05_unlearning_asymmetry() {
    let runs = runs();
    let total: f64 = runs.iter().map(|r| r.train_secs + r.sweep_secs).sum();
    let mut pass = total < 3600.0;
    let mut parts = Vec::new();
    for rank in 0..TOPICS_PER_SEED {
        let mut mean = [0.0; 4];
        let mut names = Vec::new();
        for r in runs {
            match r.topics.get(rank) {
                Some(t) => {
                    names.push(t.name.as_str());
                    for (m, v) in mean.iter_mut().zip(t.last) {
                        *m += v / runs.len() as f64;
                    }
                }
                None => mean = [f64::NAN; 4],
            }
        }
        let [tb, ta, rb, ra] = mean;
        let ok_a = tb <= -50.0 && ta <= -50.0;
        let ok_b = tb.abs() >= 1.5 * rb.abs() && ta.abs() >= 1.5 * ra.abs();
        pass &= ok_a && ok_b;
        parts.push(format!(
            "topic #{} ({}): D_T' bleu {tb:.1} acc {ta:.1}, D_R bleu {rb:.1} acc {ra:.1}, (a) {} (b) {}",
            rank + 1,
            names.join("/"),
            if ok_a { "ok" } else { "miss" },
            if ok_b { "ok" } else { "miss" },
        ));
    }
    verdict(
        5,
        "unlearning asymmetry",
        pass,
        &format!(
            "seed-averaged NID % at S' = 13S; (a) D_T' <= -50, (b) |D_T'| >= 1.5 |D_R|; {}; total {total:.0}s",
            parts.join("; ")
        ),
    );
}

#[test]
fn criterion_06_sweep_monotonicity() {
    let runs = runs();
    let mut monotone = true;
    let mut worst = 0.0f64;
    let mut counts = Vec::new();
    for r in runs {
        for t in &r.topics {
            monotone &= t.deleted.windows(2).all(|w| w[0] <= w[1]);
            let max = *t.deleted.iter().max().unwrap();
            worst = worst.max(max as f64 / t.num_codes as f64);
            counts.push(format!("{}:{}={:?}", r.seed, t.name, t.deleted));
        }
    }
    verdict(
        6,
        "sweep monotonicity",
        monotone && worst < 0.05,
        &format!(
            "non-decreasing in every sweep: {monotone}; largest deleted fraction {:.1}% of K (need < 5); {}",
            100.0 * worst,
            counts.join(" ")
        ),
    );
}

#[test]
fn criterion_07_null_experiment() {
    let runs = runs();
    let deleted: usize = runs
        .iter()
        .flat_map(|r| &r.topics)
        .map(|t| t.null_deleted)
        .sum();
    let max_nid = runs
        .iter()
        .flat_map(|r| &r.topics)
        .map(|t| t.null_max_nid)
        .fold(0.0, f64::max);
    let n = runs.iter().map(|r| r.topics.len()).sum::<usize>();
    verdict(
        7,
        "null-experiment safety",
        deleted == 0 && max_nid < 2.0 && n > 0,
        &format!("{n} topics at S' = S and 13S: {deleted} codes deleted, max |NID| {max_nid:.3}%"),
    );
}

#[test]
fn criterion_08_constructed_fixture() {
    let (_, ds, mut model) = unlearning_fixture();
    wire_token_codes(&mut model);
    let pristine = model.clone();
    let cfg = UnlearnConfig {
        sprime: 2,
        ..Default::default()
    };
    let out = unlearn_topic(&mut model, &ds, &cfg).unwrap();
    let deleted = out.deletion.unwrap();
    let topic_code_everywhere = out
        .topic_traces
        .iter()
        .all(|t| t.positions.iter().any(|p| p.contains(&ds.topic)));
    let enriched = deleted.iter().all(|&k| {
        let c = &out.report.codes[k];
        c.r > 0.0 && c.p <= cfg.p_threshold
    });
    let before = decode_sources(&pristine, &ds.d_t_prime);
    let after = decode_sources(&model, &ds.d_t_prime);
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    let before = decode_sources(&pristine, &ds.d_r);
    let after = decode_sources(&model, &ds.d_r);
    let same = before.iter().zip(&after).filter(|(a, b)| a == b).count();
    let pass = deleted.contains(&ds.topic)
        && topic_code_everywhere
        && enriched
        && changed > 0
        && same * 100 >= 95 * before.len();
    verdict(
        8,
        "constructed-fixture detection",
        pass,
        &format!(
            "topic code {} deleted: {}, deletions {deleted:?} all enriched: {enriched}, \
             {changed}/{} topic decodes changed, {same}/{} rest decodes identical",
            ds.topic,
            deleted.contains(&ds.topic),
            ds.d_t_prime.len(),
            before.len()
        ),
    );
}

fn small_run(seed: u64) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let spec = ToyLanguageSpec {
        seed,
        ..Default::default()
    };
    let corpus = generate_corpus(&spec, 400).unwrap();
    let config = ModelConfig {
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
            num_codes: 32,
            code_dim: 32,
            top_s: 2,
            layer_norm: true,
        },
    };
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 32,
        seed,
        ..Default::default()
    };
    let out = train(
        Seq2Seq::new(config, seed).unwrap(),
        &corpus.train_pairs(),
        &corpus.val_pairs(),
        &tc,
    )
    .unwrap();
    let mut log = Vec::new();
    out.log.write_csv(&mut log).unwrap();
    let topic = select_topic_words(&corpus, 1, usize::MAX)[0];
    let ds = build_topic_datasets(&corpus, topic, 50, seed).unwrap();
    let mut traces = Vec::new();
    write_traces(
        &mut traces,
        &trace_activations(&out.best, &ds.d_t, 6, TraceTag::Topic).unwrap(),
    )
    .unwrap();
    let mut model = out.best;
    model.codebook.delete_codes(&[1, 7, 30]).unwrap();
    let mut ckpt = Vec::new();
    save(&model, &Default::default(), &mut ckpt).unwrap();
    (log, traces, ckpt)
}

#[test]
fn criterion_09_determinism_and_persistence() {
    let a = small_run(4);
    let b = small_run(4);
    let (model, manifest) = load(a.2.as_slice()).unwrap();
    let mut again = Vec::new();
    save(&model, &manifest.metrics, &mut again).unwrap();
    let mask_ok = manifest.deleted == vec![1, 7, 30] && model.codebook.is_deleted(7);
    let pass = a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && again == a.2 && mask_ok;
    verdict(
        9,
        "determinism and persistence",
        pass,
        &format!(
            "logs identical: {}, traces identical: {}, checkpoints identical: {}, \
             round trip byte-exact: {}, deletion mask restored: {mask_ok}",
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2,
            again == a.2
        ),
    );
}

#[test]
fn criterion_10_metric_oracles() {
    let w = |s: &str| -> Vec<usize> { s.bytes().filter(|b| *b != b' ').map(usize::from).collect() };
    let pinned = bleu(&[w("a b c d")], &[w("a b c e")], 4).unwrap();
    let bleu_ok = (pinned - 0.5946035575).abs() < 1e-9;
    let m4 = meteor_lite(&[4, 5, 6, 7], &[4, 5, 6, 7]);
    let meteor_ok = (m4 - 0.9921875).abs() < 1e-12 && meteor_lite(&[9], &[9]) == 0.5;
    let corpus = vec![w("a b c d e"), w("f g"), w("h")];
    let identical = bleu(&corpus, &corpus, 4).unwrap();
    verdict(
        10,
        "metric oracles",
        bleu_ok && meteor_ok && identical == 1.0,
        &format!("pinned BLEU {pinned:.10} (hand value 0.5946035575), METEOR-lite m=4 {m4}, identical-corpus BLEU {identical}"),
    );
}
