mod common;

use common::*;
use unlearnlab::model::{BottleneckMode, EncodeOptions};
use unlearnlab::training::{greedy_accuracy, train, TrainConfig};
use unlearnlab::{checkpoint, Error, Seq2Seq};

fn copy_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        batch_size: 4,
        lr: 1e-3,
        grad_clip: Some(1.0),
        ..Default::default()
    }
}

#[test]
fn copy_task_is_learned() {
    let train_set = copy_pairs(1, 200, 20);
    let val = copy_pairs(2, 50, 20);
    let model = Seq2Seq::new(copy_config(), 3).unwrap();
    let out = train(model, &train_set, &val, &copy_train_config(30, 3)).unwrap();
    let acc = greedy_accuracy(&out.best, &val, &EncodeOptions::default()).unwrap();
    assert!(acc >= 0.95, "copy accuracy {acc}");
    assert_eq!(
        out.best.greedy_decode(&[5, 9, 3], 7).unwrap(),
        vec![5, 9, 3]
    );
    let best = out.log.records[out.best_epoch.unwrap() - 1].val_acc;
    assert_eq!(best, acc);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let model = Seq2Seq::new(copy_config(), 4).unwrap();
    let out = train(
        model.clone(),
        &copy_pairs(1, 20, 20),
        &[],
        &copy_train_config(0, 4),
    )
    .unwrap();
    assert_eq!(out.best, model);
    assert!(out.log.records.is_empty());
    assert_eq!(out.best_epoch, None);
}

#[test]
fn same_seed_gives_bitwise_identical_runs() {
    let data = copy_pairs(5, 60, 20);
    let val = copy_pairs(6, 10, 20);
    let run = || {
        let model = Seq2Seq::new(copy_config(), 7).unwrap();
        train(model, &data, &val, &copy_train_config(3, 7)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.best, b.best);
    let bits = |o: &unlearnlab::training::TrainOutcome| -> Vec<u64> {
        o.log.records.iter().map(|r| r.l_joint.to_bits()).collect()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn joint_loss_falls_over_early_epochs() {
    let data = copy_pairs(8, 200, 20);
    let model = Seq2Seq::new(copy_config(), 9).unwrap();
    let out = train(model, &data, &[], &copy_train_config(5, 9)).unwrap();
    let losses: Vec<f64> = out.log.records.iter().map(|r| r.l_joint).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn stronger_sparsity_pressure_shrinks_selected_codes() {
    let data = copy_pairs(10, 120, 20);
    let mean_abs = |lambda: f64| {
        let model = Seq2Seq::new(copy_config(), 11).unwrap();
        let cfg = TrainConfig {
            lambda_l1: lambda,
            ..copy_train_config(4, 11)
        };
        let out = train(model, &data, &[], &cfg).unwrap();
        let m = &out.best;
        // frequently selected: the codes picked anywhere in the training data
        let sources: Vec<Vec<usize>> = data.iter().map(|p| p.source.clone()).collect();
        let batch = unlearnlab::SequenceBatch::sources_only(&sources).unwrap();
        let h = m.bottleneck_queries(&batch).unwrap();
        let mask = batch.source_mask();
        let mut used = vec![0usize; m.codebook.num_codes()];
        for (sel, live) in m
            .codebook
            .select_rows(&h, m.codebook.top_s())
            .unwrap()
            .iter()
            .zip(&mask)
        {
            if *live {
                sel.0.iter().for_each(|&k| used[k] += 1);
            }
        }
        let hot: Vec<usize> = (0..used.len()).filter(|&k| used[k] >= 10).collect();
        assert!(!hot.is_empty());
        let total: f64 = hot
            .iter()
            .flat_map(|&k| m.codebook.code(k))
            .map(|v| v.abs())
            .sum();
        total / (hot.len() * m.codebook.dim()) as f64
    };
    let loose = mean_abs(0.0);
    let tight = mean_abs(1e-3);
    assert!(
        tight < loose,
        "lambda 1e-3 gave {tight}, lambda 0 gave {loose}"
    );
}

#[test]
fn divergence_reports_the_last_good_epoch() {
    let data = copy_pairs(12, 30, 20);
    let mut model = Seq2Seq::new(copy_config(), 13).unwrap();
    model.weights.out.bias.data_mut()[0] = f64::NAN;
    let err = train(model, &data, &[], &copy_train_config(2, 13))
        .err()
        .unwrap();
    assert!(
        matches!(
            err,
            Error::Divergence {
                epoch: 1,
                last_good: None
            }
        ),
        "{err}"
    );
}

#[test]
fn bypass_changes_a_trained_model_but_not_an_untouched_stream() {
    let data = copy_pairs(14, 200, 20);
    let model = Seq2Seq::new(copy_config(), 15).unwrap();
    let out = train(model, &data, &data[..40], &copy_train_config(10, 15)).unwrap();
    let bypass = EncodeOptions {
        mode: BottleneckMode::Bypass,
        ..Default::default()
    };
    // bypassed output ignores the codebook entirely
    let mut scrambled = out.best.clone();
    scrambled
        .codebook
        .codes_mut()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = -*v);
    let batch = unlearnlab::SequenceBatch::sources_only(&[vec![4, 5, 6]]).unwrap();
    assert_eq!(
        out.best.encode(&batch, &bypass).unwrap(),
        scrambled.encode(&batch, &bypass).unwrap()
    );
    assert_ne!(
        out.best.encode(&batch, &EncodeOptions::default()).unwrap(),
        scrambled.encode(&batch, &EncodeOptions::default()).unwrap()
    );
}

#[test]
fn saved_snapshot_reproduces_its_validation_score() {
    let data = copy_pairs(16, 80, 20);
    let val = copy_pairs(17, 20, 20);
    let model = Seq2Seq::new(copy_config(), 18).unwrap();
    let out = train(model, &data, &val, &copy_train_config(3, 18)).unwrap();
    let mut buf = Vec::new();
    checkpoint::save(&out.best, &Default::default(), &mut buf).unwrap();
    let (back, _) = checkpoint::load(buf.as_slice()).unwrap();
    let recorded = out.log.records[out.best_epoch.unwrap() - 1].val_acc;
    assert_eq!(
        greedy_accuracy(&back, &val, &EncodeOptions::default()).unwrap(),
        recorded
    );
}
