mod common;

use std::collections::BTreeSet;

use adas_mtl::clinical::Diagnosis;
use adas_mtl::loss::{total_loss, PredictionBatch};
use adas_mtl::model::{build_model, BackboneConfig, ModalityConfig, ModelConfig};
use adas_mtl::training::{predict, split_subjects, train, train_on_split, TrainConfig, TrainError};
use common::clinical_samples;

fn clinical_model(seed: u64) -> adas_mtl::model::MtlModel {
    build_model(&ModelConfig {
        backbone: BackboneConfig::none(),
        modality: ModalityConfig::clinical_only(),
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn clinical_train(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        modality: ModalityConfig::clinical_only(),
        ..Default::default()
    }
}

#[test]
fn five_subjects_are_memorized() {
    let samples: Vec<_> = clinical_samples(0.05, 11).into_iter().take(5).collect();
    assert_eq!(samples.len(), 5);
    let mut model = clinical_model(1);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        ..clinical_train(200)
    };
    let history = train_on_split(&mut model, &samples, &[], &cfg).unwrap();
    assert_eq!(history.epochs.len(), 200);

    let preds = predict(&model, &samples).unwrap();
    let truth: Vec<_> = samples.iter().map(|s| s.targets.0).collect();
    let loss = total_loss(&PredictionBatch::from_rows(&preds, &truth).unwrap(), &cfg.loss_config()).unwrap();
    assert!(loss < 0.1, "final train loss {loss}");
    assert!(history.epochs.last().unwrap().train_total_loss < 0.1);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let samples = clinical_samples(0.1, 2);
    let mut model = clinical_model(2);
    let before = model.snapshot().unwrap();
    let (history, _) = train(
        &mut model,
        &samples,
        &TrainConfig {
            learning_rate: 0.0,
            early_stop_patience: 100,
            ..clinical_train(4)
        },
    )
    .unwrap();
    for (name, t) in model.snapshot().unwrap() {
        let same = (&t - &before[&name]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(same, 0.0, "{name}");
    }
    let first = &history.epochs[0];
    for e in &history.epochs {
        assert_eq!(e.val_total_loss, first.val_total_loss);
        assert_eq!(e.val_mae_global, first.val_mae_global);
        assert!((e.train_total_loss - first.train_total_loss).abs() <= 1e-6 * first.train_total_loss);
    }
}

#[test]
fn loss_descends_over_the_first_epochs() {
    let samples = clinical_samples(1.0, 20240917);
    let mut model = clinical_model(20240917);
    let (history, _) = train(&mut model, &samples, &clinical_train(6)).unwrap();
    let losses: Vec<f64> = history.epochs.iter().map(|e| e.train_total_loss).collect();
    let descents = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(descents >= 4, "{losses:?}");
}

#[test]
fn identical_seeds_give_identical_histories() {
    let samples = clinical_samples(0.2, 5);
    let run = || {
        let mut model = clinical_model(5);
        train(&mut model, &samples, &clinical_train(5)).unwrap()
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn exploding_head_is_named() {
    let mut samples = clinical_samples(0.1, 3);
    for (i, s) in samples.iter_mut().enumerate() {
        s.targets.0[5] = 1e30 * (i + 1) as f64;
    }
    let mut model = clinical_model(3);
    match train_on_split(&mut model, &samples, &[], &clinical_train(2)) {
        Err(TrainError::NonFiniteLoss { epoch, batch, head }) => {
            assert_eq!((epoch, batch), (0, 0));
            assert_eq!(head, "Q5");
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn modality_mismatch_and_empty_training_set_are_config_errors() {
    let samples = clinical_samples(0.1, 3);
    let mut model = clinical_model(3);
    let combined = TrainConfig {
        modality: ModalityConfig::combined(),
        ..clinical_train(1)
    };
    assert!(matches!(train_on_split(&mut model, &samples, &[], &combined), Err(TrainError::Config(_))));
    assert!(matches!(train_on_split(&mut model, &[], &[], &clinical_train(1)), Err(TrainError::Config(_))));
}

#[test]
fn splits_never_leak_across_fifty_seeds() {
    let labels: Vec<(String, Diagnosis)> = clinical_samples(1.0, 9)
        .iter()
        .map(|s| (s.subject_id.clone(), s.diagnosis))
        .collect();
    let all: BTreeSet<&String> = labels.iter().map(|(id, _)| id).collect();
    let mut distinct = BTreeSet::new();
    for seed in 0..50 {
        let s = split_subjects(&labels, 0.8, seed).unwrap();
        let train: BTreeSet<&String> = s.train_ids.iter().collect();
        let val: BTreeSet<&String> = s.val_ids.iter().collect();
        assert!(train.is_disjoint(&val));
        assert_eq!(train.union(&val).copied().collect::<BTreeSet<_>>(), all);
        assert_eq!(split_subjects(&labels, 0.8, seed).unwrap(), s);
        distinct.insert(s.hash());
    }
    assert_eq!(distinct.len(), 50);
}
