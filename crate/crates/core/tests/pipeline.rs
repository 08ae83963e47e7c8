mod common;

use std::fs;

use adas_mtl::clinical::write_clinical_csv;
use adas_mtl::model::{BackboneConfig, ModalityConfig};
use adas_mtl::pipeline::{
    read_report, run_ablation, run_pipeline, DataSource, ExperimentConfig, Manifest, PipelineError, Stage,
    StageStatus, ABLATION_COLUMNS, LOCK_FILE, MANIFEST_FILE, REPORT_FILE,
};
use adas_mtl::synth::{generate_cohort, CohortSpec};
use adas_mtl::training::split_subjects;
use adas_mtl::util::sha256_file;
use common::small_config;

fn manifest_bytes(cfg: &ExperimentConfig) -> Vec<u8> {
    fs::read(cfg.output_dir.join(MANIFEST_FILE)).unwrap()
}

#[test]
fn end_to_end_run_lists_every_artifact_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), ModalityConfig::combined());
    let outcome = run_pipeline(&cfg).unwrap();
    assert_eq!(outcome.executed, Stage::ALL.to_vec());

    let m = &outcome.manifest;
    for f in [
        "config.json",
        "model.safetensors",
        "history.json",
        "split.json",
        "evaluation.json",
        "predictions.csv",
        "attributions.json",
        "importance.csv",
        "report.json",
        "data/clinical.csv",
    ] {
        assert!(m.file(f).is_some(), "manifest lacks {f}");
    }
    assert!(m.files.iter().any(|f| f.path.starts_with("preprocessed/")));
    assert!(m.file(MANIFEST_FILE).is_none() && m.file(LOCK_FILE).is_none());
    for f in &m.files {
        assert_eq!(sha256_file(&dir.path().join(&f.path)).unwrap(), f.sha256, "{}", f.path);
    }
    assert!(m.stages.iter().all(|s| s.status == StageStatus::Completed));
    assert!(!dir.path().join(LOCK_FILE).exists());

    let on_disk: Manifest = serde_json::from_slice(&manifest_bytes(&cfg)).unwrap();
    assert_eq!(&on_disk, m);
}

#[test]
fn rerun_skips_everything_and_reproduces_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), ModalityConfig::combined());
    run_pipeline(&cfg).unwrap();
    let first = manifest_bytes(&cfg);
    let again = run_pipeline(&cfg).unwrap();
    assert!(again.executed.is_empty(), "{:?}", again.executed);
    assert_eq!(again.skipped, Stage::ALL.to_vec());
    assert_eq!(manifest_bytes(&cfg), first);
}

#[test]
fn deleted_outputs_rerun_only_their_stage_and_dependents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), ModalityConfig::clinical_only());
    run_pipeline(&cfg).unwrap();
    let first = manifest_bytes(&cfg);

    fs::remove_file(dir.path().join(REPORT_FILE)).unwrap();
    let o = run_pipeline(&cfg).unwrap();
    assert_eq!(o.executed, vec![Stage::Report]);
    assert_eq!(manifest_bytes(&cfg), first);

    fs::remove_file(dir.path().join("evaluation.json")).unwrap();
    let o = run_pipeline(&cfg).unwrap();
    assert_eq!(o.executed, vec![Stage::Evaluate, Stage::Report]);
    assert_eq!(manifest_bytes(&cfg), first);
}

#[test]
fn config_changes_invalidate_the_affected_subtree() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), ModalityConfig::clinical_only());
    run_pipeline(&cfg).unwrap();

    cfg.attribution.num_permutations += 1;
    let o = run_pipeline(&cfg).unwrap();
    assert_eq!(o.executed, vec![Stage::Explain, Stage::Report]);

    cfg.train.alpha = 0.25;
    let o = run_pipeline(&cfg).unwrap();
    assert_eq!(o.executed, vec![Stage::Train, Stage::Evaluate, Stage::Explain, Stage::Report]);
    assert_eq!(o.skipped, vec![Stage::Synth]);
    assert_eq!(o.not_applicable, vec![Stage::Preprocess]);
}

#[test]
fn report_embeds_resolved_config_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), ModalityConfig::clinical_only());
    run_pipeline(&cfg).unwrap();
    let report = read_report(dir.path()).unwrap();
    let resolved = cfg.clone().resolve().unwrap();
    assert_eq!(report.config, resolved);
    assert_eq!(report.config_hash, resolved.hash());
    assert_eq!(report.seeds.global, 7);
    assert_eq!(report.seeds.cohort, Some(7));
    assert_eq!(report.seeds.split_and_shuffle, 7);
    assert_eq!(report.metrics.len(), 14);
    assert_eq!(report.feature_extraction, "N/A");
    let written: ExperimentConfig =
        serde_json::from_slice(&fs::read(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(written, resolved);
}

#[test]
fn held_lock_refuses_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), ModalityConfig::clinical_only());
    fs::write(dir.path().join(LOCK_FILE), "1").unwrap();
    assert!(matches!(run_pipeline(&cfg), Err(PipelineError::Locked(_))));
}

fn write_csv_fixture(dir: &std::path::Path) -> std::path::PathBuf {
    let cohort = generate_cohort(&CohortSpec::default().scaled(0.1)).unwrap();
    let path = dir.join("clinical.csv");
    write_clinical_csv(fs::File::create(&path).unwrap(), &cohort).unwrap();
    path
}

#[test]
fn file_source_runs_without_the_synth_stage() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = small_config(out.path(), ModalityConfig::clinical_only());
    cfg.data = DataSource::Files {
        clinical_csv: write_csv_fixture(data.path()),
        volumes_dir: None,
        reference_volume: None,
    };
    let o = run_pipeline(&cfg).unwrap();
    assert_eq!(o.not_applicable, vec![Stage::Synth, Stage::Preprocess]);
    assert_eq!(o.manifest.status(Stage::Synth), Some(StageStatus::NotApplicable));
    assert!(o.manifest.file("report.json").is_some());
}

#[test]
fn failing_stage_marks_the_manifest_and_stops() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let empty_volumes = data.path().join("volumes");
    fs::create_dir(&empty_volumes).unwrap();
    let mut cfg = small_config(out.path(), ModalityConfig::combined());
    cfg.data = DataSource::Files {
        clinical_csv: write_csv_fixture(data.path()),
        volumes_dir: Some(empty_volumes),
        reference_volume: None,
    };
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Stage { stage: Stage::Preprocess, .. }), "{err}");
    let m: Manifest = serde_json::from_slice(&manifest_bytes(&cfg)).unwrap();
    let statuses: Vec<StageStatus> = m.stages.iter().map(|s| s.status).collect();
    assert_eq!(
        statuses,
        [
            StageStatus::NotApplicable,
            StageStatus::Failed,
            StageStatus::NotRun,
            StageStatus::NotRun,
            StageStatus::NotRun,
            StageStatus::NotRun,
        ]
    );
    assert!(!out.path().join(LOCK_FILE).exists());
}

#[test]
fn single_variant_ablation_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), ModalityConfig::clinical_only());
    let report = run_ablation(&cfg, &[ModalityConfig::clinical_only()]).unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    assert_eq!(row.feature_extraction, "N/A");
    assert_eq!(row.regression_module, "Linear Layer");
    assert_eq!(row.input_data, "ADAS-Cog clinical scores");
    assert!(row.error.is_none() && row.mae.is_some() && row.rmse.is_some());
    assert!(run_ablation(&cfg, &[]).is_err());
}

#[test]
fn ablation_variants_share_one_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), ModalityConfig::combined());
    let variants = [ModalityConfig::clinical_only(), ModalityConfig::mri_only(), ModalityConfig::combined()];
    let report = run_ablation(&cfg, &variants).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.failed(), 0);
    assert_eq!(
        report.rows.iter().map(|r| r.feature_extraction.as_str()).collect::<Vec<_>>(),
        ["N/A", "ViT", "ViT"]
    );

    // the recorded hash is the split of the eligible cohort under the global seed
    let cohort = generate_cohort(&CohortSpec {
        seed: 7,
        ..CohortSpec::default().scaled(0.1)
    })
    .unwrap();
    let labels: Vec<(String, _)> = cohort.iter().map(|s| (s.subject_id.clone(), s.diagnosis)).collect();
    let expected = split_subjects(&labels, cfg.train.split_ratio, 7).unwrap();
    assert_eq!(report.split_hash, expected.hash());

    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header, ABLATION_COLUMNS);
    for col in ["Feature Extraction", "Input data", "MAE", "RMSE", "r"] {
        assert!(header.contains(&col));
    }
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn failing_variant_leaves_a_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), ModalityConfig::clinical_only());
    cfg.backbone = BackboneConfig {
        input_shape: cfg.backbone.input_shape,
        ..BackboneConfig::none()
    };
    let report = run_ablation(&cfg, &[ModalityConfig::clinical_only(), ModalityConfig::mri_only()]).unwrap();
    assert!(report.rows[0].error.is_none());
    let bad = &report.rows[1];
    assert!(bad.error.as_deref().unwrap().contains("backbone"), "{bad:?}");
    assert!(bad.mae.is_none());
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert!(csv.lines().nth(2).unwrap().ends_with("N/A,N/A,N/A"));
}
