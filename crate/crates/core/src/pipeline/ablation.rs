use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{write_json, DirLock, ExperimentConfig, PipelineError, Seeds, Stage, Workspace, CONFIG_FILE};
use crate::evaluation::evaluate;
use crate::model::{build_model, ModalityConfig};
use crate::training::{split_samples, train_on_split, Sample, TrainError};

pub const ABLATION_FORMAT: &str = "adas-mtl-ablation/1";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Header of the comparison table.
pub const ABLATION_COLUMNS: [&str; 6] = ["Feature Extraction", "Regression Module", "Input data", "MAE", "RMSE", "r"];

/// Every task head is one affine map of the shared representation.
const REGRESSION_MODULE: &str = "Linear Layer";

/// One variant's validation metrics on the global score, or its error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub modality: ModalityConfig,
    pub feature_extraction: String,
    pub regression_module: String,
    pub input_data: String,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub r: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: Seeds,
    /// Hash of the one split shared by every variant.
    pub split_hash: String,
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }
}

struct VariantResult {
    mae: f64,
    rmse: f64,
    r: Option<f64>,
    best_epoch: usize,
}

fn run_variant(
    config: &ExperimentConfig,
    modality: ModalityConfig,
    train: &[Sample],
    val: &[Sample],
) -> Result<VariantResult, PipelineError> {
    let variant = ExperimentConfig {
        modality,
        ..config.clone()
    }
    .resolve()?;
    let mut model = build_model(&variant.model_config())?;
    let history = train_on_split(&mut model, train, val, &variant.train)?;
    let report = evaluate(&model, val)?;
    let g = report.global();
    Ok(VariantResult {
        mae: g.mae,
        rmse: g.rmse,
        r: g.pearson_r,
        best_epoch: history.best_epoch,
    })
}

/// Trains one model per modality variant on a single shared cohort and split
/// and tabulates global-score validation metrics. A failing variant becomes a
/// row with `error` set; the other rows are unaffected. Writes
/// `ablation.json` and `ablation.csv` into the output directory.
pub fn run_ablation(config: &ExperimentConfig, variants: &[ModalityConfig]) -> Result<AblationReport, PipelineError> {
    if variants.is_empty() {
        return Err(PipelineError::Config("at least one ablation variant is required".into()));
    }
    for v in variants {
        v.validate()?;
    }
    let config = config.clone().resolve()?;
    let _lock = DirLock::acquire(&config.output_dir)?;
    write_json(&config.output_dir.join(CONFIG_FILE), &config)?;
    let needs_mri = variants.iter().any(|v| v.use_mri);
    let mut ws = Workspace::new(&config, needs_mri)?;
    ws.ensure(Stage::Synth)?;
    ws.ensure(Stage::Preprocess)?;

    let samples = ws.samples()?;
    let split = split_samples(samples, config.train.split_ratio, config.train.seed).map_err(TrainError::from)?;
    let pick = |ids: &[String]| -> Vec<Sample> {
        samples
            .iter()
            .filter(|s| ids.binary_search(&s.subject_id).is_ok())
            .cloned()
            .collect()
    };
    let (train, val) = (pick(&split.train_ids), pick(&split.val_ids));

    let rows = variants
        .iter()
        .map(|&modality| {
            let label = ExperimentConfig {
                modality,
                ..config.clone()
            }
            .model_config()
            .effective_backbone()
            .display_name();
            let result = run_variant(&config, modality, &train, &val);
            if let Err(e) = &result {
                log::error!("ablation variant `{}` failed: {e}", modality.input_label());
            }
            let ok = result.as_ref().ok();
            AblationRow {
                modality,
                feature_extraction: label.into(),
                regression_module: REGRESSION_MODULE.into(),
                input_data: modality.input_label().into(),
                mae: ok.map(|v| v.mae),
                rmse: ok.map(|v| v.rmse),
                r: ok.and_then(|v| v.r),
                best_epoch: ok.map(|v| v.best_epoch),
                error: result.err().map(|e| e.to_string()),
            }
        })
        .collect();

    let report = AblationReport {
        format: ABLATION_FORMAT.into(),
        config_hash: config.hash(),
        seeds: config.seeds(),
        split_hash: split.hash(),
        train_subjects: train.len(),
        val_subjects: val.len(),
        config: config.clone(),
        rows,
    };
    write_json(&config.output_dir.join(ABLATION_JSON), &report)?;
    let path = config.output_dir.join(ABLATION_CSV);
    let file = std::fs::File::create(&path).map_err(|e| PipelineError::io(&path, e))?;
    write_ablation_csv(file, &report)?;
    Ok(report)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".into(), |x| format!("{x:.4}"))
}

/// The comparison table with [`ABLATION_COLUMNS`]; missing values are `N/A`.
pub fn write_ablation_csv<W: Write>(writer: W, report: &AblationReport) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ABLATION_COLUMNS)?;
    for row in &report.rows {
        w.write_record([
            row.feature_extraction.clone(),
            row.regression_module.clone(),
            row.input_data.clone(),
            cell(row.mae),
            cell(row.rmse),
            cell(row.r),
        ])?;
    }
    w.flush()?;
    Ok(())
}
