//! Staged experiment runner: synth → preprocess → train → evaluate → explain → report.
//!
//! Each stage leaves a record in `stages/<name>.json` with its key and the
//! files it wrote. The key hashes the stage's config subtree together with the
//! keys of its upstream stages. A stage executes when its record is missing,
//! its key changed, one of its outputs is gone, or an upstream stage executed
//! in the same run; otherwise it is skipped.

mod ablation;
mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use ablation::{run_ablation, write_ablation_csv, AblationReport, AblationRow, ABLATION_COLUMNS};
pub use config::{DataSource, ExperimentConfig, Seeds, DEFAULT_SEED};

use crate::clinical::{eligible_subjects, parse_clinical_csv, write_clinical_csv, ClinicalError, SubjectRecord};
use crate::evaluation::{
    dominance_report, evaluate, write_predictions_csv, DominanceSummary, EvaluationReport, MetricError, OutputMetrics,
};
use crate::explain::{importance_summary, shapley_attribution, write_importance_csv, Attribution, ExplainError, ImportanceEntry};
use crate::imaging::{load_volume, preprocess_volume, save_volume_as, ImagingError, Volume, VoxelType};
use crate::model::{build_model, load_checkpoint, save_checkpoint, ModelError};
use crate::synth::{generate_cohort, template_volume, write_dataset, SynthError};
use crate::training::{train, Sample, SubjectSplit, TrainError, TrainHistory};
use crate::util::{config_hash, fnv1a, mix_seed, sha256_file};

pub const MANIFEST_FORMAT: &str = "adas-mtl-manifest/1";
pub const REPORT_FORMAT: &str = "adas-mtl-report/1";

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
pub const DATA_DIR: &str = "data";
pub const PREPROCESSED_DIR: &str = "preprocessed";
pub const STAGES_DIR: &str = "stages";
pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const HISTORY_FILE: &str = "history.json";
pub const SPLIT_FILE: &str = "split.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const ATTRIBUTIONS_FILE: &str = "attributions.json";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const REPORT_FILE: &str = "report.json";

/// Items listed in the report's dominance summary.
const DOMINANCE_TOP_K: usize = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("output directory {0} is in use by another run (delete {LOCK_FILE} if it is stale)")]
    Locked(PathBuf),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Clinical(#[from] ClinicalError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Preprocess,
    Train,
    Evaluate,
    Explain,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Synth,
        Stage::Preprocess,
        Stage::Train,
        Stage::Evaluate,
        Stage::Explain,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::Preprocess => &[Stage::Synth],
            Stage::Train => &[Stage::Synth, Stage::Preprocess],
            Stage::Evaluate | Stage::Explain => &[Stage::Train],
            Stage::Report => &[Stage::Train, Stage::Evaluate, Stage::Explain],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    /// The stage has nothing to do for this config (e.g. preprocessing without MRI).
    NotApplicable,
    Failed,
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: Stage,
    pub key: String,
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Inventory of an output directory after a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub stages: Vec<StageEntry>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn file(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }

    pub fn status(&self, stage: Stage) -> Option<StageStatus> {
        self.stages.iter().find(|e| e.stage == stage).map(|e| e.status)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StageRecord {
    stage: Stage,
    key: String,
    outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub not_applicable: Vec<Stage>,
    pub manifest: Manifest,
}

/// Split file contents: the split plus its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub hash: String,
    #[serde(flatten)]
    pub split: SubjectSplit,
}

/// Config hash and seeds, embedded in intermediate JSON outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub provenance: Provenance,
    pub split_hash: String,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionsFile {
    pub provenance: Provenance,
    pub attributions: Vec<Attribution>,
    pub importance: Vec<ImportanceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub hash: String,
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub stratified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub best_val_total_loss: Option<f64>,
}

/// Final run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: Seeds,
    pub feature_extraction: String,
    pub input_data: String,
    pub split: SplitSummary,
    pub training: TrainingSummary,
    /// Validation metrics, global score first.
    pub metrics: Vec<OutputMetrics>,
    pub dominance: DominanceSummary,
    pub degenerate_subjects: usize,
    pub importance: Vec<ImportanceEntry>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| PipelineError::io(path, e))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| PipelineError::io(path, e))
}

fn remove_dir(path: &Path) -> Result<()> {
    match fs::remove_dir_all(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(PipelineError::io(path, e)),
        _ => Ok(()),
    }
}

/// Exclusive ownership of an output directory, released on drop.
pub(crate) struct DirLock(PathBuf);

impl DirLock {
    pub(crate) fn acquire(dir: &Path) -> Result<Self> {
        create_dir(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(dir.to_path_buf())),
            Err(e) => Err(PipelineError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Hashes every file under `dir` except the manifest and the lock.
pub fn build_manifest(dir: &Path, config: &ExperimentConfig, stages: Vec<StageEntry>) -> Result<Manifest> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| PipelineError::Config(format!("walking {}: {e}", dir.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under its root");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if rel == MANIFEST_FILE || rel == LOCK_FILE {
            continue;
        }
        files.push(FileEntry {
            sha256: sha256_file(entry.path()).map_err(|e| PipelineError::io(entry.path(), e))?,
            bytes: entry.metadata().map_err(|e| PipelineError::Config(e.to_string()))?.len(),
            path: rel,
        });
    }
    Ok(Manifest {
        format: MANIFEST_FORMAT.into(),
        config_hash: config.hash(),
        seeds: config.seeds(),
        stages,
        files,
    })
}

/// Shared state of one run over one output directory.
pub(crate) struct Workspace<'a> {
    pub config: &'a ExperimentConfig,
    pub out: PathBuf,
    pub needs_mri: bool,
    keys: BTreeMap<Stage, String>,
    executed: BTreeSet<Stage>,
    samples: Option<Vec<Sample>>,
}

impl<'a> Workspace<'a> {
    pub(crate) fn new(config: &'a ExperimentConfig, needs_mri: bool) -> Result<Self> {
        let out = config.output_dir.clone();
        create_dir(&out.join(STAGES_DIR))?;
        Ok(Workspace {
            config,
            out,
            needs_mri,
            keys: BTreeMap::new(),
            executed: BTreeSet::new(),
            samples: None,
        })
    }

    fn applicable(&self, stage: Stage) -> bool {
        match stage {
            Stage::Synth => matches!(self.config.data, DataSource::Synthetic { .. }),
            Stage::Preprocess => self.needs_mri,
            _ => true,
        }
    }

    /// Config subtree that determines a stage's outputs, excluding upstream.
    fn subtree(&self, stage: Stage) -> Result<Value> {
        let c = self.config;
        Ok(match stage {
            Stage::Synth => match &c.data {
                DataSource::Synthetic { .. } => json!({ "data": c.data, "needs_mri": self.needs_mri }),
                DataSource::Files { clinical_csv, .. } => json!({
                    "data": c.data,
                    "clinical_sha256": sha256_file(clinical_csv).map_err(|e| PipelineError::io(clinical_csv, e))?,
                }),
            },
            Stage::Preprocess => json!({ "preprocess": c.preprocess, "needs_mri": self.needs_mri }),
            Stage::Train => json!({
                "backbone": c.backbone,
                "modality": c.modality,
                "trunk_width": c.trunk_width,
                "train": c.train,
            }),
            Stage::Evaluate => json!({}),
            Stage::Explain => json!({ "attribution": c.attribution }),
            Stage::Report => json!({ "config_hash": c.hash() }),
        })
    }

    fn key(&mut self, stage: Stage) -> Result<String> {
        if let Some(k) = self.keys.get(&stage) {
            return Ok(k.clone());
        }
        let upstream = stage
            .upstream()
            .iter()
            .map(|&u| Ok((u.name(), self.key(u)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let key = config_hash(&json!({
            "stage": stage.name(),
            "applicable": self.applicable(stage),
            "config": self.subtree(stage)?,
            "upstream": upstream,
        }));
        self.keys.insert(stage, key.clone());
        Ok(key)
    }

    fn record_path(&self, stage: Stage) -> PathBuf {
        self.out.join(STAGES_DIR).join(format!("{}.json", stage.name()))
    }

    fn up_to_date(&mut self, stage: Stage) -> Result<bool> {
        if stage.upstream().iter().any(|u| self.executed.contains(u)) {
            return Ok(false);
        }
        let path = self.record_path(stage);
        if !path.exists() {
            return Ok(false);
        }
        let Ok(record) = read_json::<StageRecord>(&path) else {
            return Ok(false);
        };
        Ok(record.key == self.key(stage)? && record.outputs.iter().all(|o| self.out.join(o).exists()))
    }

    /// Runs `stage` unless it is up to date. Returns whether it executed.
    pub(crate) fn ensure(&mut self, stage: Stage) -> Result<StageStatus, PipelineError> {
        let wrap = |e: PipelineError| PipelineError::Stage {
            stage,
            source: Box::new(e),
        };
        let key = self.key(stage).map_err(wrap)?;
        if self.up_to_date(stage).map_err(wrap)? {
            log::info!("stage {stage}: up to date");
            return Ok(if self.applicable(stage) {
                StageStatus::Completed
            } else {
                StageStatus::NotApplicable
            });
        }
        let record = self.record_path(stage);
        if record.exists() {
            fs::remove_file(&record).map_err(|e| wrap(PipelineError::io(&record, e)))?;
        }
        let (outputs, status) = if self.applicable(stage) {
            log::info!("stage {stage}: running");
            let outputs = self.execute(stage).map_err(wrap)?;
            (outputs, StageStatus::Completed)
        } else {
            log::info!("stage {stage}: not applicable");
            (Vec::new(), StageStatus::NotApplicable)
        };
        self.executed.insert(stage);
        write_json(&record, &StageRecord { stage, key, outputs }).map_err(wrap)?;
        Ok(status)
    }

    pub(crate) fn was_executed(&self, stage: Stage) -> bool {
        self.executed.contains(&stage)
    }

    fn execute(&mut self, stage: Stage) -> Result<Vec<String>> {
        match stage {
            Stage::Synth => self.run_synth(),
            Stage::Preprocess => self.run_preprocess(),
            Stage::Train => self.run_train(),
            Stage::Evaluate => self.run_evaluate(),
            Stage::Explain => self.run_explain(),
            Stage::Report => self.run_report(),
        }
    }

    pub(crate) fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config.hash(),
            seeds: self.config.seeds(),
        }
    }

    fn run_synth(&mut self) -> Result<Vec<String>> {
        let DataSource::Synthetic { cohort, phantom, plan } = &self.config.data else {
            unreachable!("synth runs only for synthetic data");
        };
        let dir = self.out.join(DATA_DIR);
        remove_dir(&dir)?;
        create_dir(&dir)?;
        let mut outputs = vec![format!("{DATA_DIR}/clinical.csv")];
        if self.needs_mri {
            let plan = plan.as_ref().expect("resolved config carries a signal plan");
            let (subjects, manifest) = write_dataset(&dir, cohort, plan, phantom)?;
            log::info!("synth: {} subjects with volumes", subjects.len());
            outputs.extend(manifest.files.iter().map(|f| format!("{DATA_DIR}/{}", f.path)));
            outputs.push(format!("{DATA_DIR}/manifest.json"));
            outputs.dedup();
        } else {
            let subjects = generate_cohort(cohort)?;
            write_clinical_csv(create_file(&dir.join("clinical.csv"))?, &subjects)?;
            log::info!("synth: {} subjects, clinical data only", subjects.len());
        }
        Ok(outputs)
    }


    /// Eligible subjects, with `mri_path` pointing at the raw volume when MRI is used.
    fn subjects(&self) -> Result<Vec<SubjectRecord>> {
        let (csv, volumes_dir, ranges) = match &self.config.data {
            DataSource::Synthetic { cohort, .. } => {
                let dir = self.out.join(DATA_DIR);
                (dir.join("clinical.csv"), Some(dir.join("volumes")), cohort.item_ranges.clone())
            }
            DataSource::Files {
                clinical_csv,
                volumes_dir,
                ..
            } => (clinical_csv.clone(), volumes_dir.clone(), Default::default()),
        };
        let base = csv.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cohort = parse_clinical_csv(&csv, &ranges)?;
        for s in &mut cohort {
            s.mri_path = match (s.mri_path.take(), &volumes_dir) {
                (Some(p), _) if p.is_relative() => Some(base.join(p)),
                (Some(p), _) => Some(p),
                (None, Some(dir)) => Some(dir.join(format!("{}.nii", s.subject_id))),
                (None, None) => None,
            };
        }
        let eligible = eligible_subjects(&cohort, self.needs_mri);
        if eligible.is_empty() {
            return Err(PipelineError::Config(format!("no eligible subjects in {}", csv.display())));
        }
        Ok(eligible)
    }

    fn preprocessed_path(&self, subject_id: &str) -> PathBuf {
        self.out.join(PREPROCESSED_DIR).join(format!("{subject_id}.nii"))
    }

    fn reference_volume(&self, subjects: &[SubjectRecord]) -> Result<Option<Volume>> {
        if !self.config.preprocess.register {
            return Ok(None);
        }
        Ok(Some(match &self.config.data {
            DataSource::Synthetic { phantom, plan, .. } => {
                template_volume(plan.as_ref().expect("resolved config carries a signal plan"), phantom)?
            }
            DataSource::Files {
                reference_volume: Some(p),
                ..
            } => load_volume(p)?,
            DataSource::Files { .. } => {
                let first = &subjects[0];
                log::warn!("no reference volume configured; registering to subject {}", first.subject_id);
                load_volume(first.mri_path.as_ref().expect("eligible subjects have a volume"))?
            }
        }))
    }

    fn run_preprocess(&mut self) -> Result<Vec<String>> {
        let subjects = self.subjects()?;
        let reference = self.reference_volume(&subjects)?;
        let dir = self.out.join(PREPROCESSED_DIR);
        remove_dir(&dir)?;
        create_dir(&dir)?;
        let mut outputs = Vec::with_capacity(2 * subjects.len());
        for (k, s) in subjects.iter().enumerate() {
            let raw = load_volume(s.mri_path.as_ref().expect("eligible subjects have a volume"))?;
            let (volume, sidecar) = preprocess_volume(&raw, reference.as_ref(), &self.config.preprocess)?;
            if !sidecar.converged {
                log::warn!("preprocess: registration of {} did not converge", s.subject_id);
            }
            save_volume_as(self.preprocessed_path(&s.subject_id), &volume, VoxelType::Float32)?;
            write_json(&dir.join(format!("{}.json", s.subject_id)), &sidecar)?;
            outputs.push(format!("{PREPROCESSED_DIR}/{}.nii", s.subject_id));
            outputs.push(format!("{PREPROCESSED_DIR}/{}.json", s.subject_id));
            if (k + 1) % 50 == 0 {
                log::info!("preprocess: {}/{} volumes", k + 1, subjects.len());
            }
        }
        Ok(outputs)
    }

    /// Model-ready samples, loaded once per run.
    pub(crate) fn samples(&mut self) -> Result<&[Sample]> {
        if self.samples.is_none() {
            let subjects = self.subjects()?;
            let backbone = &self.config.backbone;
            let samples = subjects
                .iter()
                .map(|s| {
                    let volume = if self.needs_mri {
                        Some(load_volume(self.preprocessed_path(&s.subject_id))?)
                    } else {
                        None
                    };
                    Ok(Sample::new(s, volume.as_ref(), backbone)?)
                })
                .collect::<Result<Vec<_>>>()?;
            self.samples = Some(samples);
        }
        Ok(self.samples.as_deref().expect("filled above"))
    }

    fn run_train(&mut self) -> Result<Vec<String>> {
        let model_config = self.config.model_config();
        let train_config = self.config.train.clone();
        let samples = self.samples()?;
        let mut model = build_model(&model_config)?;
        let (history, split) = train(&mut model, samples, &train_config)?;
        log::info!(
            "train: {} epochs, best epoch {} ({} train / {} val subjects)",
            history.epochs.len(),
            history.best_epoch,
            split.train_ids.len(),
            split.val_ids.len()
        );
        save_checkpoint(&model, &self.out.join(CHECKPOINT_FILE))?;
        write_json(&self.out.join(HISTORY_FILE), &history)?;
        write_json(
            &self.out.join(SPLIT_FILE),
            &SplitRecord {
                hash: split.hash(),
                split,
            },
        )?;
        Ok(vec![CHECKPOINT_FILE.into(), HISTORY_FILE.into(), SPLIT_FILE.into()])
    }

    fn split(&self) -> Result<SplitRecord> {
        read_json(&self.out.join(SPLIT_FILE))
    }

    fn subset(&mut self, ids: &[String]) -> Result<Vec<Sample>> {
        let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        let picked: Vec<Sample> = self
            .samples()?
            .iter()
            .filter(|s| wanted.contains(s.subject_id.as_str()))
            .cloned()
            .collect();
        if picked.len() != wanted.len() {
            return Err(PipelineError::Config(format!(
                "{SPLIT_FILE} lists {} subjects, {} of them are available",
                wanted.len(),
                picked.len()
            )));
        }
        Ok(picked)
    }

    fn run_evaluate(&mut self) -> Result<Vec<String>> {
        let model = load_checkpoint(&self.out.join(CHECKPOINT_FILE), Some(&self.config.model_config()))?;
        let split = self.split()?;
        let val = self.subset(&split.split.val_ids)?;
        let report = evaluate(&model, &val)?;
        log::info!(
            "evaluate: global MAE {:.3}, RMSE {:.3}, r {:?}",
            report.global().mae,
            report.global().rmse,
            report.global().pearson_r
        );
        write_predictions_csv(create_file(&self.out.join(PREDICTIONS_FILE))?, &report)?;
        write_json(
            &self.out.join(EVALUATION_FILE),
            &EvaluationFile {
                provenance: self.provenance(),
                split_hash: split.hash,
                report,
            },
        )?;
        Ok(vec![EVALUATION_FILE.into(), PREDICTIONS_FILE.into()])
    }

    fn run_explain(&mut self) -> Result<Vec<String>> {
        let cfg = self.config.attribution.clone();
        let model = load_checkpoint(&self.out.join(CHECKPOINT_FILE), Some(&self.config.model_config()))?;
        let split = self.split()?.split;
        let train_set = self.subset(&split.train_ids)?;
        let mut explained = self.subset(&split.val_ids)?;
        explained.truncate(cfg.max_explained);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, fnv1a("background")));
        let n_bg = cfg.background_size.min(train_set.len());
        let mut picks = sample_indices(&mut rng, train_set.len(), n_bg).into_vec();
        picks.sort_unstable();
        let background: Vec<&Sample> = picks.iter().map(|&i| &train_set[i]).collect();
        let explained_refs: Vec<&Sample> = explained.iter().collect();
        let attributions = shapley_attribution(&model, &explained_refs, &background, &cfg)?;
        let importance = importance_summary(&attributions)?;
        write_importance_csv(create_file(&self.out.join(IMPORTANCE_FILE))?, &importance, cfg.target_output)?;
        write_json(
            &self.out.join(ATTRIBUTIONS_FILE),
            &AttributionsFile {
                provenance: self.provenance(),
                attributions,
                importance,
            },
        )?;
        Ok(vec![ATTRIBUTIONS_FILE.into(), IMPORTANCE_FILE.into()])
    }

    fn run_report(&mut self) -> Result<Vec<String>> {
        let evaluation: EvaluationFile = read_json(&self.out.join(EVALUATION_FILE))?;
        let attributions: AttributionsFile = read_json(&self.out.join(ATTRIBUTIONS_FILE))?;
        let history: TrainHistory = read_json(&self.out.join(HISTORY_FILE))?;
        let split = self.split()?;
        let c = self.config;
        let best = history.epochs.get(history.best_epoch);
        let report = RunReport {
            format: REPORT_FORMAT.into(),
            config: c.clone(),
            config_hash: c.hash(),
            seeds: c.seeds(),
            feature_extraction: c.model_config().effective_backbone().display_name().into(),
            input_data: c.modality.input_label().into(),
            split: SplitSummary {
                hash: split.hash,
                train_subjects: split.split.train_ids.len(),
                val_subjects: split.split.val_ids.len(),
                stratified: split.split.stratified,
            },
            training: TrainingSummary {
                epochs_run: history.epochs.len(),
                best_epoch: history.best_epoch,
                stopped_early: history.stopped_early,
                best_val_total_loss: best.and_then(|e| e.val_total_loss),
            },
            dominance: dominance_report(&evaluation.report, DOMINANCE_TOP_K),
            degenerate_subjects: evaluation.report.degenerate_subjects,
            metrics: evaluation.report.outputs,
            importance: attributions.importance,
        };
        write_json(&self.out.join(REPORT_FILE), &report)?;
        Ok(vec![REPORT_FILE.into()])
    }
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    read_json(&dir.join(REPORT_FILE))
}

/// Runs every stage. See [`run_until`].
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutcome> {
    run_until(config, Stage::Report)
}

/// Resolves `config`, then runs the stages up to and including `last` in
/// order, skipping those that are up to date. The resolved config goes to
/// `config.json` and the file inventory to `manifest.json`, also when a stage
/// fails; the error names the failing stage.
pub fn run_until(config: &ExperimentConfig, last: Stage) -> Result<PipelineOutcome> {
    let config = config.clone().resolve()?;
    let _lock = DirLock::acquire(&config.output_dir)?;
    write_json(&config.output_dir.join(CONFIG_FILE), &config)?;
    let mut ws = Workspace::new(&config, config.modality.use_mri)?;

    let mut entries = Vec::new();
    let mut outcome_lists = (Vec::new(), Vec::new(), Vec::new());
    let mut failure = None;
    for stage in Stage::ALL {
        let key = ws.key(stage).unwrap_or_default();
        let status = if stage > last || failure.is_some() {
            StageStatus::NotRun
        } else {
            match ws.ensure(stage) {
                Ok(status) => {
                    let list = match status {
                        StageStatus::NotApplicable => &mut outcome_lists.2,
                        _ if ws.was_executed(stage) => &mut outcome_lists.0,
                        _ => &mut outcome_lists.1,
                    };
                    list.push(stage);
                    status
                }
                Err(e) => {
                    log::error!("{e}");
                    failure = Some(e);
                    StageStatus::Failed
                }
            }
        };
        entries.push(StageEntry { stage, key, status });
    }
    let manifest = build_manifest(&config.output_dir, &config, entries)?;
    write_json(&config.output_dir.join(MANIFEST_FILE), &manifest)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let (executed, skipped, not_applicable) = outcome_lists;
    Ok(PipelineOutcome {
        executed,
        skipped,
        not_applicable,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("deploy".parse::<Stage>().is_err());
    }

    #[test]
    fn upstream_stages_come_first() {
        for s in Stage::ALL {
            assert!(s.upstream().iter().all(|u| *u < s));
        }
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(PipelineError::Locked(_))));
        drop(lock);
        assert!(!dir.path().join(LOCK_FILE).exists());
        DirLock::acquire(dir.path()).unwrap();
    }
}
