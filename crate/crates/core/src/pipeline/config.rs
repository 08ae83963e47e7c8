use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::explain::AttributionConfig;
use crate::imaging::PreprocessConfig;
use crate::model::{BackboneConfig, ModalityConfig, ModelConfig};
use crate::synth::{CohortSpec, PhantomSpec, SignalPlan};
use crate::training::TrainConfig;
use crate::util::config_hash;

pub const DEFAULT_SEED: u64 = 20240917;

/// Where subjects come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated cohort and phantom volumes, written under `<out>/data`.
    Synthetic {
        #[serde(default)]
        cohort: CohortSpec,
        #[serde(default)]
        phantom: PhantomSpec,
        /// Filled with [`SignalPlan::for_shape`] on resolution.
        #[serde(default)]
        plan: Option<SignalPlan>,
    },
    /// An existing clinical CSV. Relative `mri_path` entries resolve against
    /// the CSV's directory; subjects without one fall back to
    /// `<volumes_dir>/<subject_id>.nii`.
    Files {
        clinical_csv: PathBuf,
        #[serde(default)]
        volumes_dir: Option<PathBuf>,
        /// Registration target. Without it the first eligible subject is used.
        #[serde(default)]
        reference_volume: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            cohort: CohortSpec::default(),
            phantom: PhantomSpec::default(),
            plan: None,
        }
    }
}

/// Everything one experiment run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub preprocess: PreprocessConfig,
    pub backbone: BackboneConfig,
    pub modality: ModalityConfig,
    pub trunk_width: usize,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub output_dir: PathBuf,
    /// Copied into every seeded component on resolution.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            preprocess: PreprocessConfig::default(),
            backbone: BackboneConfig::default(),
            modality: ModalityConfig::default(),
            trunk_width: ModelConfig::default().trunk_width,
            train: TrainConfig::default(),
            attribution: AttributionConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: DEFAULT_SEED,
        }
    }
}

/// Seeds actually used by each component of a resolved config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: u64,
    /// Absent for file-based data.
    pub cohort: Option<u64>,
    pub model_init: u64,
    pub split_and_shuffle: u64,
    pub attribution: u64,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &std::path::Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Expands defaults, propagates the global seed and modality into every
    /// sub-config, then validates.
    pub fn resolve(mut self) -> Result<Self, PipelineError> {
        if let DataSource::Synthetic { cohort, phantom, plan } = &mut self.data {
            cohort.seed = self.seed;
            plan.get_or_insert_with(|| SignalPlan::for_shape(phantom.shape));
        }
        self.train.seed = self.seed;
        self.train.modality = self.modality;
        self.attribution.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model_config().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.attribution.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.train.modality != self.modality {
            return Err(PipelineError::Config("train.modality differs from modality".into()));
        }
        if self.preprocess.bias_smoothing_mm <= 0.0 {
            return Err(PipelineError::Config("preprocess.bias_smoothing_mm must be positive".into()));
        }
        match &self.data {
            DataSource::Synthetic { cohort, phantom, .. } => {
                cohort.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
                if self.modality.use_mri && phantom.shape != self.backbone.input_shape {
                    return Err(PipelineError::Config(format!(
                        "phantom shape {:?} differs from backbone input_shape {:?}",
                        phantom.shape, self.backbone.input_shape
                    )));
                }
            }
            DataSource::Files {
                clinical_csv,
                volumes_dir,
                reference_volume,
            } => {
                let paths = std::iter::once(clinical_csv).chain(volumes_dir).chain(reference_volume);
                for p in paths {
                    if !p.exists() {
                        return Err(PipelineError::Config(format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            modality: self.modality,
            trunk_width: self.trunk_width,
            seed: self.seed,
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            global: self.seed,
            cohort: match &self.data {
                DataSource::Synthetic { cohort, .. } => Some(cohort.seed),
                DataSource::Files { .. } => None,
            },
            model_init: self.seed,
            split_and_shuffle: self.train.seed,
            attribution: self.attribution.seed,
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_propagates_seed_and_modality() {
        let cfg = ExperimentConfig {
            seed: 5,
            modality: ModalityConfig::clinical_only(),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        let s = cfg.seeds();
        assert_eq!((s.cohort, s.model_init, s.split_and_shuffle, s.attribution), (Some(5), 5, 5, 5));
        assert_eq!(cfg.train.modality, ModalityConfig::clinical_only());
        let DataSource::Synthetic { plan, .. } = &cfg.data else { unreachable!() };
        assert!(plan.is_some());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 3, "data": {"kind": "synthetic", "phantom": {"shape": [32, 32, 32]}}}"#)
                .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train, TrainConfig::default());
        let DataSource::Synthetic { phantom, cohort, .. } = &cfg.data else { unreachable!() };
        assert_eq!(phantom.shape, [32; 3]);
        assert_eq!(cohort.total(), 435);
    }

    #[test]
    fn mismatched_phantom_shape_is_rejected() {
        let cfg = ExperimentConfig {
            data: DataSource::Synthetic {
                cohort: CohortSpec::default(),
                phantom: PhantomSpec {
                    shape: [32; 3],
                    ..Default::default()
                },
                plan: None,
            },
            ..Default::default()
        };
        assert!(matches!(cfg.resolve(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn missing_files_are_rejected() {
        let cfg = ExperimentConfig {
            data: DataSource::Files {
                clinical_csv: "/nonexistent/clinical.csv".into(),
                volumes_dir: None,
                reference_volume: None,
            },
            ..Default::default()
        };
        assert!(matches!(cfg.resolve(), Err(PipelineError::Config(m)) if m.contains("does not exist")));
    }
}
