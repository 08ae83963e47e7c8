//! Subject-level splitting and the Adam optimization loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clinical::{
    build_feature_vector, build_target_vector, ClinicalError, Diagnosis, FeatureVector, SubjectRecord, TargetVector,
    NUM_OUTPUTS,
};
use crate::evaluation::{mae, output_name, pearson, MetricError};
use crate::imaging::Volume;
use crate::loss::{per_column_mse, tensor_total_loss, total_loss, LossConfig, LossError, PredictionBatch};
use crate::model::{clinical_batch, patch_batch, patchify, BackboneConfig, ModalityConfig, ModelError, MtlModel, Standardization};
use crate::util::{mix_seed, sha256_hex};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (head `{head}`)")]
    NonFiniteLoss { epoch: usize, batch: usize, head: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Clinical(#[from] ClinicalError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    /// Optional per-item weights of the sub-score loss term.
    pub subscore_weights: Option<Vec<f64>>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Fraction of subjects used for training.
    pub split_ratio: f64,
    pub seed: u64,
    pub modality: ModalityConfig,
    /// Compare repeated runs bitwise when true, within 1e-7 otherwise.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            subscore_weights: None,
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 100,
            early_stop_patience: 10,
            split_ratio: 0.8,
            seed: 0,
            modality: ModalityConfig::default(),
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            subscore_weights: self.subscore_weights.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss_config().validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(TrainError::Config(format!("split_ratio {} outside (0, 1)", self.split_ratio)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config(format!("learning_rate {} must be non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        self.modality.validate()?;
        Ok(())
    }
}

/// Model-ready data for one subject.
#[derive(Debug, Clone)]
pub struct Sample {
    pub subject_id: String,
    pub diagnosis: Diagnosis,
    pub features: FeatureVector,
    pub targets: TargetVector,
    /// Patchified preprocessed volume, present when the model uses MRI.
    pub patches: Option<Arc<Vec<f32>>>,
}

impl Sample {
    pub fn new(subject: &SubjectRecord, volume: Option<&Volume>, backbone: &BackboneConfig) -> Result<Self, TrainError> {
        Ok(Sample {
            subject_id: subject.subject_id.clone(),
            diagnosis: subject.diagnosis,
            features: build_feature_vector(subject)?,
            targets: build_target_vector(subject)?,
            patches: volume.map(|v| patchify(v, backbone)).transpose()?.map(Arc::new),
        })
    }
}

fn model_inputs(model: &MtlModel, samples: &[&Sample]) -> Result<(Option<Tensor>, Option<Tensor>), TrainError> {
    let modality = model.config().modality;
    let patches = if modality.use_mri {
        let rows = samples
            .iter()
            .map(|s| {
                s.patches
                    .as_deref()
                    .map(Vec::as_slice)
                    .ok_or(ModelError::MissingInput("volume"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some(patch_batch(&rows, &model.config().backbone, model.device())?)
    } else {
        None
    };
    let clinical = if modality.use_clinical {
        let rows: Vec<&FeatureVector> = samples.iter().map(|s| &s.features).collect();
        Some(clinical_batch(&rows, model.device())?)
    } else {
        None
    };
    Ok((patches, clinical))
}

fn target_tensor(samples: &[&Sample], model: &MtlModel) -> Result<Tensor, TrainError> {
    let data: Vec<f32> = samples.iter().flat_map(|s| s.targets.0.iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(data, (samples.len(), NUM_OUTPUTS), model.device())?)
}

const PREDICT_BATCH: usize = 32;

/// Raw-scale predictions for every sample, in order.
pub fn predict(model: &MtlModel, samples: &[Sample]) -> Result<Vec<[f64; NUM_OUTPUTS]>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (p, c) = model_inputs(model, &refs)?;
        let y = model.forward(p.as_ref(), c.as_ref())?.to_dtype(candle_core::DType::F64)?;
        for row in y.to_vec2::<f64>()? {
            out.push(std::array::from_fn(|k| row[k]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub stratified: bool,
}

impl SubjectSplit {
    /// Content hash of the sorted id lists.
    pub fn hash(&self) -> String {
        let text = format!("train:{}\nval:{}", self.train_ids.join(","), self.val_ids.join(","));
        sha256_hex(text.as_bytes())
    }
}

/// Subject-level split, stratified by diagnosis when every group has at least
/// two subjects. The validation count is `round(n · (1 − ratio))`, apportioned
/// to groups by largest remainder. Output id lists are sorted.
pub fn split_subjects(
    subjects: &[(String, Diagnosis)],
    split_ratio: f64,
    seed: u64,
) -> Result<SubjectSplit, TrainError> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(TrainError::Config(format!("split_ratio {split_ratio} outside (0, 1)")));
    }
    let mut groups: BTreeMap<Diagnosis, Vec<&str>> = BTreeMap::new();
    for (id, dx) in subjects {
        groups.entry(*dx).or_default().push(id);
    }
    let val_fraction = 1.0 - split_ratio;
    let stratified = groups.values().all(|g| g.len() >= 2);
    if !stratified {
        log::warn!("a diagnosis group has fewer than 2 subjects; falling back to an unstratified split");
        let all: Vec<&str> = subjects.iter().map(|(id, _)| id.as_str()).collect();
        groups = BTreeMap::from([(Diagnosis::NC, all)]);
    }

    let total_val = (subjects.len() as f64 * val_fraction).round() as usize;
    let quotas: Vec<f64> = groups.values().map(|g| g.len() as f64 * val_fraction).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = total_val.saturating_sub(counts.iter().sum());
    for &g in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if counts[g] < groups.values().nth(g).map_or(0, Vec::len) {
            counts[g] += 1;
            missing -= 1;
        }
    }

    let (mut train_ids, mut val_ids) = (Vec::new(), Vec::new());
    for (g, ((_, ids), n_val)) in groups.into_iter().zip(counts).enumerate() {
        let mut ids: Vec<&str> = ids;
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, g as u64));
        ids.shuffle(&mut rng);
        val_ids.extend(ids[..n_val].iter().map(|s| s.to_string()));
        train_ids.extend(ids[n_val..].iter().map(|s| s.to_string()));
    }
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    Ok(SubjectSplit {
        train_ids,
        val_ids,
        stratified,
    })
}

pub fn split_samples(samples: &[Sample], split_ratio: f64, seed: u64) -> Result<SubjectSplit, TrainError> {
    let labeled: Vec<(String, Diagnosis)> = samples.iter().map(|s| (s.subject_id.clone(), s.diagnosis)).collect();
    split_subjects(&labeled, split_ratio, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses seen during the epoch.
    pub train_total_loss: f64,
    pub val_total_loss: Option<f64>,
    pub val_mae_global: Option<f64>,
    pub val_pearson_global: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the restored parameters.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Splits `samples` with the configured ratio and seed, then trains.
pub fn train(model: &mut MtlModel, samples: &[Sample], config: &TrainConfig) -> Result<(TrainHistory, SubjectSplit), TrainError> {
    config.validate()?;
    let split = split_samples(samples, config.split_ratio, config.seed)?;
    let pick = |ids: &[String]| -> Vec<Sample> {
        samples
            .iter()
            .filter(|s| ids.binary_search(&s.subject_id).is_ok())
            .cloned()
            .collect()
    };
    let history = train_on_split(model, &pick(&split.train_ids), &pick(&split.val_ids), config)?;
    Ok((history, split))
}

fn nonfinite_head(predictions: &Tensor, targets: &Tensor) -> String {
    let per_head = per_column_mse(predictions, targets).and_then(|t| t.to_vec1::<f32>());
    match per_head {
        Ok(v) => v
            .iter()
            .position(|x| !x.is_finite())
            .map(output_name)
            .unwrap_or_else(|| "unknown".into()),
        Err(_) => "unknown".into(),
    }
}

/// Fits the model's standardization on `train`, then runs Adam with
/// per-epoch validation, early stopping and best-epoch restoration. With an
/// empty `val`, selection uses the training loss and no early stop occurs.
pub fn train_on_split(model: &mut MtlModel, train: &[Sample], val: &[Sample], config: &TrainConfig) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if model.config().modality != config.modality {
        return Err(TrainError::Config(format!(
            "model modality {:?} differs from training modality {:?}",
            model.config().modality,
            config.modality
        )));
    }
    let loss_cfg = config.loss_config();
    let features: Vec<FeatureVector> = train.iter().map(|s| s.features).collect();
    let targets: Vec<TargetVector> = train.iter().map(|s| s.targets).collect();
    model.set_standardization(Standardization::fit(&features, &targets))?;

    let mut opt = AdamW::new(
        model.vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;

    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let (p, c) = model_inputs(model, &batch)?;
            let y = target_tensor(&batch, model)?;
            let pred = model.forward(p.as_ref(), c.as_ref())?;
            let loss = tensor_total_loss(&pred, &y, &loss_cfg)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    head: nonfinite_head(&pred, &y),
                });
            }
            opt.backward_step(&loss)?;
            weighted += value * batch.len() as f64;
        }
        let train_loss = weighted / train.len() as f64;

        let mut record = EpochRecord {
            epoch,
            train_total_loss: train_loss,
            val_total_loss: None,
            val_mae_global: None,
            val_pearson_global: None,
        };
        if !val.is_empty() {
            let preds = predict(model, val)?;
            let truth: Vec<[f64; NUM_OUTPUTS]> = val.iter().map(|s| s.targets.0).collect();
            let batch = PredictionBatch::from_rows(&preds, &truth)?;
            record.val_total_loss = Some(total_loss(&batch, &loss_cfg)?);
            let pg: Vec<f64> = preds.iter().map(|r| r[0]).collect();
            let tg: Vec<f64> = truth.iter().map(|r| r[0]).collect();
            record.val_mae_global = Some(mae(&pg, &tg)?);
            record.val_pearson_global = pearson(&pg, &tg).ok();
        }
        let score = record.val_total_loss.unwrap_or(train_loss);
        log::debug!("epoch {epoch}: train {train_loss:.4}, selection {score:.4}");
        epochs.push(record);

        if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
            best = Some((score, epoch, model.snapshot()?));
        } else if !val.is_empty() && epoch - best.as_ref().map_or(0, |b| b.1) >= config.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    let best_epoch = match best {
        Some((_, e, snapshot)) => {
            model.restore(&snapshot)?;
            e
        }
        None => 0,
    };
    Ok(TrainHistory {
        epochs,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn labeled(groups: &[(Diagnosis, usize)]) -> Vec<(String, Diagnosis)> {
        let mut out = Vec::new();
        for &(dx, n) in groups {
            for i in 0..n {
                out.push((format!("{dx}{i:03}"), dx));
            }
        }
        out
    }

    #[test]
    fn ten_subjects_split_eight_two() {
        let s = split_subjects(&labeled(&[(Diagnosis::NC, 10)]), 0.8, 1).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len()), (8, 2));
        let t: BTreeSet<_> = s.train_ids.iter().collect();
        assert!(s.val_ids.iter().all(|v| !t.contains(v)));
    }

    #[test]
    fn split_is_seeded() {
        let subjects = labeled(&[(Diagnosis::NC, 40), (Diagnosis::AD, 12)]);
        let a = split_subjects(&subjects, 0.8, 5).unwrap();
        assert_eq!(a, split_subjects(&subjects, 0.8, 5).unwrap());
        assert_ne!(a, split_subjects(&subjects, 0.8, 6).unwrap());
        let mut shuffled = subjects.clone();
        shuffled.reverse();
        assert_eq!(a, split_subjects(&shuffled, 0.8, 5).unwrap());
    }

    #[test]
    fn singleton_group_disables_stratification() {
        let s = split_subjects(&labeled(&[(Diagnosis::NC, 9), (Diagnosis::AD, 1)]), 0.8, 0).unwrap();
        assert!(!s.stratified);
        assert_eq!(s.val_ids.len(), 2);
    }

    #[test]
    fn rejects_degenerate_ratio() {
        assert!(split_subjects(&labeled(&[(Diagnosis::NC, 4)]), 1.0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            alpha: 2.0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(TrainError::Loss(LossError::InvalidAlpha(_)))));
    }
}
