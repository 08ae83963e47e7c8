//! Shapley-value attribution over groups of input features.
//!
//! The value of a coalition `S` is the mean model output over the background
//! set, with the features of `S` taken from the explained sample and all other
//! features from the background row. Exact mode enumerates every coalition;
//! sampled mode averages marginal contributions along random group orderings,
//! the ordering of permutation `p` drawn from a stream keyed by `(seed, p)`.

use std::collections::HashMap;
use std::io::Write;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clinical::{AdasItem, NUM_FEATURES, NUM_OUTPUTS};
use crate::evaluation::output_name;
use crate::model::{patch_batch, ModelError, MtlModel};
use crate::training::Sample;
use crate::util::mix_seed;

/// Largest group count accepted by exact enumeration.
pub const MAX_EXACT_GROUPS: usize = 15;
/// Coalitions are tracked as bit masks.
pub const MAX_GROUPS: usize = 128;
/// Name of the group holding the MRI embedding.
pub const MRI_GROUP: &str = "MRI";

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("invalid attribution configuration: {0}")]
    Config(String),
    #[error("exact mode supports at most {MAX_EXACT_GROUPS} groups, got {0}; use sampled mode")]
    TooManyGroups(usize),
    #[error("attributions use different feature groupings")]
    MixedGroupings,
    #[error("model evaluation failed: {0}")]
    Model(#[from] ModelError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMode {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub indices: Vec<usize>,
}

impl FeatureGroup {
    pub fn new(name: impl Into<String>, indices: Vec<usize>) -> Self {
        FeatureGroup {
            name: name.into(),
            indices,
        }
    }
}

/// One singleton group per feature, named `x0`, `x1`, ...
pub fn singleton_groups(num_features: usize) -> Vec<FeatureGroup> {
    (0..num_features).map(|i| FeatureGroup::new(format!("x{i}"), vec![i])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    /// Output column to explain; 0 is the global score.
    pub target_output: usize,
    pub mode: AttributionMode,
    pub num_permutations: usize,
    pub seed: u64,
    /// Reference samples drawn from the training set.
    pub background_size: usize,
    /// Validation subjects explained by the pipeline.
    pub max_explained: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            target_output: 0,
            mode: AttributionMode::Sampled,
            num_permutations: 200,
            seed: 0,
            background_size: 16,
            max_explained: 20,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<(), ExplainError> {
        if self.target_output >= NUM_OUTPUTS {
            return Err(ExplainError::Config(format!(
                "target_output {} outside 0..{NUM_OUTPUTS}",
                self.target_output
            )));
        }
        if self.num_permutations == 0 {
            return Err(ExplainError::Config("num_permutations must be at least 1".into()));
        }
        if self.background_size == 0 {
            return Err(ExplainError::Config("background_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A scalar function evaluated on batches of flat feature rows.
pub trait ValueModel {
    fn num_features(&self) -> usize;
    fn evaluate(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, ExplainError>;
}

/// Adapter for plain closures.
pub struct FnModel<F> {
    num_features: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64> FnModel<F> {
    pub fn new(num_features: usize, f: F) -> Self {
        FnModel { num_features, f }
    }
}

impl<F: Fn(&[f64]) -> f64> ValueModel for FnModel<F> {
    fn num_features(&self) -> usize {
        self.num_features
    }

    fn evaluate(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, ExplainError> {
        Ok(rows.iter().map(|r| (self.f)(r)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub explained_sample: String,
    pub target_output: usize,
    pub mode: AttributionMode,
    pub group_names: Vec<String>,
    pub shapley_values: Vec<f64>,
    /// Mean model output over the background.
    pub base_value: f64,
    /// Model output on the explained sample.
    pub prediction: f64,
}

impl Attribution {
    /// `prediction − (base_value + Σ shapley_values)`.
    pub fn efficiency_gap(&self) -> f64 {
        self.prediction - (self.base_value + self.shapley_values.iter().sum::<f64>())
    }
}

fn validate_groups(groups: &[FeatureGroup], num_features: usize) -> Result<(), ExplainError> {
    if groups.is_empty() || groups.len() > MAX_GROUPS {
        return Err(ExplainError::Config(format!("need 1..={MAX_GROUPS} groups, got {}", groups.len())));
    }
    let mut seen = vec![false; num_features];
    for g in groups {
        for &i in &g.indices {
            if i >= num_features || std::mem::replace(&mut seen[i], true) {
                return Err(ExplainError::Config(format!(
                    "group `{}`: feature {i} is out of range or repeated",
                    g.name
                )));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(ExplainError::Config(format!("feature {i} belongs to no group")));
    }
    let mut names: Vec<&str> = groups.iter().map(|g| g.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(ExplainError::Config("group names must be unique".into()));
    }
    Ok(())
}

struct Game<'a> {
    model: &'a dyn ValueModel,
    sample: &'a [f64],
    background: &'a [Vec<f64>],
    groups: &'a [FeatureGroup],
    cache: HashMap<u128, f64>,
}

impl Game<'_> {
    fn row(&self, mask: u128, reference: &[f64]) -> Vec<f64> {
        let mut row = reference.to_vec();
        for (g, group) in self.groups.iter().enumerate() {
            if mask >> g & 1 == 1 {
                for &i in &group.indices {
                    row[i] = self.sample[i];
                }
            }
        }
        row
    }

    /// Fills the cache for every listed coalition with one batched model call.
    fn ensure(&mut self, masks: &[u128]) -> Result<(), ExplainError> {
        let mut todo: Vec<u128> = masks.iter().copied().filter(|m| !self.cache.contains_key(m)).collect();
        todo.sort_unstable();
        todo.dedup();
        if todo.is_empty() {
            return Ok(());
        }
        let rows: Vec<Vec<f64>> = todo
            .iter()
            .flat_map(|&m| self.background.iter().map(move |b| (m, b)))
            .map(|(m, b)| self.row(m, b))
            .collect();
        let out = self.model.evaluate(&rows)?;
        let nb = self.background.len();
        for (k, &m) in todo.iter().enumerate() {
            let v = out[k * nb..(k + 1) * nb].iter().sum::<f64>() / nb as f64;
            self.cache.insert(m, v);
        }
        Ok(())
    }

    fn value(&self, mask: u128) -> f64 {
        self.cache[&mask]
    }
}

/// Shapley values of `groups` for `model` at `sample`.
/// Returns `(base_value, shapley_values, prediction)`.
pub fn shapley_values(
    model: &dyn ValueModel,
    sample: &[f64],
    background: &[Vec<f64>],
    groups: &[FeatureGroup],
    mode: AttributionMode,
    num_permutations: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>, f64), ExplainError> {
    let nf = model.num_features();
    if sample.len() != nf || background.iter().any(|b| b.len() != nf) {
        return Err(ExplainError::Config(format!("feature rows must have length {nf}")));
    }
    if background.is_empty() {
        return Err(ExplainError::Config("background must not be empty".into()));
    }
    validate_groups(groups, nf)?;
    let g = groups.len();
    let mut game = Game {
        model,
        sample,
        background,
        groups,
        cache: HashMap::new(),
    };
    let full: u128 = if g == 128 { u128::MAX } else { (1u128 << g) - 1 };
    game.ensure(&[0])?;
    let base = game.value(0);
    let prediction = model.evaluate(&[sample.to_vec()])?[0];

    let mut phi = vec![0.0; g];
    match mode {
        AttributionMode::Exact => {
            if g > MAX_EXACT_GROUPS {
                return Err(ExplainError::TooManyGroups(g));
            }
            let all: Vec<u128> = (0..=full).collect();
            game.ensure(&all)?;
            let fact: Vec<f64> = (0..=g).scan(1.0, |f, k| {
                let out = *f;
                *f *= (k + 1) as f64;
                Some(out)
            }).collect();
            for mask in 0..=full {
                let size = mask.count_ones() as usize;
                if size == g {
                    continue;
                }
                let w = fact[size] * fact[g - size - 1] / fact[g];
                let v = game.value(mask);
                for (i, p) in phi.iter_mut().enumerate() {
                    if mask >> i & 1 == 0 {
                        *p += w * (game.value(mask | 1 << i) - v);
                    }
                }
            }
        }
        AttributionMode::Sampled => {
            if num_permutations == 0 {
                return Err(ExplainError::Config("num_permutations must be at least 1".into()));
            }
            // antithetic pairs: odd draws walk the previous permutation backwards
            let mut order: Vec<usize> = (0..g).collect();
            for p in 0..num_permutations {
                if p % 2 == 0 {
                    order.sort_unstable();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, (p / 2) as u64)));
                } else {
                    order.reverse();
                }
                let masks: Vec<u128> = order
                    .iter()
                    .scan(0u128, |m, &i| {
                        *m |= 1 << i;
                        Some(*m)
                    })
                    .collect();
                game.ensure(&masks)?;
                let mut prev = base;
                for (&i, &m) in order.iter().zip(&masks) {
                    let cur = game.value(m);
                    phi[i] += cur - prev;
                    prev = cur;
                }
            }
            phi.iter_mut().for_each(|p| *p /= num_permutations as f64);
        }
    }
    Ok((base, phi, prediction))
}

/// Flat explanation features of a model: the 26 clinical inputs (when used)
/// followed by the MRI embedding (when used).
pub struct ModelValue<'a> {
    model: &'a MtlModel,
    target: usize,
}

impl<'a> ModelValue<'a> {
    pub fn new(model: &'a MtlModel, target_output: usize) -> Self {
        ModelValue {
            model,
            target: target_output,
        }
    }

    fn clinical_width(&self) -> usize {
        if self.model.config().modality.use_clinical {
            NUM_FEATURES
        } else {
            0
        }
    }

    /// Default grouping: each clinical feature alone (`BL_Qj`, `M06_Qj`) and the
    /// whole MRI embedding as one group. A modality the model does not consume
    /// appears as an empty group, which always receives zero attribution.
    pub fn default_groups(&self) -> Vec<FeatureGroup> {
        let c = self.clinical_width();
        let mut groups: Vec<FeatureGroup> = if c > 0 {
            (0..NUM_FEATURES)
                .map(|i| {
                    let visit = if i < 13 { "BL" } else { "M06" };
                    FeatureGroup::new(format!("{visit}_{}", AdasItem::ALL[i % 13].name()), vec![i])
                })
                .collect()
        } else {
            Vec::new()
        };
        groups.push(FeatureGroup::new(MRI_GROUP, (c..c + self.model.embedding_dim()).collect()));
        groups
    }

    /// Explanation feature rows for `samples`, computing MRI embeddings as needed.
    pub fn feature_rows(&self, samples: &[&Sample]) -> Result<Vec<Vec<f64>>, ExplainError> {
        let use_mri = self.model.config().modality.use_mri;
        let embeddings: Vec<Vec<f64>> = if use_mri {
            let mut out = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(32) {
                let rows = chunk
                    .iter()
                    .map(|s| s.patches.as_deref().map(Vec::as_slice).ok_or(ModelError::MissingInput("volume")))
                    .collect::<Result<Vec<_>, _>>()?;
                let p = patch_batch(&rows, &self.model.config().backbone, self.model.device())?;
                let e = self.model.embed_mri(&p)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
                out.extend(e);
            }
            out
        } else {
            vec![Vec::new(); samples.len()]
        };
        Ok(samples
            .iter()
            .zip(embeddings)
            .map(|(s, e)| {
                let mut row = if self.clinical_width() > 0 { s.features.0.to_vec() } else { Vec::new() };
                row.extend(e);
                row
            })
            .collect())
    }
}

impl ValueModel for ModelValue<'_> {
    fn num_features(&self) -> usize {
        self.clinical_width() + self.model.embedding_dim()
    }

    fn evaluate(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, ExplainError> {
        let c = self.clinical_width();
        let d = self.model.embedding_dim();
        let dev = self.model.device();
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(4096) {
            let n = chunk.len();
            let clinical = (c > 0)
                .then(|| {
                    let v: Vec<f32> = chunk.iter().flat_map(|r| r[..c].iter().map(|&x| x as f32)).collect();
                    Tensor::from_vec(v, (n, c), dev)
                })
                .transpose()?;
            let embedding = (d > 0)
                .then(|| {
                    let v: Vec<f32> = chunk.iter().flat_map(|r| r[c..].iter().map(|&x| x as f32)).collect();
                    Tensor::from_vec(v, (n, d), dev)
                })
                .transpose()?;
            let y = self
                .model
                .fuse(embedding.as_ref(), clinical.as_ref())?
                .narrow(1, self.target, 1)?
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            out.extend(y);
        }
        Ok(out)
    }
}

/// Attributions of `config.target_output` for each explained sample.
pub fn shapley_attribution(
    model: &MtlModel,
    explained: &[&Sample],
    background: &[&Sample],
    config: &AttributionConfig,
) -> Result<Vec<Attribution>, ExplainError> {
    config.validate()?;
    let value = ModelValue::new(model, config.target_output);
    let groups = value.default_groups();
    let bg = value.feature_rows(background)?;
    let rows = value.feature_rows(explained)?;
    explained
        .iter()
        .zip(rows)
        .map(|(s, x)| {
            let (base, phi, pred) =
                shapley_values(&value, &x, &bg, &groups, config.mode, config.num_permutations, config.seed)?;
            Ok(Attribution {
                explained_sample: s.subject_id.clone(),
                target_output: config.target_output,
                mode: config.mode,
                group_names: groups.iter().map(|g| g.name.clone()).collect(),
                shapley_values: phi,
                base_value: base,
                prediction: pred,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub group: String,
    pub mean_abs_shapley: f64,
}

/// Groups ranked by mean absolute attribution, ties by name.
pub fn importance_summary(attributions: &[Attribution]) -> Result<Vec<ImportanceEntry>, ExplainError> {
    let first = attributions
        .first()
        .ok_or_else(|| ExplainError::Config("no attributions to summarize".into()))?;
    if attributions.iter().any(|a| a.group_names != first.group_names) {
        return Err(ExplainError::MixedGroupings);
    }
    let n = attributions.len() as f64;
    let mut entries: Vec<ImportanceEntry> = first
        .group_names
        .iter()
        .enumerate()
        .map(|(g, name)| ImportanceEntry {
            group: name.clone(),
            mean_abs_shapley: attributions.iter().map(|a| a.shapley_values[g].abs()).sum::<f64>() / n,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.mean_abs_shapley
            .total_cmp(&a.mean_abs_shapley)
            .then_with(|| a.group.cmp(&b.group))
    });
    Ok(entries)
}

/// `rank,group,mean_abs_shapley` rows.
pub fn write_importance_csv<W: Write>(writer: W, entries: &[ImportanceEntry], target_output: usize) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rank", "group", "mean_abs_shapley", "target_output"])?;
    for (k, e) in entries.iter().enumerate() {
        w.write_record([
            (k + 1).to_string(),
            e.group.clone(),
            e.mean_abs_shapley.to_string(),
            output_name(target_output),
        ])?;
    }
    w.flush()?;
    Ok(())
}
