//! Multi-task regression network: optional 3D transformer backbone over the
//! MRI volume, an affine clinical encoder, concatenation fusion, a shared
//! trunk and 14 single-layer heads (`heads.0` = global, `heads.j` = Qj).
//!
//! Inputs and outputs are in raw units. The model carries the feature and
//! target standardization fitted on its training set, so the trainable part
//! sees unit-scale data while losses are computed on the original scale.

mod checkpoint;
mod layers;
mod swin;
mod vit;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clinical::{FeatureVector, TargetVector, NUM_FEATURES, NUM_OUTPUTS};
use crate::imaging::Volume;
use crate::util::config_hash;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use swin::BLOCKS_PER_STAGE;

use layers::{f32_tensor, ParamStore};
use swin::Swin;
use vit::Vit;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration ({dimension}): {message}")]
    Config { dimension: String, message: String },
    #[error("missing {0} input for an enabled modality")]
    MissingInput(&'static str),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite values in parameter `{0}`")]
    NonFiniteParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_error(dimension: impl Into<String>, message: impl Into<String>) -> ModelError {
    ModelError::Config {
        dimension: dimension.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Vit,
    Swin,
    None,
}

impl BackboneKind {
    pub fn display_name(self) -> &'static str {
        match self {
            BackboneKind::Vit => "ViT",
            BackboneKind::Swin => "Swin Transformer",
            BackboneKind::None => "N/A",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    ClsToken,
}

/// Token grid, channel width and attention heads of one Swin stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub grid: [usize; 3],
    pub width: usize,
    pub heads: usize,
}

/// For `swin`, `depth` counts stages ([`BLOCKS_PER_STAGE`] blocks each) and
/// `embed_dim`/`num_heads` describe the first stage; both double at every merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub input_shape: [usize; 3],
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub pooling: Pooling,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::vit()
    }
}

impl BackboneConfig {
    pub fn vit() -> Self {
        BackboneConfig {
            kind: BackboneKind::Vit,
            input_shape: [64; 3],
            patch_size: 16,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            window_size: 4,
            mlp_ratio: 2.0,
            pooling: Pooling::Mean,
        }
    }

    pub fn swin() -> Self {
        BackboneConfig {
            kind: BackboneKind::Swin,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            num_heads: 2,
            ..Self::vit()
        }
    }

    pub fn none() -> Self {
        BackboneConfig {
            kind: BackboneKind::None,
            ..Self::vit()
        }
    }

    pub fn grid(&self) -> [usize; 3] {
        self.input_shape.map(|s| s / self.patch_size)
    }

    /// Patch tokens entering the backbone.
    pub fn token_count(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_size.pow(3)
    }

    pub fn stage_shapes(&self) -> Vec<StageShape> {
        let mut grid = self.grid();
        (0..self.depth)
            .map(|s| {
                let shape = StageShape {
                    grid,
                    width: self.embed_dim << s,
                    heads: self.num_heads << s,
                };
                grid = grid.map(|g| g / 2);
                shape
            })
            .collect()
    }

    /// Width of the pooled MRI embedding.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            BackboneKind::Swin => self.embed_dim << self.depth.saturating_sub(1),
            _ => self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 {
            return Err(config_error("embed_dim", "must be positive"));
        }
        if self.kind == BackboneKind::None {
            return Ok(());
        }
        if self.patch_size == 0 {
            return Err(config_error("patch_size", "must be positive"));
        }
        for (axis, &s) in self.input_shape.iter().enumerate() {
            if s == 0 || s % self.patch_size != 0 {
                return Err(config_error(
                    format!("input_shape[{axis}]"),
                    format!("{s} is not divisible by patch_size {}", self.patch_size),
                ));
            }
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(config_error(
                "num_heads",
                format!("embed_dim {} is not divisible by num_heads {}", self.embed_dim, self.num_heads),
            ));
        }
        if self.depth == 0 {
            return Err(config_error("depth", "must be positive"));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(config_error("mlp_ratio", "must be positive"));
        }
        if self.kind == BackboneKind::Swin {
            if self.pooling != Pooling::Mean {
                return Err(config_error("pooling", "swin supports mean pooling only"));
            }
            let w = self.window_size;
            if w == 0 {
                return Err(config_error("window_size", "must be positive"));
            }
            let shapes = self.stage_shapes();
            for (s, shape) in shapes.iter().enumerate() {
                for (axis, &g) in shape.grid.iter().enumerate() {
                    if g == 0 || g % w != 0 {
                        return Err(config_error(
                            format!("stage {s} grid[{axis}]"),
                            format!("{g} tokens are not divisible by window_size {w}"),
                        ));
                    }
                    if s + 1 < shapes.len() && g % 2 != 0 {
                        return Err(config_error(
                            format!("stage {s} grid[{axis}]"),
                            format!("{g} tokens cannot be merged in pairs"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub use_mri: bool,
    pub use_clinical: bool,
}

impl Default for ModalityConfig {
    fn default() -> Self {
        Self::combined()
    }
}

impl ModalityConfig {
    pub fn clinical_only() -> Self {
        ModalityConfig {
            use_mri: false,
            use_clinical: true,
        }
    }

    pub fn mri_only() -> Self {
        ModalityConfig {
            use_mri: true,
            use_clinical: false,
        }
    }

    pub fn combined() -> Self {
        ModalityConfig {
            use_mri: true,
            use_clinical: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.use_mri || self.use_clinical) {
            return Err(config_error("modality", "at least one modality must be enabled"));
        }
        Ok(())
    }

    /// Input-data label used in comparison tables.
    pub fn input_label(&self) -> &'static str {
        match (self.use_mri, self.use_clinical) {
            (false, _) => "ADAS-Cog clinical scores",
            (true, false) => "Baseline MRI",
            (true, true) => "Baseline MRI + ADAS-Cog clinical scores",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub modality: ModalityConfig,
    pub trunk_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            modality: ModalityConfig::default(),
            trunk_width: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.modality.validate()?;
        self.backbone.validate()?;
        if self.modality.use_mri && self.backbone.kind == BackboneKind::None {
            return Err(config_error("backbone.kind", "MRI input requires a vit or swin backbone"));
        }
        if self.trunk_width == 0 {
            return Err(config_error("trunk_width", "must be positive"));
        }
        Ok(())
    }

    /// Backbone actually instantiated, `None` when MRI is disabled.
    pub fn effective_backbone(&self) -> BackboneKind {
        if self.modality.use_mri {
            self.backbone.kind
        } else {
            BackboneKind::None
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Per-column affine standardization of clinical features and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

/// Columns with a smaller spread are left unscaled.
const MIN_STD: f64 = 1e-8;

impl Standardization {
    pub fn identity() -> Self {
        Standardization {
            feature_mean: vec![0.0; NUM_FEATURES],
            feature_std: vec![1.0; NUM_FEATURES],
            target_mean: vec![0.0; NUM_OUTPUTS],
            target_std: vec![1.0; NUM_OUTPUTS],
        }
    }

    pub fn fit(features: &[FeatureVector], targets: &[TargetVector]) -> Self {
        fn moments<const N: usize>(rows: impl Iterator<Item = [f64; N]> + Clone) -> (Vec<f64>, Vec<f64>) {
            let n = rows.clone().count();
            if n == 0 {
                return (vec![0.0; N], vec![1.0; N]);
            }
            let mut mean = vec![0.0; N];
            for r in rows.clone() {
                mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
            }
            let mut var = vec![0.0; N];
            for r in rows {
                var.iter_mut()
                    .zip(r)
                    .zip(&mean)
                    .for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
            }
            let std = var
                .into_iter()
                .map(|v| if v.sqrt() < MIN_STD { 1.0 } else { v.sqrt() })
                .collect();
            (mean, std)
        }
        let (feature_mean, feature_std) = moments(features.iter().map(|f| f.0));
        let (target_mean, target_std) = moments(targets.iter().map(|t| t.0));
        Standardization {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let ok = |v: &[f64], n: usize, positive: bool| {
            v.len() == n && v.iter().all(|x| x.is_finite() && (!positive || *x > 0.0))
        };
        if ok(&self.feature_mean, NUM_FEATURES, false)
            && ok(&self.feature_std, NUM_FEATURES, true)
            && ok(&self.target_mean, NUM_OUTPUTS, false)
            && ok(&self.target_std, NUM_OUTPUTS, true)
        {
            Ok(())
        } else {
            Err(config_error("standardization", "wrong length or non-finite/non-positive entries"))
        }
    }
}

struct StandardizationTensors {
    feature_mean: Tensor,
    feature_std: Tensor,
    target_mean: Tensor,
    target_std: Tensor,
}

impl StandardizationTensors {
    fn new(s: &Standardization, device: &Device) -> candle_core::Result<Self> {
        Ok(StandardizationTensors {
            feature_mean: f32_tensor(&s.feature_mean, &[1, NUM_FEATURES], device)?,
            feature_std: f32_tensor(&s.feature_std, &[1, NUM_FEATURES], device)?,
            target_mean: f32_tensor(&s.target_mean, &[1, NUM_OUTPUTS], device)?,
            target_std: f32_tensor(&s.target_std, &[1, NUM_OUTPUTS], device)?,
        })
    }
}

enum Backbone {
    Vit(Vit),
    Swin(Swin),
}

pub struct MtlModel {
    config: ModelConfig,
    store: ParamStore,
    backbone: Option<Backbone>,
    clinical_encoder: Option<Linear>,
    trunk: Linear,
    head_weights: Vec<Tensor>,
    head_biases: Vec<Tensor>,
    standardization: Standardization,
    norm: StandardizationTensors,
    device: Device,
}

/// Builds a model with deterministic initialization from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<MtlModel, ModelError> {
    config.validate()?;
    let device = Device::Cpu;
    let mut store = ParamStore::new(config.seed, device.clone());
    let modality = config.modality;
    let backbone = match config.effective_backbone() {
        BackboneKind::Vit => Some(Backbone::Vit(Vit::new(&mut store, &config.backbone)?)),
        BackboneKind::Swin => Some(Backbone::Swin(Swin::new(&mut store, &config.backbone, &device)?)),
        BackboneKind::None => None,
    };
    let d = config.backbone.embed_dim;
    let clinical_encoder = if modality.use_clinical {
        Some(store.linear("clinical_encoder", NUM_FEATURES, d, true)?)
    } else {
        None
    };
    let fused = modality.use_mri as usize * config.backbone.output_dim() + modality.use_clinical as usize * d;
    let trunk = store.linear("trunk", fused, config.trunk_width, true)?;
    let mut head_weights = Vec::with_capacity(NUM_OUTPUTS);
    let mut head_biases = Vec::with_capacity(NUM_OUTPUTS);
    for k in 0..NUM_OUTPUTS {
        let head = store.linear(&format!("heads.{k}"), config.trunk_width, 1, true)?;
        head_weights.push(head.weight().clone());
        head_biases.push(head.bias().expect("head has bias").clone());
    }
    let standardization = Standardization::identity();
    let norm = StandardizationTensors::new(&standardization, &device)?;
    let model = MtlModel {
        config: config.clone(),
        store,
        backbone,
        clinical_encoder,
        trunk,
        head_weights,
        head_biases,
        standardization,
        norm,
        device,
    };
    log::debug!(
        "built {:?} model with {} parameters",
        config.effective_backbone(),
        model.num_parameters()
    );
    Ok(model)
}

impl MtlModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn num_parameters(&self) -> usize {
        self.store.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.store.vars.keys().map(String::as_str)
    }

    pub fn parameter(&self, name: &str) -> Option<&Var> {
        self.store.vars.get(name)
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.store.vars.values().cloned().collect()
    }

    pub fn set_parameter(&self, name: &str, value: &Tensor) -> Result<(), ModelError> {
        let var = self
            .parameter(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(ModelError::Shape {
                what: "parameter",
                expected: var.dims().to_vec(),
                got: value.dims().to_vec(),
            });
        }
        var.set(&value.to_dtype(DType::F32)?)?;
        Ok(())
    }

    /// Deep copy of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>, ModelError> {
        self.store
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<(), ModelError> {
        for (name, value) in snapshot {
            self.set_parameter(name, value)?;
        }
        Ok(())
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn set_standardization(&mut self, s: Standardization) -> Result<(), ModelError> {
        s.validate()?;
        self.norm = StandardizationTensors::new(&s, &self.device)?;
        self.standardization = s;
        Ok(())
    }

    /// Width of the MRI embedding, 0 when MRI is disabled.
    pub fn embedding_dim(&self) -> usize {
        if self.config.modality.use_mri {
            self.config.backbone.output_dim()
        } else {
            0
        }
    }

    /// Fails with the name of the first parameter containing NaN or infinity.
    pub fn check_parameters(&self) -> Result<(), ModelError> {
        for (name, var) in &self.store.vars {
            let s = var.as_tensor().sum_all()?.to_scalar::<f32>()?;
            if !s.is_finite() {
                let values = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::NonFiniteParameter(name.clone()));
                }
            }
        }
        Ok(())
    }

    fn expect_patches(&self, patches: &Tensor) -> Result<(), ModelError> {
        let b = self.config.backbone.clone();
        let got = patches.dims();
        if got.len() != 3 || got[1] != b.token_count() || got[2] != b.patch_voxels() {
            return Err(ModelError::Shape {
                what: "patch batch",
                expected: vec![got.first().copied().unwrap_or(0), b.token_count(), b.patch_voxels()],
                got: got.to_vec(),
            });
        }
        Ok(())
    }

    /// Pooled MRI embedding `[batch, embedding_dim]` from a `[batch, tokens, patch³]` batch.
    pub fn embed_mri(&self, patches: &Tensor) -> Result<Tensor, ModelError> {
        self.expect_patches(patches)?;
        match &self.backbone {
            Some(Backbone::Vit(v)) => Ok(v.forward(patches)?),
            Some(Backbone::Swin(s)) => Ok(s.forward(patches)?),
            None => Err(config_error("modality.use_mri", "model has no imaging backbone")),
        }
    }

    /// Token sequence after the last ViT block (cls token excluded, final norm
    /// not applied), or the per-stage token tensors of a Swin backbone.
    pub fn backbone_tokens(&self, patches: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        self.expect_patches(patches)?;
        match &self.backbone {
            Some(Backbone::Vit(v)) => {
                let t = v.tokens(patches)?;
                let extra = t.dim(1)? - self.config.backbone.token_count();
                Ok(vec![t.narrow(1, extra, self.config.backbone.token_count())?])
            }
            Some(Backbone::Swin(s)) => Ok(s.stage_outputs(patches)?),
            None => Err(config_error("modality.use_mri", "model has no imaging backbone")),
        }
    }

    /// Raw-scale predictions `[batch, 14]`.
    pub fn forward(&self, patches: Option<&Tensor>, clinical: Option<&Tensor>) -> Result<Tensor, ModelError> {
        self.check_parameters()?;
        let embedding = if self.config.modality.use_mri {
            Some(self.embed_mri(patches.ok_or(ModelError::MissingInput("volume"))?)?)
        } else {
            None
        };
        self.fuse(embedding.as_ref(), clinical)
    }

    /// Regression part of the network, from an MRI embedding and raw clinical features.
    pub fn fuse(&self, embedding: Option<&Tensor>, clinical: Option<&Tensor>) -> Result<Tensor, ModelError> {
        let mut parts = Vec::with_capacity(2);
        if self.config.modality.use_mri {
            let e = embedding.ok_or(ModelError::MissingInput("volume"))?;
            if e.rank() != 2 || e.dim(1)? != self.embedding_dim() {
                return Err(ModelError::Shape {
                    what: "MRI embedding",
                    expected: vec![e.dims().first().copied().unwrap_or(0), self.embedding_dim()],
                    got: e.dims().to_vec(),
                });
            }
            parts.push(e.clone());
        }
        if let Some(encoder) = &self.clinical_encoder {
            let c = clinical.ok_or(ModelError::MissingInput("clinical"))?;
            if c.rank() != 2 || c.dim(1)? != NUM_FEATURES {
                return Err(ModelError::Shape {
                    what: "clinical batch",
                    expected: vec![c.dims().first().copied().unwrap_or(0), NUM_FEATURES],
                    got: c.dims().to_vec(),
                });
            }
            let z = c
                .to_dtype(DType::F32)?
                .broadcast_sub(&self.norm.feature_mean)?
                .broadcast_div(&self.norm.feature_std)?;
            parts.push(encoder.forward(&z)?);
        }
        let batch = parts[0].dim(0)?;
        if parts.iter().any(|p| p.dim(0).ok() != Some(batch)) {
            return Err(ModelError::Shape {
                what: "modality batch sizes",
                expected: vec![batch],
                got: parts.iter().map(|p| p.dim(0).unwrap_or(0)).collect(),
            });
        }
        let fused = Tensor::cat(&parts, 1)?;
        let h = self.trunk.forward(&fused)?.gelu_erf()?;
        let w = Tensor::cat(&self.head_weights, 0)?;
        let b = Tensor::cat(&self.head_biases, 0)?;
        let z = h.matmul(&w.t()?)?.broadcast_add(&b)?;
        Ok(z.broadcast_mul(&self.norm.target_std)?.broadcast_add(&self.norm.target_mean)?)
    }
}

/// Splits a volume into `patch³` blocks: rows in x-major grid order, voxels
/// within a block in x-major order.
pub fn patchify(volume: &Volume, backbone: &BackboneConfig) -> Result<Vec<f32>, ModelError> {
    if volume.shape() != backbone.input_shape {
        return Err(ModelError::Shape {
            what: "volume",
            expected: backbone.input_shape.to_vec(),
            got: volume.shape().to_vec(),
        });
    }
    let p = backbone.patch_size;
    let g = backbone.grid();
    let v = volume.voxels();
    let mut out = Vec::with_capacity(volume.len());
    for gx in 0..g[0] {
        for gy in 0..g[1] {
            for gz in 0..g[2] {
                for x in 0..p {
                    for y in 0..p {
                        for z in 0..p {
                            out.push(v[[gx * p + x, gy * p + y, gz * p + z]] as f32);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Stacks patchified volumes into a `[batch, tokens, patch³]` tensor.
pub fn patch_batch(rows: &[&[f32]], backbone: &BackboneConfig, device: &Device) -> Result<Tensor, ModelError> {
    let (n, p) = (backbone.token_count(), backbone.patch_voxels());
    let mut data = Vec::with_capacity(rows.len() * n * p);
    for r in rows {
        if r.len() != n * p {
            return Err(ModelError::Shape {
                what: "patch row",
                expected: vec![n * p],
                got: vec![r.len()],
            });
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::from_vec(data, (rows.len(), n, p), device)?)
}

/// Stacks clinical feature vectors into a `[batch, 26]` tensor.
pub fn clinical_batch(rows: &[&FeatureVector], device: &Device) -> Result<Tensor, ModelError> {
    let data: Vec<f32> = rows.iter().flat_map(|f| f.0.iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(data, (rows.len(), NUM_FEATURES), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn small_vit() -> BackboneConfig {
        BackboneConfig {
            input_shape: [16; 3],
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            ..BackboneConfig::vit()
        }
    }

    fn small_swin() -> BackboneConfig {
        BackboneConfig {
            input_shape: [32; 3],
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            window_size: 4,
            ..BackboneConfig::swin()
        }
    }

    fn rows(t: &Tensor) -> Vec<Vec<f32>> {
        t.to_vec2::<f32>().unwrap()
    }

    fn random_patches(cfg: &BackboneConfig, batch: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = batch * cfg.token_count() * cfg.patch_voxels();
        let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(data, (batch, cfg.token_count(), cfg.patch_voxels()), &Device::Cpu).unwrap()
    }

    #[test]
    fn divisibility_errors_name_the_dimension() {
        let mut c = BackboneConfig::vit();
        c.input_shape = [64, 60, 64];
        match c.validate() {
            Err(ModelError::Config { dimension, .. }) => assert_eq!(dimension, "input_shape[1]"),
            other => panic!("{other:?}"),
        }
        let mut c = BackboneConfig::vit();
        c.num_heads = 5;
        assert!(matches!(c.validate(), Err(ModelError::Config { dimension, .. }) if dimension == "num_heads"));
        let mut c = BackboneConfig::swin();
        c.depth = 3;
        assert!(matches!(c.validate(), Err(ModelError::Config { dimension, .. }) if dimension.starts_with("stage 2")));
        assert!(BackboneConfig::swin().validate().is_ok());
    }

    #[test]
    fn default_vit_has_64_tokens() {
        assert_eq!(BackboneConfig::vit().token_count(), 64);
    }

    #[test]
    fn modality_requirements() {
        let mut cfg = ModelConfig {
            modality: ModalityConfig {
                use_mri: false,
                use_clinical: false,
            },
            ..Default::default()
        };
        assert!(build_model(&cfg).is_err());
        cfg.modality = ModalityConfig::mri_only();
        cfg.backbone = BackboneConfig::none();
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig {
            backbone: small_vit(),
            seed: 3,
            ..Default::default()
        };
        let (a, b) = (build_model(&cfg).unwrap(), build_model(&cfg).unwrap());
        for name in a.parameter_names() {
            let va: Vec<f32> = a.parameter(name).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let vb: Vec<f32> = b.parameter(name).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(va, vb, "{name}");
        }
        let c = build_model(&ModelConfig { seed: 4, ..cfg }).unwrap();
        let w = |m: &MtlModel| m.parameter("trunk.weight").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(w(&a), w(&c));
    }

    #[test]
    fn clinical_only_model_ignores_volumes() {
        let cfg = ModelConfig {
            modality: ModalityConfig::clinical_only(),
            ..Default::default()
        };
        let model = build_model(&cfg).unwrap();
        assert_eq!(model.embedding_dim(), 0);
        let f = FeatureVector(std::array::from_fn(|i| i as f64 * 0.3));
        let c = clinical_batch(&[&f, &f], &Device::Cpu).unwrap();
        let out = model.forward(None, Some(&c)).unwrap();
        assert_eq!(out.dims(), &[2, NUM_OUTPUTS]);
        let r = rows(&out);
        assert_eq!(r[0], r[1]);
        assert!(matches!(model.forward(None, None), Err(ModelError::MissingInput("clinical"))));
    }

    #[test]
    fn mri_only_model_ignores_clinical() {
        let cfg = ModelConfig {
            backbone: small_vit(),
            modality: ModalityConfig::mri_only(),
            ..Default::default()
        };
        let model = build_model(&cfg).unwrap();
        let p = random_patches(&cfg.backbone, 2, 1);
        let f1 = FeatureVector([0.0; NUM_FEATURES]);
        let f2 = FeatureVector([5.0; NUM_FEATURES]);
        let a = model.forward(Some(&p), Some(&clinical_batch(&[&f1, &f1], &Device::Cpu).unwrap())).unwrap();
        let b = model.forward(Some(&p), Some(&clinical_batch(&[&f2, &f2], &Device::Cpu).unwrap())).unwrap();
        assert_eq!(rows(&a), rows(&b));
        assert!(matches!(model.forward(None, None), Err(ModelError::MissingInput("volume"))));
    }

    #[test]
    fn embedding_is_batch_equivariant() {
        for backbone in [small_vit(), small_swin()] {
            let cfg = ModelConfig {
                backbone,
                ..Default::default()
            };
            let model = build_model(&cfg).unwrap();
            let p = random_patches(&cfg.backbone, 3, 9);
            let e = rows(&model.embed_mri(&p).unwrap());
            assert_eq!(e.len(), 3);
            assert_eq!(e[0].len(), cfg.backbone.output_dim());
            let idx = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
            let swapped = rows(&model.embed_mri(&p.index_select(&idx, 0).unwrap()).unwrap());
            for (k, &src) in [2usize, 0, 1].iter().enumerate() {
                for (a, b) in swapped[k].iter().zip(&e[src]) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn swin_stages_halve_grid_and_double_width() {
        let cfg = ModelConfig {
            backbone: small_swin(),
            modality: ModalityConfig::mri_only(),
            ..Default::default()
        };
        let model = build_model(&cfg).unwrap();
        let stages = model.backbone_tokens(&random_patches(&cfg.backbone, 1, 2)).unwrap();
        let dims: Vec<Vec<usize>> = stages.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![1, 512, 8], vec![1, 64, 16]]);
    }

    #[test]
    fn patchify_layout() {
        let cfg = BackboneConfig {
            input_shape: [4, 4, 2],
            patch_size: 2,
            ..BackboneConfig::vit()
        };
        let vox = Array3::from_shape_fn((4, 4, 2), |(x, y, z)| (x * 100 + y * 10 + z) as f64);
        let v = Volume::new(vox, [1.0; 3], [0.0; 3]).unwrap();
        let p = patchify(&v, &cfg).unwrap();
        assert_eq!(p.len(), 32);
        assert_eq!(&p[..8], &[0.0, 1.0, 10.0, 11.0, 100.0, 101.0, 110.0, 111.0]);
        // second token is grid cell (0, 1, 0)
        assert_eq!(p[8], 20.0);
    }

    #[test]
    fn nan_parameter_is_reported_by_path() {
        let cfg = ModelConfig {
            modality: ModalityConfig::clinical_only(),
            ..Default::default()
        };
        let model = build_model(&cfg).unwrap();
        let w = model.parameter("heads.3.bias").unwrap();
        model
            .set_parameter("heads.3.bias", &Tensor::new(&[f32::NAN], &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(w.dims(), &[1]);
        let c = clinical_batch(&[&FeatureVector([1.0; NUM_FEATURES])], &Device::Cpu).unwrap();
        match model.forward(None, Some(&c)) {
            Err(ModelError::NonFiniteParameter(p)) => assert_eq!(p, "heads.3.bias"),
            other => panic!("{other:?}"),
        }
    }
}
