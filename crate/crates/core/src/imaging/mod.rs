//! Volume I/O and preprocessing: rigid registration to a reference grid,
//! log-domain bias-field removal and per-scan min-max intensity scaling.

mod bias;
mod nifti;
mod registration;

use ndarray::{s, Array3, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bias::{correct_bias_field, foreground_cv, foreground_mask, gaussian_smooth, FOREGROUND_FRACTION};
pub use nifti::{load_volume, read_volume, save_volume, save_volume_as, write_volume, VoxelType};
pub use registration::{
    ncc, register_rigid, resample, RegistrationConfig, RegistrationResult, RigidTransform,
};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("voxel values must be finite")]
    NonFinite,
    #[error("voxel spacing must be positive, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("voxel grid shape does not match data length")]
    ShapeMismatch,
    #[error("malformed volume header: {0}")]
    Malformed(String),
    #[error("unsupported volume shape: {0}")]
    UnsupportedShape(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("bias correction requires non-negative intensities (min {0})")]
    NegativeIntensity(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("registration failed: normalized cross-correlation {0:.4} after coarse search")]
    RegistrationFailed(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single-channel 3D scan. Axis order is (x, y, z); spacing and origin are in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    voxels: Array3<f64>,
    spacing: [f64; 3],
    origin: [f64; 3],
    pub subject_id: Option<String>,
}

impl Volume {
    pub fn new(voxels: Array3<f64>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, ImagingError> {
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(ImagingError::InvalidSpacing(spacing));
        }
        if !voxels.iter().all(|v| v.is_finite()) || !origin.iter().all(|o| o.is_finite()) {
            return Err(ImagingError::NonFinite);
        }
        Ok(Volume {
            voxels,
            spacing,
            origin,
            subject_id: None,
        })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self, ImagingError> {
        Self::new(Array3::zeros(shape), spacing, [0.0; 3])
    }

    pub fn with_subject(mut self, id: impl Into<String>) -> Self {
        self.subject_id = Some(id.into());
        self
    }

    pub fn voxels(&self) -> &Array3<f64> {
        &self.voxels
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.voxels.dim();
        [d.0, d.1, d.2]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Returns a copy with new voxel data on the same grid. Values must stay finite.
    pub(crate) fn with_voxels(&self, voxels: Array3<f64>) -> Volume {
        debug_assert_eq!(voxels.dim(), self.voxels.dim());
        Volume {
            voxels,
            spacing: self.spacing,
            origin: self.origin,
            subject_id: self.subject_id.clone(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.voxels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.voxels.mean().unwrap_or(0.0)
    }

    /// Voxel index of the maximum value (first in memory order on ties).
    pub fn argmax(&self) -> [usize; 3] {
        let mut best = (f64::NEG_INFINITY, [0; 3]);
        for ((x, y, z), &v) in self.voxels.indexed_iter() {
            if v > best.0 {
                best = (v, [x, y, z]);
            }
        }
        best.1
    }

    /// Physical position (mm) of the centre of the voxel grid.
    pub fn center_mm(&self) -> [f64; 3] {
        let sh = self.shape();
        std::array::from_fn(|a| self.origin[a] + 0.5 * (sh[a] as f64 - 1.0) * self.spacing[a])
    }

    /// Trilinear interpolation at a continuous voxel index; samples outside the grid are 0.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let sh = self.shape();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if !(p[a] > -1.0 && p[a] < sh[a] as f64) {
                return 0.0;
            }
            let f = p[a].floor();
            // -1 wraps to usize::MAX; wrapping_add(1) brings it back to 0.
            base[a] = f as isize as usize;
            frac[a] = p[a] - f;
        }
        let get = |dx: usize, dy: usize, dz: usize| -> f64 {
            let ix = base[0].wrapping_add(dx);
            let iy = base[1].wrapping_add(dy);
            let iz = base[2].wrapping_add(dz);
            if ix < sh[0] && iy < sh[1] && iz < sh[2] {
                self.voxels[[ix, iy, iz]]
            } else {
                0.0
            }
        };
        let [fx, fy, fz] = frac;
        let c00 = get(0, 0, 0) * (1.0 - fx) + get(1, 0, 0) * fx;
        let c10 = get(0, 1, 0) * (1.0 - fx) + get(1, 1, 0) * fx;
        let c01 = get(0, 0, 1) * (1.0 - fx) + get(1, 0, 1) * fx;
        let c11 = get(0, 1, 1) * (1.0 - fx) + get(1, 1, 1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    /// 2x block-average downsampling; odd trailing planes are dropped.
    pub fn downsample2(&self) -> Volume {
        let sh = self.shape();
        let half = [(sh[0] / 2).max(1), (sh[1] / 2).max(1), (sh[2] / 2).max(1)];
        let mut out = Array3::zeros(half);
        for ((x, y, z), o) in out.indexed_iter_mut() {
            let block = self.voxels.slice(s![
                2 * x..(2 * x + 2).min(sh[0]),
                2 * y..(2 * y + 2).min(sh[1]),
                2 * z..(2 * z + 2).min(sh[2])
            ]);
            *o = block.mean().unwrap_or(0.0);
        }
        let spacing = std::array::from_fn(|a| if sh[a] >= 2 { 2.0 * self.spacing[a] } else { self.spacing[a] });
        let origin = std::array::from_fn(|a| {
            if sh[a] >= 2 {
                self.origin[a] + 0.5 * self.spacing[a]
            } else {
                self.origin[a]
            }
        });
        Volume {
            voxels: out,
            spacing,
            origin,
            subject_id: self.subject_id.clone(),
        }
    }

    /// Voxel values as `f32`, x-major then y then z (row-major over the (x, y, z) grid).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.voxels.iter().map(|&v| v as f32).collect()
    }
}

/// Result of [`normalize_intensity`]; `degenerate` is set for constant input.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub volume: Volume,
    pub degenerate: bool,
}

/// Per-scan min-max scaling to [0, 1]. A constant volume maps to all zeros and
/// is flagged as degenerate.
pub fn normalize_intensity(volume: &Volume) -> Normalized {
    let (lo, hi) = volume.min_max();
    if volume.is_empty() || hi <= lo {
        if !volume.is_empty() {
            log::warn!("normalize_intensity: constant volume, emitting zeros");
        }
        return Normalized {
            volume: volume.with_voxels(Array3::zeros(volume.voxels.dim())),
            degenerate: true,
        };
    }
    let range = hi - lo;
    let mut out = volume.voxels.clone();
    Zip::from(&mut out).for_each(|v| *v = (*v - lo) / range);
    Normalized {
        volume: volume.with_voxels(out),
        degenerate: false,
    }
}

/// Settings for the per-scan preprocessing chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub register: bool,
    pub registration: RegistrationConfig,
    pub bias_correction: bool,
    /// Gaussian sigma (mm) of the smooth log-domain field estimate.
    pub bias_smoothing_mm: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            register: true,
            registration: RegistrationConfig::default(),
            bias_correction: true,
            bias_smoothing_mm: 24.0,
        }
    }
}

/// JSON sidecar written next to each preprocessed volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSidecar {
    pub transform: RigidTransform,
    pub converged: bool,
    pub cv_before: Option<f64>,
    pub cv_after: Option<f64>,
    pub degenerate: bool,
}

/// Registration to `reference` (when enabled), bias correction, then min-max scaling.
pub fn preprocess_volume(
    volume: &Volume,
    reference: Option<&Volume>,
    config: &PreprocessConfig,
) -> Result<(Volume, PreprocessSidecar), ImagingError> {
    let (registered, transform, converged) = match (config.register, reference) {
        (true, Some(fixed)) => {
            let r = register_rigid(volume, fixed, &config.registration)?;
            (r.volume, r.transform, r.converged)
        }
        (true, None) => {
            return Err(ImagingError::InvalidConfig(
                "registration enabled without a reference volume".into(),
            ))
        }
        (false, _) => (volume.clone(), RigidTransform::identity(), true),
    };
    // Registration can introduce tiny negative values through interpolation
    // round-off; clamp before the log-domain correction.
    let registered = registered.with_voxels(registered.voxels().mapv(|v| v.max(0.0)));
    let cv_before = foreground_cv(&registered);
    let corrected = if config.bias_correction {
        correct_bias_field(&registered, config.bias_smoothing_mm)?
    } else {
        registered
    };
    let cv_after = foreground_cv(&corrected);
    let Normalized { volume, degenerate } = normalize_intensity(&corrected);
    Ok((
        volume,
        PreprocessSidecar {
            transform,
            converged,
            cv_before,
            cv_after,
            degenerate,
        },
    ))
}
