//! Rigid (6 degree-of-freedom) registration by maximizing normalized
//! cross-correlation with a coarse-to-fine compass search.

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{ImagingError, Volume};

/// Rotation (Euler angles about x, y, z in radians, applied x first) about the
/// centre of the fixed grid, followed by a translation in mm.
///
/// The transform maps moving-image content onto the fixed image: a structure at
/// `p` in the moving scan appears at `apply(p)` after resampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    /// Angles are wrapped into (-pi, pi].
    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        RigidTransform {
            rotation: rotation.map(wrap_angle),
            translation,
        }
    }

    fn from_parts(r: Rotation3<f64>, t: Vector3<f64>) -> Self {
        let (rx, ry, rz) = r.euler_angles();
        Self::new([rx, ry, rz], [t.x, t.y, t.z])
    }

    pub fn rotation_matrix(&self) -> Rotation3<f64> {
        let [rx, ry, rz] = self.rotation;
        Rotation3::from_euler_angles(rx, ry, rz)
    }

    fn t(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        let r2 = self.rotation_matrix();
        Self::from_parts(r2 * first.rotation_matrix(), r2 * first.t() + self.t())
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation_matrix().inverse();
        Self::from_parts(rt, -(rt * self.t()))
    }

    /// Maps a physical point given the rotation centre.
    pub fn apply(&self, p: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let c = Vector3::from(center);
        let q = self.rotation_matrix() * (Vector3::from(p) - c) + c + self.t();
        [q.x, q.y, q.z]
    }

    /// Largest absolute Euler angle.
    pub fn max_angle(&self) -> f64 {
        self.rotation.iter().fold(0.0f64, |m, a| m.max(a.abs()))
    }

    fn from_params(p: [f64; 6]) -> Self {
        Self::new([p[3], p[4], p[5]], [p[0], p[1], p[2]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub pyramid_levels: usize,
    /// Compass-search sweeps allowed per pyramid level.
    pub max_iterations: usize,
    /// Finest pyramid level optimized (0 = full resolution). The result is
    /// always resampled at full resolution.
    pub finest_level: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            pyramid_levels: 3,
            max_iterations: 60,
            finest_level: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub volume: Volume,
    pub transform: RigidTransform,
    pub converged: bool,
    pub ncc: f64,
}

/// Affine map from fixed voxel index to moving voxel index for `transform`.
fn index_map(
    moving: &Volume,
    fixed: &Volume,
    transform: &RigidTransform,
    center: [f64; 3],
) -> (Matrix3<f64>, Vector3<f64>) {
    let rt = transform.rotation_matrix().inverse();
    let dm_inv = Matrix3::from_diagonal(&Vector3::from(moving.spacing().map(|s| 1.0 / s)));
    let df = Matrix3::from_diagonal(&Vector3::from(fixed.spacing()));
    let c = Vector3::from(center);
    let a = dm_inv * rt.matrix() * df;
    let b = dm_inv
        * (rt * (Vector3::from(fixed.origin()) - c - transform.t()) + c - Vector3::from(moving.origin()));
    (a, b)
}

fn for_each_sample(
    moving: &Volume,
    fixed: &Volume,
    transform: &RigidTransform,
    center: [f64; 3],
    mut f: impl FnMut([usize; 3], f64),
) {
    let (a, b) = index_map(moving, fixed, transform, center);
    let [nx, ny, nz] = fixed.shape();
    for x in 0..nx {
        for y in 0..ny {
            let row = a * Vector3::new(x as f64, y as f64, 0.0) + b;
            let dz = a.column(2);
            for z in 0..nz {
                let p = row + dz * z as f64;
                f([x, y, z], moving.sample([p.x, p.y, p.z]));
            }
        }
    }
}

/// Resamples `moving` onto the grid of `fixed` through `transform` (trilinear,
/// zero outside). The rotation centre is the centre of the fixed grid.
pub fn resample(moving: &Volume, fixed: &Volume, transform: &RigidTransform) -> Volume {
    let mut out = Array3::zeros(fixed.voxels().dim());
    for_each_sample(moving, fixed, transform, fixed.center_mm(), |[x, y, z], v| {
        out[[x, y, z]] = v;
    });
    let mut vol = fixed.with_voxels(out);
    vol.subject_id = moving.subject_id.clone();
    vol
}

fn ncc_at(moving: &Volume, fixed: &Volume, transform: &RigidTransform, center: [f64; 3]) -> f64 {
    let fv = fixed.voxels();
    let (mut sf, mut sm, mut sff, mut smm, mut sfm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for_each_sample(moving, fixed, transform, center, |[x, y, z], m| {
        let f = fv[[x, y, z]];
        sf += f;
        sm += m;
        sff += f * f;
        smm += m * m;
        sfm += f * m;
    });
    let n = fixed.len() as f64;
    let cov = sfm - sf * sm / n;
    let vf = sff - sf * sf / n;
    let vm = smm - sm * sm / n;
    if vf <= 0.0 || vm <= 0.0 {
        return 0.0;
    }
    cov / (vf * vm).sqrt()
}

/// Normalized cross-correlation between `fixed` and `moving` resampled through `transform`.
pub fn ncc(moving: &Volume, fixed: &Volume, transform: &RigidTransform) -> f64 {
    ncc_at(moving, fixed, transform, fixed.center_mm())
}

fn center_of_mass(v: &Volume) -> Option<[f64; 3]> {
    let (sp, o) = (v.spacing(), v.origin());
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for ((x, y, z), &w) in v.voxels().indexed_iter() {
        let w = w.max(0.0);
        total += w;
        acc[0] += w * x as f64;
        acc[1] += w * y as f64;
        acc[2] += w * z as f64;
    }
    (total > 0.0).then(|| std::array::from_fn(|a| o[a] + sp[a] * acc[a] / total))
}

fn pyramid(v: &Volume, levels: usize) -> Vec<Volume> {
    let mut out = vec![v.clone()];
    for _ in 1..levels {
        let next = out.last().unwrap().downsample2();
        out.push(next);
    }
    out
}

/// Aligns `moving` to `fixed`. Parameters start from centre-of-mass alignment and
/// are refined level by level from the coarsest pyramid level; the step sizes halve
/// whenever no single-parameter move improves the correlation.
pub fn register_rigid(
    moving: &Volume,
    fixed: &Volume,
    config: &RegistrationConfig,
) -> Result<RegistrationResult, ImagingError> {
    if config.pyramid_levels == 0 || config.max_iterations == 0 {
        return Err(ImagingError::InvalidConfig(
            "pyramid_levels and max_iterations must be at least 1".into(),
        ));
    }
    if config.finest_level >= config.pyramid_levels {
        return Err(ImagingError::InvalidConfig(format!(
            "finest_level {} must be below pyramid_levels {}",
            config.finest_level, config.pyramid_levels
        )));
    }
    let center = fixed.center_mm();
    let fixed_pyr = pyramid(fixed, config.pyramid_levels);
    let moving_pyr = pyramid(moving, config.pyramid_levels);

    let mut params = [0.0; 6];
    if let (Some(cf), Some(cm)) = (center_of_mass(fixed), center_of_mass(moving)) {
        for a in 0..3 {
            params[a] = cf[a] - cm[a];
        }
    }
    let coarsest = config.pyramid_levels - 1;
    let mut converged = true;
    let mut best = f64::NEG_INFINITY;

    for level in (config.finest_level..config.pyramid_levels).rev() {
        let (f, m) = (&fixed_pyr[level], &moving_pyr[level]);
        let vox = f.spacing().iter().cloned().fold(0.0, f64::max);
        let finer = (coarsest - level) as i32;
        let mut steps = [vox, vox, vox, 0.05, 0.05, 0.05];
        for r in &mut steps[3..] {
            *r *= 0.5f64.powi(finer);
        }
        let tol = [0.05 * vox, 0.05 * vox, 0.05 * vox, 5e-4, 5e-4, 5e-4];
        let eval = |p: &[f64; 6]| ncc_at(m, f, &RigidTransform::from_params(*p), center);
        best = eval(&params);
        let mut level_converged = false;
        for _ in 0..config.max_iterations {
            let mut improved = false;
            for k in 0..6 {
                for sign in [1.0, -1.0] {
                    let mut trial = params;
                    trial[k] += sign * steps[k];
                    let score = eval(&trial);
                    if score > best + 1e-12 {
                        best = score;
                        params = trial;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                for s in &mut steps {
                    *s *= 0.5;
                }
                if steps.iter().zip(&tol).all(|(s, t)| s < t) {
                    level_converged = true;
                    break;
                }
            }
        }
        converged &= level_converged;
        if level == coarsest && best < 0.0 {
            return Err(ImagingError::RegistrationFailed(best));
        }
    }

    let transform = RigidTransform::from_params(params);
    Ok(RegistrationResult {
        volume: resample(moving, fixed, &transform),
        transform,
        converged,
        ncc: best,
    })
}
