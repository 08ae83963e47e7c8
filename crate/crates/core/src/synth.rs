//! Deterministic generator of an ADNI-shaped synthetic cohort: clinical
//! trajectories over BL/M06/M24 and baseline phantom volumes whose bright
//! "hippocampal" region shrinks with the memory item scores.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clinical::{
    self, AdasCogAssessment, AdasItem, ClinicalError, Diagnosis, ItemRanges, Sex, SubjectRecord,
    Timepoint, INCLUSION_MAX_GLOBAL, NUM_ITEMS,
};
use crate::imaging::{self, ImagingError, Volume, VoxelType};
use crate::util::{mix_seed, sha256_file};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
    #[error("signal region (centre {center:?}, radius {radius}) does not fit in volume {shape:?}")]
    RegionOutOfBounds {
        center: [f64; 3],
        radius: f64,
        shape: [usize; 3],
    },
    #[error("subject {0} has no baseline assessment")]
    NoBaseline(String),
    #[error(transparent)]
    Clinical(#[from] ClinicalError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub const fn new(mean: f64, sd: f64) -> Self {
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub count: usize,
    /// Baseline global score distribution (points), clipped to [0, 20].
    pub baseline_global: MeanSd,
    pub age: MeanSd,
    pub male_fraction: f64,
    /// Expected change of the global score per year (points/year).
    pub drift_per_year: f64,
}

/// Cohort generation parameters. Group defaults follow the demographic table of
/// the ADNI-1 sample (AD 17, NC 203, MCI 215).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub ad: GroupSpec,
    pub nc: GroupSpec,
    pub mci: GroupSpec,
    /// SD of follow-up noise on the global score (points); apportioned to items
    /// by their share of the total range.
    pub noise_sd: f64,
    /// Dirichlet concentration of the item allocation; larger means closer to
    /// strictly proportional-to-maximum allocation.
    pub allocation_concentration: f64,
    pub item_ranges: ItemRanges,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            ad: GroupSpec {
                count: 17,
                baseline_global: MeanSd::new(17.1, 2.1),
                age: MeanSd::new(73.4, 8.3),
                male_fraction: 8.0 / 17.0,
                drift_per_year: 2.5,
            },
            nc: GroupSpec {
                count: 203,
                baseline_global: MeanSd::new(9.5, 4.2),
                age: MeanSd::new(76.0, 5.2),
                male_fraction: 102.0 / 203.0,
                drift_per_year: 0.2,
            },
            mci: GroupSpec {
                count: 215,
                baseline_global: MeanSd::new(14.5, 3.9),
                age: MeanSd::new(74.7, 7.5),
                male_fraction: 138.0 / 215.0,
                drift_per_year: 1.2,
            },
            noise_sd: 1.0,
            allocation_concentration: 40.0,
            item_ranges: ItemRanges::default(),
            seed: 20240917,
        }
    }
}

impl CohortSpec {
    /// Groups in generation order.
    pub fn groups(&self) -> [(Diagnosis, &GroupSpec); 3] {
        [
            (Diagnosis::AD, &self.ad),
            (Diagnosis::NC, &self.nc),
            (Diagnosis::MCI, &self.mci),
        ]
    }

    pub fn total(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.count).sum()
    }

    /// Same distributions with every group count multiplied by `fraction`
    /// (rounded, at least 2 per non-empty group).
    pub fn scaled(&self, fraction: f64) -> CohortSpec {
        let mut out = self.clone();
        for g in [&mut out.ad, &mut out.nc, &mut out.mci] {
            if g.count > 0 {
                g.count = ((g.count as f64 * fraction).round() as usize).max(2);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        for (dx, g) in self.groups() {
            if !(g.baseline_global.sd >= 0.0 && g.age.sd >= 0.0) {
                return bad(format!("{dx}: standard deviations must be non-negative"));
            }
            if !(0.0..=1.0).contains(&g.male_fraction) {
                return bad(format!("{dx}: male_fraction must lie in [0, 1]"));
            }
            if !(g.drift_per_year.is_finite() && g.baseline_global.mean.is_finite()) {
                return bad(format!("{dx}: non-finite parameters"));
            }
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative".into());
        }
        if !(self.allocation_concentration > 0.0) {
            return bad("allocation_concentration must be positive".into());
        }
        Ok(())
    }
}

/// Spreads `global` points over the items: Dirichlet weights centred on each
/// item's share of the total range, then clipping at the item maxima with the
/// excess handed to items that still have headroom. The items sum to `global`.
fn allocate_items<R: Rng>(
    global: f64,
    ranges: &ItemRanges,
    concentration: f64,
    rng: &mut R,
) -> [f64; NUM_ITEMS] {
    let total = ranges.total();
    let mut weights = [0.0; NUM_ITEMS];
    for (w, max) in weights.iter_mut().zip(ranges.maxima()) {
        let shape = concentration * max / total;
        *w = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    }
    let wsum: f64 = weights.iter().sum();
    let mut items = weights.map(|w| if wsum > 0.0 { global * w / wsum } else { 0.0 });
    let maxima = ranges.maxima();
    for _ in 0..4 * NUM_ITEMS {
        let mut excess = 0.0;
        for (v, m) in items.iter_mut().zip(maxima) {
            if *v > *m {
                excess += *v - *m;
                *v = *m;
            }
        }
        if excess <= 0.0 {
            break;
        }
        let headroom: f64 = items.iter().zip(maxima).map(|(v, m)| m - v).sum();
        if headroom <= 0.0 {
            break;
        }
        for (v, m) in items.iter_mut().zip(maxima) {
            *v += excess * (m - *v) / headroom;
        }
    }
    items.map(|v| v.max(0.0))
}

/// Generates the cohort. Subjects are ordered AD, NC, MCI with ids `SYN0000`,
/// `SYN0001`, ...; every subject has BL, M06 and M24 assessments.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<SubjectRecord>, SynthError> {
    spec.validate()?;
    let ranges = &spec.item_ranges;
    let shares: Vec<f64> = ranges.maxima().iter().map(|m| m / ranges.total()).collect();
    let mut cohort = Vec::with_capacity(spec.total());
    let mut index = 0u64;
    for (gi, (diagnosis, group)) in spec.groups().into_iter().enumerate() {
        let mut group_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1 << 40 | gi as u64));
        let males = (group.male_fraction * group.count as f64).round() as usize;
        let mut sexes: Vec<Sex> = (0..group.count)
            .map(|i| if i < males { Sex::M } else { Sex::F })
            .collect();
        sexes.shuffle(&mut group_rng);

        let global_dist = Normal::new(group.baseline_global.mean, group.baseline_global.sd)
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        let age_dist = Normal::new(group.age.mean, group.age.sd)
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;

        for sex in sexes {
            let subject_id = format!("SYN{index:04}");
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index));
            index += 1;
            let age = age_dist.sample(&mut rng);
            let g0 = global_dist.sample(&mut rng).clamp(0.0, INCLUSION_MAX_GLOBAL);
            let baseline = allocate_items(g0, ranges, spec.allocation_concentration, &mut rng);

            let mut assessments = BTreeMap::new();
            assessments.insert(
                Timepoint::BL,
                AdasCogAssessment::new(subject_id.clone(), Timepoint::BL, baseline, ranges)?,
            );
            for tp in [Timepoint::M06, Timepoint::M24] {
                let drift = group.drift_per_year * tp.years();
                let mut items = baseline;
                for (j, v) in items.iter_mut().enumerate() {
                    let noise = if spec.noise_sd > 0.0 {
                        let sd = spec.noise_sd * shares[j].sqrt();
                        Normal::new(0.0, sd).expect("finite sd").sample(&mut rng)
                    } else {
                        0.0
                    };
                    *v = (*v + drift * shares[j] + noise).clamp(0.0, ranges.maxima()[j]);
                }
                assessments.insert(
                    tp,
                    AdasCogAssessment::new(subject_id.clone(), tp, items, ranges)?,
                );
            }
            cohort.push(SubjectRecord {
                subject_id,
                diagnosis,
                age,
                sex,
                assessments,
                mri_path: None,
            });
        }
    }
    Ok(cohort)
}

/// Where and how strongly memory scores are planted into the phantom volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub signal_items: Vec<AdasItem>,
    /// Region centre in voxel coordinates.
    pub region_center: [f64; 3],
    /// Region radius (voxels) for a subject scoring 0 on every signal item.
    pub region_radius_base: f64,
    /// Radius reduction (voxels) per point of mean signal-item score.
    pub atrophy_gain: f64,
}

impl SignalPlan {
    /// Default plan for a grid: Q1/Q4/Q8, centred, base radius a quarter of the
    /// smallest extent, gain a tenth of the base radius per point.
    pub fn for_shape(shape: [usize; 3]) -> Self {
        let min = *shape.iter().min().unwrap_or(&0) as f64;
        let base = min / 4.0;
        SignalPlan {
            signal_items: vec![AdasItem::Q1, AdasItem::Q4, AdasItem::Q8],
            region_center: shape.map(|n| (n as f64 - 1.0) / 2.0),
            region_radius_base: base,
            atrophy_gain: base / 10.0,
        }
    }

    fn check(&self, shape: [usize; 3]) -> Result<(), SynthError> {
        if self.signal_items.is_empty() {
            return Err(SynthError::InvalidSpec("signal_items must not be empty".into()));
        }
        if !(self.region_radius_base >= 1.0 && self.atrophy_gain >= 0.0) {
            return Err(SynthError::InvalidSpec(
                "region_radius_base must be >= 1 and atrophy_gain >= 0".into(),
            ));
        }
        let fits = (0..3).all(|a| {
            let c = self.region_center[a];
            c - self.region_radius_base >= 0.0 && c + self.region_radius_base <= shape[a] as f64 - 1.0
        });
        if !fits {
            return Err(SynthError::RegionOutOfBounds {
                center: self.region_center,
                radius: self.region_radius_base,
                shape,
            });
        }
        Ok(())
    }

    /// Region radius for a baseline assessment, floored at one voxel.
    pub fn radius_for(&self, baseline: &AdasCogAssessment) -> f64 {
        let mean = self.signal_items.iter().map(|i| baseline.item(*i)).sum::<f64>()
            / self.signal_items.len() as f64;
        (self.region_radius_base - self.atrophy_gain * mean).max(1.0)
    }
}

/// Appearance of the phantom volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub tissue_intensity: f64,
    pub region_intensity: f64,
    pub noise_sd: f64,
    /// Half-range of a linear multiplicative gain field (0 disables it).
    pub gain_amplitude: f64,
    /// Maximum random whole-head shift per axis (voxels).
    pub jitter_voxels: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64, 64, 64],
            spacing_mm: [2.0; 3],
            tissue_intensity: 0.4,
            region_intensity: 1.0,
            noise_sd: 0.04,
            gain_amplitude: 0.0,
            jitter_voxels: 0.0,
        }
    }
}

fn paint(
    spec: &PhantomSpec,
    radius: f64,
    center: [f64; 3],
    shift: [f64; 3],
    mut noise: impl FnMut() -> f64,
) -> Array3<f64> {
    let sh = spec.shape;
    let grid_center = sh.map(|n| (n as f64 - 1.0) / 2.0);
    let semi = sh.map(|n| 0.42 * n as f64);
    let amp = spec.gain_amplitude;
    Array3::from_shape_fn(sh, |(x, y, z)| {
        let p = [x as f64 - shift[0], y as f64 - shift[1], z as f64 - shift[2]];
        let e: f64 = (0..3).map(|a| ((p[a] - grid_center[a]) / semi[a]).powi(2)).sum();
        if e > 1.0 {
            return 0.0;
        }
        let d = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>().sqrt();
        let w = (radius + 0.5 - d).clamp(0.0, 1.0);
        let base = spec.tissue_intensity * (1.0 - w) + spec.region_intensity * w;
        let gain = if amp != 0.0 {
            let u = (0..3).map(|a| (p[a] - grid_center[a]) / semi[a]).sum::<f64>() / 3.0;
            1.0 + amp * u
        } else {
            1.0
        };
        ((base + noise()) * gain).max(0.0)
    })
}

fn phantom_volume(spec: &PhantomSpec, data: Array3<f64>) -> Result<Volume, SynthError> {
    Ok(Volume::new(data, spec.spacing_mm, [0.0; 3])?)
}

/// Baseline phantom for one subject. Deterministic in (subject, plan, spec, seed).
pub fn generate_volume(
    subject: &SubjectRecord,
    plan: &SignalPlan,
    spec: &PhantomSpec,
    seed: u64,
) -> Result<Volume, SynthError> {
    plan.check(spec.shape)?;
    let baseline = subject
        .assessments
        .get(&Timepoint::BL)
        .ok_or_else(|| SynthError::NoBaseline(subject.subject_id.clone()))?;
    let radius = plan.radius_for(baseline);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, crate::util::fnv1a(&subject.subject_id)));
    let shift = if spec.jitter_voxels > 0.0 {
        std::array::from_fn(|_| rng.random_range(-spec.jitter_voxels..=spec.jitter_voxels))
    } else {
        [0.0; 3]
    };
    let dist = Normal::new(0.0, spec.noise_sd.max(0.0)).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let data = paint(spec, radius, plan.region_center, shift, || dist.sample(&mut rng));
    Ok(phantom_volume(spec, data)?.with_subject(subject.subject_id.clone()))
}

/// Noise-free, gain-free, unshifted phantom with the full base radius; the
/// default registration reference.
pub fn template_volume(plan: &SignalPlan, spec: &PhantomSpec) -> Result<Volume, SynthError> {
    plan.check(spec.shape)?;
    let clean = PhantomSpec {
        gain_amplitude: 0.0,
        ..spec.clone()
    };
    let data = paint(&clean, plan.region_radius_base, plan.region_center, [0.0; 3], || 0.0);
    phantom_volume(spec, data)
}

/// File list entry of the synthetic dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub spec: CohortSpec,
    pub plan: SignalPlan,
    pub phantom: PhantomSpec,
    pub files: Vec<ManifestFile>,
}

/// Writes `clinical.csv`, one `volumes/<subject_id>.nii` per subject and
/// `manifest.json` into `dir`. Returns the cohort with `mri_path` filled in.
pub fn write_dataset(
    dir: &Path,
    spec: &CohortSpec,
    plan: &SignalPlan,
    phantom: &PhantomSpec,
) -> Result<(Vec<SubjectRecord>, SynthManifest), SynthError> {
    let mut cohort = generate_cohort(spec)?;
    std::fs::create_dir_all(dir.join("volumes"))?;
    let mut files = Vec::new();
    let csv_path = dir.join("clinical.csv");
    clinical::write_clinical_csv(std::fs::File::create(&csv_path)?, &cohort)?;
    files.push(PathBuf::from("clinical.csv"));
    for subject in &mut cohort {
        let volume = generate_volume(subject, plan, phantom, spec.seed)?;
        let rel = PathBuf::from("volumes").join(format!("{}.nii", subject.subject_id));
        imaging::save_volume_as(dir.join(&rel), &volume, VoxelType::Float32)?;
        subject.mri_path = Some(dir.join(&rel));
        files.push(rel);
    }
    let files = files
        .into_iter()
        .map(|rel| {
            Ok(ManifestFile {
                sha256: sha256_file(&dir.join(&rel))?,
                path: rel.to_string_lossy().into_owned(),
            })
        })
        .collect::<Result<Vec<_>, std::io::Error>>()?;
    let manifest = SynthManifest {
        seed: spec.seed,
        spec: spec.clone(),
        plan: plan.clone(),
        phantom: phantom.clone(),
        files,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok((cohort, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinical::{build_target_vector, Timepoint};

    #[test]
    fn default_counts_and_sexes() {
        let cohort = generate_cohort(&CohortSpec::default()).unwrap();
        assert_eq!(cohort.len(), 435);
        for (dx, n, males) in [(Diagnosis::AD, 17, 8), (Diagnosis::NC, 203, 102), (Diagnosis::MCI, 215, 138)] {
            let group: Vec<_> = cohort.iter().filter(|s| s.diagnosis == dx).collect();
            assert_eq!(group.len(), n);
            assert_eq!(group.iter().filter(|s| s.sex == Sex::M).count(), males);
        }
    }

    #[test]
    fn generated_assessments_are_valid() {
        let spec = CohortSpec::default();
        for s in generate_cohort(&spec).unwrap() {
            assert!(s.is_eligible(false));
            for a in s.assessments.values() {
                let sum: f64 = a.item_scores().iter().sum();
                assert_eq!(a.global_score(), sum);
                for item in AdasItem::ALL {
                    assert!((0.0..=spec.item_ranges.max(item)).contains(&a.item(item)));
                }
            }
        }
    }

    #[test]
    fn allocation_sums_to_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = ItemRanges::default();
        for g in [0.0, 0.3, 7.5, 20.0, 60.0, 85.0] {
            let items = allocate_items(g, &r, 5.0, &mut rng);
            assert!((items.iter().sum::<f64>() - g).abs() < 1e-9, "{g}");
            for (v, m) in items.iter().zip(r.maxima()) {
                assert!(*v >= 0.0 && *v <= *m + 1e-12);
            }
        }
    }

    #[test]
    fn no_noise_no_drift_is_flat() {
        let mut spec = CohortSpec::default().scaled(0.1);
        spec.noise_sd = 0.0;
        for g in [&mut spec.ad, &mut spec.nc, &mut spec.mci] {
            g.drift_per_year = 0.0;
        }
        for s in generate_cohort(&spec).unwrap() {
            assert_eq!(
                s.assessments[&Timepoint::M24].item_scores(),
                s.assessments[&Timepoint::BL].item_scores()
            );
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = CohortSpec::default().scaled(0.2);
        assert_eq!(generate_cohort(&spec).unwrap(), generate_cohort(&spec).unwrap());
        let other = CohortSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_cohort(&spec).unwrap(), generate_cohort(&other).unwrap());
    }

    #[test]
    fn group_means_track_the_spec() {
        let spec = CohortSpec::default();
        let cohort = generate_cohort(&spec).unwrap();
        for (dx, g) in spec.groups() {
            let vals: Vec<f64> = cohort
                .iter()
                .filter(|s| s.diagnosis == dx)
                .map(|s| s.assessments[&Timepoint::BL].global_score())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - g.baseline_global.mean).abs() <= 1.0, "{dx}: {mean}");
            if vals.len() >= 200 {
                let tol = 2.0 * g.baseline_global.sd / (vals.len() as f64).sqrt();
                assert!((mean - g.baseline_global.mean).abs() <= tol, "{dx}: {mean} tol {tol}");
            }
        }
    }

    #[test]
    fn target_echoes_generated_scores() {
        let cohort = generate_cohort(&CohortSpec::default().scaled(0.05)).unwrap();
        let s = &cohort[3];
        let t = build_target_vector(s).unwrap();
        let m24 = &s.assessments[&Timepoint::M24];
        assert_eq!(t.global(), m24.global_score());
        assert_eq!(t.items(), m24.item_scores());
    }

    fn subject_with_bl(items: [f64; 13]) -> SubjectRecord {
        let r = ItemRanges::default();
        let mut assessments = BTreeMap::new();
        assessments.insert(Timepoint::BL, AdasCogAssessment::new("X", Timepoint::BL, items, &r).unwrap());
        SubjectRecord {
            subject_id: "X".into(),
            diagnosis: Diagnosis::NC,
            age: 70.0,
            sex: Sex::F,
            assessments,
            mri_path: None,
        }
    }

    #[test]
    fn radius_formula() {
        let plan = SignalPlan::for_shape([32; 3]);
        let zero = subject_with_bl([0.0; 13]);
        assert_eq!(plan.radius_for(&zero.assessments[&Timepoint::BL]), plan.region_radius_base);
        let mut items = [0.0; 13];
        items[0] = 10.0;
        let q1 = subject_with_bl(items);
        let r = plan.radius_for(&q1.assessments[&Timepoint::BL]);
        let expected = plan.region_radius_base - plan.atrophy_gain * 10.0 / 3.0;
        assert!((r - expected).abs() < 1e-12);
        // floor at one voxel
        let heavy = SignalPlan { atrophy_gain: 100.0, ..plan };
        assert_eq!(heavy.radius_for(&q1.assessments[&Timepoint::BL]), 1.0);
    }

    #[test]
    fn radius_is_non_increasing_in_signal() {
        let plan = SignalPlan::for_shape([32; 3]);
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let mut items = [0.0; 13];
            items[0] = k as f64;
            items[3] = k as f64;
            items[7] = k as f64;
            let r = plan.radius_for(&subject_with_bl(items).assessments[&Timepoint::BL]);
            assert!(r <= last);
            last = r;
        }
    }

    #[test]
    fn volume_has_bright_region_and_is_deterministic() {
        let spec = PhantomSpec {
            shape: [24; 3],
            ..PhantomSpec::default()
        };
        let plan = SignalPlan::for_shape(spec.shape);
        let s = subject_with_bl([0.0; 13]);
        let a = generate_volume(&s, &plan, &spec, 9).unwrap();
        let b = generate_volume(&s, &plan, &spec, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.subject_id.as_deref(), Some("X"));
        let m = a.argmax();
        let d: f64 = (0..3).map(|k| (m[k] as f64 - plan.region_center[k]).powi(2)).sum::<f64>().sqrt();
        assert!(d <= plan.region_radius_base + 0.5);
        assert_eq!(a.voxels()[[0, 0, 0]], 0.0);
    }

    #[test]
    fn region_out_of_bounds() {
        let spec = PhantomSpec {
            shape: [16; 3],
            ..PhantomSpec::default()
        };
        let mut plan = SignalPlan::for_shape(spec.shape);
        plan.region_center = [2.0, 8.0, 8.0];
        let err = generate_volume(&subject_with_bl([0.0; 13]), &plan, &spec, 0).unwrap_err();
        assert!(matches!(err, SynthError::RegionOutOfBounds { .. }));
    }
}
