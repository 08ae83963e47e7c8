#![allow(dead_code)]

use std::path::Path;

use adas_mtl::explain::AttributionConfig;
use adas_mtl::imaging::{PreprocessConfig, RegistrationConfig};
use adas_mtl::model::{BackboneConfig, ModalityConfig};
use adas_mtl::pipeline::{DataSource, ExperimentConfig};
use adas_mtl::synth::{CohortSpec, PhantomSpec};
use adas_mtl::training::TrainConfig;

/// A 44-subject cohort with 16³ phantoms and a one-block ViT; a full pipeline
/// run takes a few seconds.
pub fn small_config(out: &Path, modality: ModalityConfig) -> ExperimentConfig {
    let shape = [16; 3];
    ExperimentConfig {
        data: DataSource::Synthetic {
            cohort: CohortSpec::default().scaled(0.1),
            phantom: PhantomSpec {
                shape,
                spacing_mm: [4.0; 3],
                gain_amplitude: 0.2,
                jitter_voxels: 1.0,
                ..Default::default()
            },
            plan: None,
        },
        preprocess: PreprocessConfig {
            registration: RegistrationConfig {
                pyramid_levels: 2,
                max_iterations: 20,
                finest_level: 1,
            },
            bias_smoothing_mm: 32.0,
            ..Default::default()
        },
        backbone: BackboneConfig {
            input_shape: shape,
            patch_size: 8,
            embed_dim: 16,
            depth: 1,
            num_heads: 2,
            ..BackboneConfig::vit()
        },
        modality,
        trunk_width: 16,
        train: TrainConfig {
            max_epochs: 3,
            ..Default::default()
        },
        attribution: AttributionConfig {
            num_permutations: 10,
            background_size: 4,
            max_explained: 3,
            ..Default::default()
        },
        output_dir: out.to_path_buf(),
        seed: 7,
    }
}

use adas_mtl::synth::{generate_cohort, generate_volume, SignalPlan};
use adas_mtl::training::Sample;

/// Samples with planted-signal phantoms of `backbone.input_shape`, drawn from
/// the default cohort scaled by `fraction`.
pub fn phantom_samples(fraction: f64, backbone: &BackboneConfig, seed: u64) -> Vec<Sample> {
    let spec = CohortSpec {
        seed,
        ..CohortSpec::default().scaled(fraction)
    };
    let phantom = PhantomSpec {
        shape: backbone.input_shape,
        spacing_mm: [4.0; 3],
        ..Default::default()
    };
    let plan = SignalPlan::for_shape(phantom.shape);
    generate_cohort(&spec)
        .unwrap()
        .iter()
        .map(|s| {
            let v = generate_volume(s, &plan, &phantom, seed).unwrap();
            let v = adas_mtl::imaging::normalize_intensity(&v).volume;
            Sample::new(s, Some(&v), backbone).unwrap()
        })
        .collect()
}

/// Clinical-only samples of the default cohort scaled by `fraction`.
pub fn clinical_samples(fraction: f64, seed: u64) -> Vec<Sample> {
    let spec = CohortSpec {
        seed,
        ..CohortSpec::default().scaled(fraction)
    };
    let backbone = BackboneConfig::none();
    generate_cohort(&spec)
        .unwrap()
        .iter()
        .map(|s| Sample::new(s, None, &backbone).unwrap())
        .collect()
}
