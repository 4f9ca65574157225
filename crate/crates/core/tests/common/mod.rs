#![allow(dead_code)]

use std::path::Path;

use afw_core::data::{generate_synthetic_dataset, GeneratorConfig, Manifest, ManifestFaces, Split, TrackConfig};
use afw_core::model::{BackboneConfig, GruConfig, ModelConfig};
use afw_core::trainer::TrackSet;

pub fn small_data(num_videos: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig { num_videos, frames_per_video: 40, frame_side: 64, face_side: 20, seed, ..GeneratorConfig::default() }
}

pub fn small_track() -> TrackConfig {
    TrackConfig { stride: 10, margin: 6.0, patch_side: 16 }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { input_side: 16, channels: vec![4, 8], feature_dim: 16, ..Default::default() },
        gru: GruConfig { hidden: 8, bidirectional_layers: 1, unidirectional_layers: 1 },
        ..Default::default()
    }
}

pub fn dataset(dir: &Path, num_videos: usize, seed: u64) -> Manifest {
    generate_synthetic_dataset(&small_data(num_videos, seed), dir).unwrap()
}

pub fn tracks(m: &Manifest, split: Split) -> TrackSet {
    TrackSet::load(m, split, &ManifestFaces, &small_track()).unwrap()
}
