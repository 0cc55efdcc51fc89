//! Shared fixtures for the benchmarks.

use cgs_core::dataset::{make_toy_scene, Dataset, ToySceneSpec};
use cgs_core::train::{initial_model, DEFAULT_VOXEL_FRACTION};
use cgs_core::{RenderableGaussian, SplatModel};

/// Reference toy scene with its ground-truth Gaussians.
pub fn toy() -> (Vec<RenderableGaussian>, Dataset) {
    make_toy_scene(&ToySceneSpec::default()).expect("valid default spec")
}

/// Untrained model initialized from the toy point cloud.
pub fn toy_model(k: usize) -> SplatModel {
    let (_, ds) = toy();
    initial_model(&ds.points, k, DEFAULT_VOXEL_FRACTION, 7).expect("non-empty point cloud")
}
