//! Compression of 3D Gaussian-splat scenes with anchor-predicted coupled
//! primitives, learned entropy models and a range coder.
//!
//! A small set of anchors carry full geometry and a reference embedding;
//! each anchor owns `K` coupled primitives holding only a residual
//! embedding, from which networks predict a renderable Gaussian. Training
//! minimizes `lambda * rate + distortion` with a CPU splatting renderer in
//! the loop.

pub mod autodiff;
pub mod coder;
pub mod dataset;
pub mod entropy;
pub mod error;
pub mod math;
pub mod model;
pub mod nn;
pub mod prediction;
pub mod render;
pub mod scene;
pub mod train;

pub use entropy::{FactorizedBottleneck, GaussianCondModel, QuantConfig, RateReport};
pub use error::{Error, Result};
pub use model::SplatModel;
pub use prediction::PredictionNetworks;
pub use render::{Image, RenderOptions};
pub use scene::{AnchorPrimitive, Camera, CoupledPrimitive, RenderableGaussian, Scene};
