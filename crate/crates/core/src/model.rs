//! The full set of coded state: scene, prediction networks, entropy models
//! and quantization steps.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{FactorizedBottleneck, GaussianCondModel, QuantConfig, SUPPORT_LEN};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::prediction::{decode_coupled, PredictionNetworks};
use crate::render::{render, Image, RenderOptions};
use crate::scene::{Camera, RenderableGaussian, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplatModel {
    pub scene: Scene,
    pub nets: PredictionNetworks,
    pub entropy: GaussianCondModel,
    pub fb: FactorizedBottleneck,
    pub q: QuantConfig,
}

impl SplatModel {
    /// Fresh networks around an initialized scene.
    pub fn new(scene: Scene, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SplatModel {
            scene,
            nets: PredictionNetworks::init(&mut rng),
            entropy: GaussianCondModel::init(&mut rng),
            fb: FactorizedBottleneck::new(),
            q: QuantConfig::default(),
        }
    }

    pub fn gaussians(&self, camera: &Camera) -> Result<Vec<RenderableGaussian>> {
        decode_coupled(&self.scene, camera, &self.nets)
    }

    pub fn render(&self, camera: &Camera, opts: &RenderOptions) -> Result<Image> {
        Ok(render(&self.gaussians(camera)?, camera, opts))
    }

    fn mlps(&self) -> Vec<&Mlp> {
        let e = &self.entropy;
        let mut v: Vec<&Mlp> = self.nets.nets().to_vec();
        v.extend([&e.hyper_f, &e.param_f, &e.param_cov, &e.hyper_g, &e.param_g]);
        v
    }

    /// Every network weight and factorized logit in bitstream order:
    /// translation, scale, rotation, opacity, color, then the reference
    /// hyper-encoder and its parameter network, the covariance parameter
    /// network, the residual hyper-encoder and its parameter network, then
    /// the factorized logits channel by channel.
    pub fn weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::weight_count());
        for m in self.mlps() {
            out.extend_from_slice(&m.params);
        }
        for ch in self.fb.hyper_f.iter().chain(&self.fb.hyper_g) {
            out.extend_from_slice(ch);
        }
        out
    }

    pub fn weight_count() -> usize {
        static COUNT: OnceLock<usize> = OnceLock::new();
        *COUNT.get_or_init(|| {
            let m = SplatModel::new(Scene { anchors: vec![], coupled: vec![], k: 1 }, 0);
            m.mlps().iter().map(|n| n.params.len()).sum::<usize>()
                + (m.fb.hyper_f.len() + m.fb.hyper_g.len()) * SUPPORT_LEN
        })
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != Self::weight_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights, expected {}",
                w.len(),
                Self::weight_count()
            )));
        }
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&w[at..at + dst.len()]);
            at += dst.len();
        };
        for m in self.nets.nets_mut() {
            take(&mut m.params);
        }
        let e = &mut self.entropy;
        for m in [&mut e.hyper_f, &mut e.param_f, &mut e.param_cov, &mut e.hyper_g, &mut e.param_g] {
            take(&mut m.params);
        }
        for ch in self.fb.hyper_f.iter_mut().chain(self.fb.hyper_g.iter_mut()) {
            take(ch);
        }
        Ok(())
    }

    /// Weights and the covariance step rounded to what the bitstream holds.
    pub fn round_to_f32(&mut self) {
        let w: Vec<f64> = self.weights().iter().map(|&v| v as f32 as f64).collect();
        self.set_weights(&w).expect("same layout");
        self.q.s_cov = self.q.s_cov as f32 as f64;
    }
}
