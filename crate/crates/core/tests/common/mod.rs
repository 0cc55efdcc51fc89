#![allow(dead_code)]

use cgs_core::math::Vec3;
use cgs_core::nn::HIDDEN;
use cgs_core::render::render;
use cgs_core::scene::{attach_coupled, AnchorPrimitive, Camera, RenderableGaussian, REF_DIM, RES_DIM};
use cgs_core::autodiff::central_difference;
use cgs_core::train::{evaluate_flat, flatten, init_cov_prior, Layout, LossConfig, View};
use cgs_core::{RenderOptions, SplatModel};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_quat<R: Rng>(rng: &mut R) -> [f64; 4] {
    let n = Normal::new(0.0, 1.0).unwrap();
    let q: [f64; 4] = std::array::from_fn(|_| n.sample(rng));
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / norm)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn random_gaussian<R: Rng>(rng: &mut R) -> RenderableGaussian {
    let r = quat_matrix(random_quat(rng));
    let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.02..0.2));
    let mut cov = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            cov[i][j] = (0..3).map(|k| r[i][k] * s[k] * s[k] * r[j][k]).sum();
        }
    }
    RenderableGaussian {
        location: std::array::from_fn(|_| rng.random_range(-0.6..0.6)),
        covariance: cov,
        opacity: rng.random_range(0.05..1.0),
        color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
    }
}

/// Camera on a sphere of radius 2.5 looking at the origin.
pub fn random_camera<R: Rng>(rng: &mut R, size: u32) -> Camera {
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let z = rng.random_range(-0.6..0.6);
    let eye = [2.5 * phi.cos(), 2.5 * phi.sin(), 2.5 * z];
    Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], size as f64 * 1.2, [size, size])
}

/// Random model with spread-out embeddings and perturbed networks, so every
/// coded stream carries varied symbols.
pub fn random_model(anchors: usize, k: usize, seed: u64) -> SplatModel {
    let mut rng = rng(seed);
    let ref_n = Normal::new(0.0, 3.0).unwrap();
    let res_n = Normal::new(0.0, 1.5).unwrap();
    let list: Vec<AnchorPrimitive> = (0..anchors)
        .map(|_| {
            let loc: Vec3 = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let mut a = AnchorPrimitive::new(loc, rng.random_range(0.02..0.1));
            a.cov_rotation = random_quat(&mut rng);
            a.ref_embedding = std::array::from_fn(|_| ref_n.sample(&mut rng));
            a
        })
        .collect();
    let mut scene = attach_coupled(list, k);
    for c in &mut scene.coupled {
        c.res_embedding = std::array::from_fn(|_| res_n.sample(&mut rng));
    }
    let mut model = SplatModel::new(scene, rng.random());
    let jitter = Normal::new(0.0, 0.05).unwrap();
    let w: Vec<f64> = model.weights().iter().map(|v| v + jitter.sample(&mut rng)).collect();
    model.set_weights(&w).unwrap();
    // Parameter networks stay close to their priors, so predictions are
    // calibrated to the embeddings actually drawn.
    for m in [&mut model.entropy.param_f, &mut model.entropy.param_cov, &mut model.entropy.param_g] {
        let (o, n) = (m.out_dim, m.params.len());
        m.params[n - o - o * HIDDEN..n - o].iter_mut().for_each(|w| *w *= 0.01);
    }
    init_cov_prior(&mut model);
    // Entropy scales that match the embedding spreads.
    let inv_softplus = |y: f64| y.exp_m1().ln();
    model.entropy.param_f.output_bias_mut()[REF_DIM..].fill(inv_softplus(3.0));
    model.entropy.param_g.output_bias_mut()[RES_DIM..].fill(inv_softplus(1.5));
    model
}

/// Two anchors, two coupled primitives each, and two 16x16 views of a
/// single ground-truth Gaussian.
pub fn tiny_instance(seed: u64) -> (SplatModel, Vec<View>) {
    let mut rng = rng(seed);
    let anchors = vec![
        AnchorPrimitive::new([0.1, 0.0, 0.0], 0.15),
        AnchorPrimitive::new([-0.2, 0.1, 0.1], 0.1),
    ];
    let mut scene = attach_coupled(anchors, 2);
    let n = Normal::new(0.0, 0.7).unwrap();
    for a in &mut scene.anchors {
        a.ref_embedding = std::array::from_fn(|_| n.sample(&mut rng));
        a.cov_rotation = random_quat(&mut rng);
    }
    for c in &mut scene.coupled {
        c.res_embedding = std::array::from_fn(|_| n.sample(&mut rng));
    }
    let mut model = SplatModel::new(scene, rng.random());
    let jitter = Normal::new(0.0, 0.05).unwrap();
    let w: Vec<f64> = model.weights().iter().map(|v| v + jitter.sample(&mut rng)).collect();
    model.set_weights(&w).unwrap();
    init_cov_prior(&mut model);
    model.q.s_cov = 0.05;

    let g = RenderableGaussian {
        location: [0.0; 3],
        covariance: [[0.02, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.01]],
        opacity: 0.8,
        color: [0.9, 0.3, 0.1],
    };
    let views = [[0.0, -2.0, 0.3], [1.5, -1.5, 0.0]]
        .iter()
        .map(|&eye| {
            let camera = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 20.0, [16, 16]);
            let target = render(&[g], &camera, &RenderOptions::default());
            View { camera, target }
        })
        .collect();
    (model, views)
}

pub struct GroupCheck {
    pub name: &'static str,
    pub checked: usize,
    pub failures: usize,
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|)` among
    /// entries judged relatively.
    pub worst_rel: f64,
    /// Worst absolute difference among entries with gradient below 1e-3.
    pub worst_abs: f64,
    /// First few failing entries as `(index, analytic, numeric)`.
    pub offenders: Vec<(usize, f64, f64)>,
}

pub const FD_STEP: f64 = 1e-4;
/// Step for instances where the wide stencil straddles a ReLU or L1 kink.
pub const FD_NARROW_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_ABS_TOL: f64 = 1e-6;
pub const FD_SMALL: f64 = 1e-3;

/// Compares reverse-mode gradients of the full noisy loss with central
/// differences for every parameter of every group.
pub fn gradient_check(model: &SplatModel, views: &[View], cfg: &LossConfig, seed: u64, h: f64) -> Vec<GroupCheck> {
    let layout = Layout::of(&model.scene);
    let flat = flatten(model);
    let eval = |x: &[f64], grad: bool| {
        let mut r = rng(seed);
        evaluate_flat(x, layout, &model.q, views, cfg, &mut r, grad).unwrap()
    };
    let grad = eval(&flat, true).grad.unwrap();
    let f = |x: &[f64]| eval(x, false).loss.l;
    layout
        .groups()
        .into_iter()
        .map(|(name, range)| {
            let mut c = GroupCheck {
                name,
                checked: 0,
                failures: 0,
                worst_rel: 0.0,
                worst_abs: 0.0,
                offenders: Vec::new(),
            };
            for i in range {
                let g = grad[i];
                let fd = central_difference(f, &flat, i, h);
                let diff = (g - fd).abs();
                c.checked += 1;
                let ok = if g.abs() < FD_SMALL {
                    c.worst_abs = c.worst_abs.max(diff);
                    diff <= FD_ABS_TOL
                } else {
                    let rel = diff / g.abs().max(fd.abs());
                    c.worst_rel = c.worst_rel.max(rel);
                    rel <= FD_REL_TOL
                };
                if !ok {
                    c.failures += 1;
                    if c.offenders.len() < 5 {
                        c.offenders.push((i, g, fd));
                    }
                }
            }
            c
        })
        .collect()
}
