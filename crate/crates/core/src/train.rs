//! Rate-distortion training: `L = lambda * R + D` minimized with Adam over
//! anchor geometry, embeddings, the covariance step and every network.
//!
//! All trainables live in one flat vector (see [`Layout`]). A loss
//! evaluation rebuilds the model over that vector, either as `f64` or as
//! tape variables, so the gradient and plain paths agree bit for bit.

use std::f64::consts::PI;
use std::io::Write;
use std::ops::Range;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape};
use crate::coder::{estimate_location_bits, quantize_model, read_scene, LocationGrid};
use crate::entropy::{
    add_noise, factorized_bits, gaussian_bits, FactorizedBottleneck, GaussianCondModel, QuantConfig,
    RateParts, RateReport,
};
use crate::error::{Error, Result};
use crate::math::{covariance_from_scale_rot, norm3, quat_normalize, sub3, Vec3};
use crate::model::SplatModel;
use crate::nn::Mlp;
use crate::prediction::{predict_primitive, view_embedding, PredictionNetworks};
use crate::render::{
    distortion, distortion_with_grad, psnr, rasterize, rasterize_backward, ssim, Image, Projection,
    RenderOptions, Splat2D,
};
use crate::render::project::project_geometry;
use crate::scene::{
    attach_coupled, init_anchors, surviving_anchors, AnchorPrimitive, Camera, CoupledPrimitive, Scene, COV_DIM, REF_DIM, RES_DIM,
};

/// What `R` is divided by before it is weighted by `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateUnit {
    /// Total scene bits.
    TotalBits,
    /// Total scene bits divided by the pixel count of a view.
    BitsPerPixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    /// Learning rate of geometry, embeddings, logits and the covariance step.
    pub lr_init: f64,
    pub lr_final: f64,
    /// Networks train at `network_lr_scale` times the rates above.
    pub network_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Prune every this many steps; 0 disables pruning.
    pub prune_interval: usize,
    pub prune_threshold: f64,
    pub use_noise: bool,
    pub rate_unit: RateUnit,
    /// Residual embeddings held at zero and never updated.
    pub freeze_residual: bool,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.001,
            steps: 2000,
            lr_init: 1e-2,
            lr_final: 1e-4,
            network_lr_scale: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            prune_interval: 500,
            prune_threshold: 0.01,
            use_noise: true,
            rate_unit: RateUnit::BitsPerPixel,
            freeze_residual: false,
            background: [0.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be finite and >= 0".into()));
        }
        if !(self.lr_final > 0.0 && self.lr_init >= self.lr_final && self.lr_init.is_finite()) {
            return Err(Error::InvalidArgument("need lr_init >= lr_final > 0".into()));
        }
        if !(self.network_lr_scale > 0.0) {
            return Err(Error::InvalidArgument("network learning-rate scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("invalid Adam constants".into()));
        }
        Ok(())
    }

    /// Cosine-annealed base learning rate at `step` of `steps`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let t = if self.steps == 0 { 0.0 } else { step as f64 / self.steps as f64 };
        self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (PI * t).cos())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            use_noise: self.use_noise,
            rate_unit: self.rate_unit,
            freeze_residual: self.freeze_residual,
            background: self.background,
        }
    }
}

/// Settings of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    /// Uniform-noise proxy when true, hard quantization otherwise.
    pub use_noise: bool,
    pub rate_unit: RateUnit,
    pub freeze_residual: bool,
    pub background: [f64; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        TrainConfig::default().loss_config()
    }
}

/// A camera with its ground-truth image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub target: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub l: f64,
    pub d: f64,
    /// Bits, before any normalization.
    pub r: f64,
}

/// Combines rate and distortion the way the training loss does.
pub fn combine(lambda: f64, rate_bits: f64, d: f64, unit: RateUnit, pixels: f64) -> f64 {
    match unit {
        RateUnit::TotalBits => lambda * rate_bits + d,
        RateUnit::BitsPerPixel => lambda * (rate_bits / pixels) + d,
    }
}

fn mean_pixels(batch: &[View]) -> f64 {
    batch
        .iter()
        .map(|v| (v.camera.width() * v.camera.height()) as f64)
        .sum::<f64>()
        / batch.len() as f64
}

// ---------------------------------------------------------------------------
// Flat parameter layout

pub const GROUP_NAMES: [&str; 8] = [
    "anchor locations",
    "anchor covariance",
    "reference embeddings",
    "residual embeddings",
    "covariance step",
    "prediction networks",
    "entropy networks",
    "factorized logits",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub anchors: usize,
    pub k: usize,
}

fn prediction_len() -> usize {
    static LEN: OnceLock<usize> = OnceLock::new();
    *LEN.get_or_init(|| PredictionNetworks::zeros().nets().iter().map(|m| m.params.len()).sum())
}

fn entropy_len() -> usize {
    static LEN: OnceLock<usize> = OnceLock::new();
    *LEN.get_or_init(|| GaussianCondModel::zeros().nets().iter().map(|m| m.params.len()).sum())
}

impl Layout {
    pub fn of(scene: &Scene) -> Self {
        Layout {
            anchors: scene.anchors.len(),
            k: scene.k,
        }
    }

    /// Name and index range of every parameter group, in storage order.
    pub fn groups(&self) -> Vec<(&'static str, Range<usize>)> {
        let n = self.anchors;
        let lens = [
            3 * n,
            COV_DIM * n,
            REF_DIM * n,
            RES_DIM * n * self.k,
            1,
            prediction_len(),
            entropy_len(),
            SplatModel::weight_count() - prediction_len() - entropy_len(),
        ];
        let mut at = 0;
        lens.iter()
            .zip(GROUP_NAMES)
            .map(|(&len, name)| {
                let r = at..at + len;
                at += len;
                (name, r)
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.groups().last().map_or(0, |(_, r)| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self, name: &str) -> Range<usize> {
        self.groups()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, r)| r)
            .expect("known group")
    }
}

/// Every trainable in layout order. The covariance step is stored as its
/// logarithm.
pub fn flatten(model: &SplatModel) -> Vec<f64> {
    let s = &model.scene;
    let mut out = Vec::with_capacity(Layout::of(s).len());
    out.extend(s.anchors.iter().flat_map(|a| a.location));
    out.extend(s.anchors.iter().flat_map(|a| a.cov_params()));
    out.extend(s.anchors.iter().flat_map(|a| a.ref_embedding));
    out.extend(s.coupled.iter().flat_map(|c| c.res_embedding));
    out.push(model.q.s_cov.ln());
    out.extend(model.weights());
    out
}

/// Model state over an arbitrary scalar type.
#[derive(Debug, Clone)]
pub struct Params<S> {
    pub scene: Scene<S>,
    pub log_s_cov: S,
    pub nets: PredictionNetworks<S>,
    pub entropy: GaussianCondModel<S>,
    pub fb: FactorizedBottleneck<S>,
}

pub fn unflatten<S: Copy>(flat: &[S], layout: Layout) -> Params<S> {
    assert_eq!(flat.len(), layout.len(), "flat parameter length");
    let n = layout.anchors;
    let mut it = flat.iter().copied();
    let mut take = |len: usize| -> Vec<S> { it.by_ref().take(len).collect() };
    let locs = take(3 * n);
    let covs = take(COV_DIM * n);
    let refs = take(REF_DIM * n);
    let res = take(RES_DIM * n * layout.k);
    let log_s_cov = take(1)[0];
    let anchors = (0..n)
        .map(|a| {
            AnchorPrimitive {
                location: std::array::from_fn(|d| locs[3 * a + d]),
                cov_scale: std::array::from_fn(|d| covs[COV_DIM * a + d]),
                cov_rotation: std::array::from_fn(|d| covs[COV_DIM * a + 3 + d]),
                ref_embedding: std::array::from_fn(|d| refs[REF_DIM * a + d]),
            }
        })
        .collect();
    let coupled = (0..n * layout.k)
        .map(|i| CoupledPrimitive {
            anchor_index: i / layout.k,
            res_embedding: std::array::from_fn(|d| res[RES_DIM * i + d]),
        })
        .collect();
    let mut next = || it.next().expect("layout length");
    let pz = PredictionNetworks::zeros();
    let nets = PredictionNetworks {
        translation: pz.translation.map(|_| next()),
        scale: pz.scale.map(|_| next()),
        rotation: pz.rotation.map(|_| next()),
        opacity: pz.opacity.map(|_| next()),
        color: pz.color.map(|_| next()),
    };
    let ez = GaussianCondModel::zeros();
    let mut m = |z: &Mlp| z.map(|_| next());
    let hyper_f = m(&ez.hyper_f);
    let param_f = m(&ez.param_f);
    let param_cov = m(&ez.param_cov);
    let hyper_g = m(&ez.hyper_g);
    let param_g = m(&ez.param_g);
    let entropy = GaussianCondModel {
        hyper_f,
        hyper_g,
        param_f,
        param_cov,
        param_g,
    };
    let fz = FactorizedBottleneck::new();
    let fb = fz.map(|_| next());
    Params {
        scene: Scene {
            anchors,
            coupled,
            k: layout.k,
        },
        log_s_cov,
        nets,
        entropy,
        fb,
    }
}

/// Rebuilds a model from flat parameters; `s_f` and `s_g` come from `q`.
pub fn model_from_flat(flat: &[f64], layout: Layout, q: &QuantConfig) -> SplatModel {
    let p = unflatten(flat, layout);
    SplatModel {
        scene: p.scene,
        nets: p.nets,
        entropy: p.entropy,
        fb: p.fb,
        q: QuantConfig {
            s_cov: p.log_s_cov.exp(),
            ..*q
        },
    }
}

// ---------------------------------------------------------------------------
// Forward pass

/// The scene as the decoder would see it under the noise proxy, with the
/// differentiable bit estimate.
struct NoisyScene<S> {
    anchors: Vec<AnchorPrimitive<S>>,
    coupled: Vec<CoupledPrimitive<S>>,
    bits: S,
    parts: RateParts,
}

fn noisy_scene<S: Scalar, R: Rng>(
    p: &Params<S>,
    q: &QuantConfig,
    freeze_residual: bool,
    bits_locations: f64,
    rng: &mut R,
) -> NoisyScene<S> {
    let pmfs = p.fb.pmfs();
    let s_cov = p.log_s_cov.exp();
    let scene = &p.scene;
    let mut u = || rng.random::<f64>() - 0.5;
    let mut parts = RateParts {
        bits_locations,
        anchors: scene.anchors.len(),
        coupled: scene.coupled.len(),
        ..Default::default()
    };
    let mut terms: Vec<S> = Vec::new();
    let mut anchors = Vec::with_capacity(scene.anchors.len());
    let mut coupled = Vec::with_capacity(scene.coupled.len());
    for (a, anchor) in scene.anchors.iter().enumerate() {
        let s_f = s_cov.lift(q.s_f);
        let f_sym: [S; REF_DIM] = std::array::from_fn(|i| add_noise(anchor.ref_embedding[i], s_f, u()));
        let f_hat = f_sym.map(|v| v * q.s_f);
        let eta: Vec<S> = p.entropy.hyper_f.forward(&f_hat).into_iter().map(|v| v + u()).collect();
        let bits_hyper = factorized_bits(&pmfs.hyper_f, &eta);
        let bits_f = gaussian_bits(&f_sym, &p.entropy.ref_params(&eta));
        let cov = anchor.cov_params();
        let cov_sym: [S; COV_DIM] = std::array::from_fn(|i| add_noise(cov[i], s_cov, u()));
        let bits_cov = gaussian_bits(&cov_sym, &p.entropy.cov_params(&f_hat, s_cov));
        parts.bits_f += bits_f.value();
        parts.bits_sigma += bits_cov.value();
        parts.bits_hyper_f += bits_hyper.value();
        terms.extend([bits_f, bits_cov, bits_hyper]);

        let mut noisy = *anchor;
        noisy.set_cov_params(cov_sym.map(|v| v * s_cov));
        noisy.ref_embedding = f_hat;
        anchors.push(noisy);

        for c in scene.coupled_of(a) {
            let g_sym: [S; RES_DIM] = if freeze_residual {
                [s_cov.lift(0.0); RES_DIM]
            } else {
                let s_g = s_cov.lift(q.s_g);
                std::array::from_fn(|i| add_noise(c.res_embedding[i], s_g, u()))
            };
            let g_hat = g_sym.map(|v| v * q.s_g);
            let eta_g: Vec<S> = p.entropy.hyper_g.forward(&g_hat).into_iter().map(|v| v + u()).collect();
            let bits_hyper = factorized_bits(&pmfs.hyper_g, &eta_g);
            let bits_g = gaussian_bits(&g_sym, &p.entropy.res_params(&f_hat, &eta_g));
            parts.bits_g += bits_g.value();
            parts.bits_hyper_g += bits_hyper.value();
            terms.extend([bits_g, bits_hyper]);
            coupled.push(CoupledPrimitive {
                anchor_index: c.anchor_index,
                res_embedding: g_hat,
            });
        }
    }
    let zero = p.log_s_cov.lift(bits_locations);
    let bits = if terms.is_empty() { zero } else { S::sum(zero, &terms) };
    NoisyScene {
        anchors,
        coupled,
        bits,
        parts,
    }
}

/// Projected coupled primitive with the inputs the rasterizer consumes.
struct PrimitiveOut<S> {
    proj: Option<Projection<S>>,
    opacity: S,
    color: [S; 3],
}

fn view_primitives<S: Scalar>(
    anchors: &[AnchorPrimitive<S>],
    coupled: &[CoupledPrimitive<S>],
    k: usize,
    nets: &PredictionNetworks<S>,
    cam: &Camera,
) -> Result<Vec<PrimitiveOut<S>>> {
    let center = cam.center();
    let mut out = Vec::with_capacity(coupled.len());
    for (a, anchor) in anchors.iter().enumerate() {
        let view = view_embedding(center, anchor.location)?;
        for c in &coupled[a * k..(a + 1) * k] {
            let pred = predict_primitive(anchor, c, &view, nets);
            let g = pred.geometry;
            let cov = covariance_from_scale_rot(g.cov_scale, g.cov_rotation);
            out.push(PrimitiveOut {
                proj: project_geometry(&g.location, &cov, cam),
                opacity: pred.opacity,
                color: pred.color,
            });
        }
    }
    Ok(out)
}

fn to_splat<S: Scalar>(p: &PrimitiveOut<S>) -> Option<Splat2D> {
    p.proj.as_ref().map(|pr| {
        let [a, b, c] = pr.cov2d.map(|v| v.value());
        Splat2D {
            mean2d: pr.mean2d.map(|v| v.value()),
            cov2d: [[a, b], [b, c]],
            conic: pr.conic.map(|v| v.value()),
            depth: pr.depth,
            opacity: p.opacity.value(),
            color: p.color.map(|v| v.value()),
        }
    })
}

fn location_bits(anchors: &[AnchorPrimitive<f64>]) -> Result<f64> {
    if anchors.is_empty() {
        return Ok(0.0);
    }
    let locs: Vec<_> = anchors.iter().map(|a| a.location).collect();
    estimate_location_bits(&locs, &LocationGrid::for_points(&locs))
}

/// Result of one noisy loss evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: LossValue,
    pub parts: RateParts,
    /// Gradient in layout order, when requested.
    pub grad: Option<Vec<f64>>,
    /// Largest compositing weight any coupled primitive of each anchor
    /// reached in the batch.
    pub anchor_max_weight: Vec<f64>,
}

fn evaluate_noisy<S: Scalar>(
    flat: &[S],
    layout: Layout,
    q: &QuantConfig,
    batch: &[View],
    cfg: &LossConfig,
    bits_locations: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(LossValue, RateParts, Vec<f64>, S, Vec<(S, f64)>)> {
    let p = unflatten(flat, layout);
    let noisy = noisy_scene(&p, q, cfg.freeze_residual, bits_locations, rng);
    let opts = RenderOptions {
        background: cfg.background,
        early_exit: true,
    };
    let nb = batch.len() as f64;
    let mut d = 0.0;
    let mut seeds = Vec::new();
    let mut anchor_max = vec![0.0f64; layout.anchors];
    for view in batch {
        let prims = view_primitives(&noisy.anchors, &noisy.coupled, layout.k, &p.nets, &view.camera)?;
        let splats: Vec<Option<Splat2D>> = prims.iter().map(to_splat).collect();
        let raster = rasterize(&splats, view.camera.width(), view.camera.height(), &opts);
        let (dv, d_image) = distortion_with_grad(&raster.image, &view.target)?;
        d += dv / nb;
        for (i, w) in raster.max_weight.iter().enumerate() {
            let a = i / layout.k;
            anchor_max[a] = anchor_max[a].max(*w);
        }
        let grads = rasterize_backward(&raster, &splats, &d_image);
        for (prim, g) in prims.iter().zip(&grads) {
            let Some(pr) = &prim.proj else { continue };
            for j in 0..2 {
                seeds.push((pr.mean2d[j], g.mean2d[j] / nb));
            }
            for j in 0..3 {
                seeds.push((pr.conic[j], g.conic[j] / nb));
                seeds.push((prim.color[j], g.color[j] / nb));
            }
            seeds.push((prim.opacity, g.opacity / nb));
        }
    }
    let r = noisy.bits.value();
    let pixels = mean_pixels(batch);
    let l = combine(cfg.lambda, r, d, cfg.rate_unit, pixels);
    let rate_weight = match cfg.rate_unit {
        RateUnit::TotalBits => cfg.lambda,
        RateUnit::BitsPerPixel => cfg.lambda / pixels,
    };
    Ok((LossValue { l, d, r }, noisy.parts, anchor_max, noisy.bits, {
        seeds.push((noisy.bits, rate_weight));
        seeds
    }))
}

/// Noisy-proxy loss at flat parameters, optionally with its gradient. The
/// noise stream is `noise_rng`; identical streams give identical results.
pub fn evaluate_flat(
    flat: &[f64],
    layout: Layout,
    q: &QuantConfig,
    batch: &[View],
    cfg: &LossConfig,
    noise_rng: &mut ChaCha8Rng,
    want_grad: bool,
) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let model_view = unflatten(flat, layout);
    let bits_locations = location_bits(&model_view.scene.anchors)?;
    if !want_grad {
        let (loss, parts, anchor_max_weight, ..) =
            evaluate_noisy(flat, layout, q, batch, cfg, bits_locations, noise_rng)?;
        return Ok(Evaluation {
            loss,
            parts,
            grad: None,
            anchor_max_weight,
        });
    }
    let tape = Tape::with_capacity(flat.len() * 4);
    let vars = tape.vars(flat);
    let (loss, parts, anchor_max_weight, _, seeds) =
        evaluate_noisy(&vars, layout, q, batch, cfg, bits_locations, noise_rng)?;
    let grad = tape.backward(&seeds).wrt_all(&vars);
    Ok(Evaluation {
        loss,
        parts,
        grad: Some(grad),
        anchor_max_weight,
    })
}

/// `(L, D, R)` over a batch. With the noise proxy the noise is drawn from
/// `seed`; without it the model is hard-quantized exactly as the encoder
/// does and `R` is the estimated total of the quantized scene.
pub fn loss(model: &SplatModel, batch: &[View], cfg: &LossConfig, seed: u64) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if cfg.use_noise {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = evaluate_flat(&flatten(model), Layout::of(&model.scene), &model.q, batch, cfg, &mut rng, false)?;
        return Ok(e.loss);
    }
    let qm = quantize_model(model)?;
    let r = qm.estimated_report().total;
    let opts = RenderOptions {
        background: cfg.background,
        early_exit: true,
    };
    let mut d = 0.0;
    for v in batch {
        d += distortion(&qm.model.render(&v.camera, &opts)?, &v.target)? / batch.len() as f64;
    }
    Ok(LossValue {
        l: combine(cfg.lambda, r, d, cfg.rate_unit, mean_pixels(batch)),
        d,
        r,
    })
}

/// Gradient of the noisy loss with respect to every trainable, with the
/// non-finite check applied per group.
pub fn loss_and_gradient(
    model: &SplatModel,
    batch: &[View],
    cfg: &LossConfig,
    seed: u64,
) -> Result<(LossValue, Vec<f64>)> {
    let layout = Layout::of(&model.scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = evaluate_flat(&flatten(model), layout, &model.q, batch, cfg, &mut rng, true)?;
    let grad = e.grad.expect("requested");
    check_finite(&grad, layout)?;
    Ok((e.loss, grad))
}

fn check_finite(grad: &[f64], layout: Layout) -> Result<()> {
    for (name, r) in layout.groups() {
        if grad[r].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Initialization

/// Output biases of the covariance parameter network start at the mean and
/// spread of the anchors' covariance scalars, so the first rate estimates
/// are sensible.
pub fn init_cov_prior(model: &mut SplatModel) {
    let anchors = &model.scene.anchors;
    if anchors.is_empty() {
        return;
    }
    let n = anchors.len() as f64;
    let floor = 4.0 * model.q.s_cov;
    let bias = model.entropy.param_cov.output_bias_mut();
    for i in 0..COV_DIM {
        let mean = anchors.iter().map(|a| a.cov_params()[i]).sum::<f64>() / n;
        let var = anchors.iter().map(|a| (a.cov_params()[i] - mean).powi(2)).sum::<f64>() / n;
        let spread = var.sqrt().max(floor);
        bias[i] = mean;
        // Inverse softplus.
        bias[COV_DIM + i] = spread + (-(-spread).exp_m1()).ln();
    }
}

/// Anchor voxel size as a fraction of the point-cloud bounding-box diagonal.
pub const DEFAULT_VOXEL_FRACTION: f64 = 0.01;

/// Voxelized anchors with `k` coupled primitives each and fresh networks.
pub fn initial_model(points: &[Vec3], k: usize, voxel_fraction: f64, seed: u64) -> Result<SplatModel> {
    if k == 0 || k > u8::MAX as usize {
        return Err(Error::InvalidArgument("K must be in 1..=255".into()));
    }
    if points.is_empty() {
        return Err(Error::NoPoints);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let diag = norm3(sub3(hi, lo));
    let voxel = if diag > 0.0 { voxel_fraction * diag } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = init_anchors(points, voxel, &mut rng)?;
    let mut model = SplatModel::new(attach_coupled(anchors, k), rng.random());
    init_cov_prior(&mut model);
    Ok(model)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub l: f64,
    pub d: f64,
    pub r: f64,
}

/// Adam moments, saved next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: usize,
    pub anchors: usize,
    pub k: usize,
    pub config: TrainConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: SplatModel,
    pub trace: Vec<TraceRow>,
    pub optimizer: OptimizerState,
}

fn is_network_group(name: &str) -> bool {
    name == "prediction networks" || name == "entropy networks"
}

/// Trains `model` on `views`, one view per step in round-robin order.
pub fn train(model: &SplatModel, views: &[View], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.check()?;
    model.q.check()?;
    model.scene.check()?;
    let mut layout = Layout::of(&model.scene);
    let mut flat = flatten(model);
    let q = model.q;
    if cfg.freeze_residual {
        flat[layout.range("residual embeddings")].fill(0.0);
    }
    let mut m = vec![0.0; flat.len()];
    let mut v = vec![0.0; flat.len()];
    let mut trace = Vec::with_capacity(cfg.steps);
    if cfg.steps > 0 && views.is_empty() {
        return Err(Error::InvalidArgument("no training views".into()));
    }
    let loss_cfg = cfg.loss_config();
    let mut stats = vec![0.0f64; layout.anchors];

    for step in 0..cfg.steps {
        let batch = std::slice::from_ref(&views[step % views.len()]);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64);
        let e = evaluate_flat(&flat, layout, &q, batch, &loss_cfg, &mut rng, true)?;
        if !e.loss.l.is_finite() {
            return Err(Error::Diverged(step));
        }
        let grad = e.grad.expect("requested");
        check_finite(&grad, layout)?;
        trace.push(TraceRow {
            step,
            l: e.loss.l,
            d: e.loss.d,
            r: e.loss.r,
        });
        for (s, w) in stats.iter_mut().zip(&e.anchor_max_weight) {
            *s = s.max(*w);
        }

        let lr = cfg.learning_rate(step);
        let t = (step + 1) as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, r) in layout.groups() {
            if cfg.freeze_residual && name == "residual embeddings" {
                continue;
            }
            let rate = if is_network_group(name) { lr * cfg.network_lr_scale } else { lr };
            for i in r {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                flat[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
        let cov = layout.range("anchor covariance");
        for a in 0..layout.anchors {
            let o = cov.start + COV_DIM * a + 3;
            let qn = quat_normalize([flat[o], flat[o + 1], flat[o + 2], flat[o + 3]]);
            flat[o..o + 4].copy_from_slice(&qn);
        }

        let done = step + 1;
        if cfg.prune_interval > 0 && done % cfg.prune_interval == 0 && done < cfg.steps {
            let keep = surviving_anchors(&stats, cfg.prune_threshold);
            if keep.is_empty() {
                return Err(Error::SceneEmptied);
            }
            if keep.len() < layout.anchors {
                flat = select_flat(&flat, layout, &keep);
                m = select_flat(&m, layout, &keep);
                v = select_flat(&v, layout, &keep);
                layout.anchors = keep.len();
            }
            stats = vec![0.0; layout.anchors];
        }
    }

    let out = if cfg.steps == 0 {
        model.clone()
    } else {
        model_from_flat(&flat, layout, &q)
    };
    Ok(TrainOutput {
        model: out,
        trace,
        optimizer: OptimizerState {
            step: cfg.steps,
            anchors: layout.anchors,
            k: layout.k,
            config: cfg.clone(),
            m,
            v,
        },
    })
}

/// Keeps the listed anchors (and their coupled primitives) of a vector in
/// layout order; shared state is carried over unchanged.
fn select_flat(flat: &[f64], layout: Layout, keep: &[usize]) -> Vec<f64> {
    let mut p = unflatten(flat, layout);
    p.scene = p.scene.select_anchors(keep);
    let new_layout = Layout {
        anchors: keep.len(),
        k: layout.k,
    };
    let groups = layout.groups();
    let mut out = Vec::with_capacity(new_layout.len());
    out.extend(p.scene.anchors.iter().flat_map(|a| a.location));
    out.extend(p.scene.anchors.iter().flat_map(|a| a.cov_params()));
    out.extend(p.scene.anchors.iter().flat_map(|a| a.ref_embedding));
    out.extend(p.scene.coupled.iter().flat_map(|c| c.res_embedding));
    // Everything after the residual embeddings is shared.
    out.extend_from_slice(&flat[groups[4].1.start..]);
    out
}

/// Writes the loss trace as CSV.
pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TraceRow]) -> Result<()> {
    writeln!(w, "step,L,D_bits,R_bits")?;
    for row in trace {
        writeln!(w, "{},{},{},{}", row.step, row.l, row.d, row.r)?;
    }
    Ok(())
}

/// Means of consecutive non-overlapping windows of `L`.
pub fn window_means(trace: &[TraceRow], window: usize) -> Vec<f64> {
    trace
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().map(|r| r.l).sum::<f64>() / window as f64)
        .collect()
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub size_bytes: usize,
    pub size_mb: f64,
    pub rate: RateReport,
}

/// Renders `views` (tagged with their dataset indices) from a model and
/// scores them.
pub fn evaluate_model(
    model: &SplatModel,
    views: &[(usize, View)],
    background: [f64; 3],
) -> Result<Vec<ViewMetrics>> {
    let opts = RenderOptions {
        background,
        early_exit: true,
    };
    views
        .iter()
        .map(|(i, v)| {
            let img = model.render(&v.camera, &opts)?;
            Ok(ViewMetrics {
                view: *i,
                psnr: psnr(&img, &v.target)?,
                ssim: ssim(&img, &v.target)?,
            })
        })
        .collect()
}

/// Decodes a bitstream, renders every view and reports per-view and mean
/// metrics together with the exact byte size.
pub fn evaluate(bytes: &[u8], views: &[(usize, View)], background: [f64; 3]) -> Result<EvalReport> {
    let decoded = read_scene(bytes)?;
    let per_view = evaluate_model(&decoded.model, views, background)?;
    let n = per_view.len().max(1) as f64;
    Ok(EvalReport {
        mean_psnr: per_view.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: per_view.iter().map(|m| m.ssim).sum::<f64>() / n,
        size_bytes: bytes.len(),
        size_mb: bytes.len() as f64 / 1e6,
        rate: decoded.coded_report(),
        views: per_view,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render;
    use crate::scene::RenderableGaussian;

    fn tiny_model(seed: u64) -> SplatModel {
        let anchors = vec![
            AnchorPrimitive::new([0.1, 0.0, 0.0], 0.15),
            AnchorPrimitive::new([-0.2, 0.1, 0.1], 0.1),
        ];
        let mut m = SplatModel::new(attach_coupled(anchors, 2), seed);
        init_cov_prior(&mut m);
        m
    }

    fn tiny_views() -> Vec<View> {
        let g = RenderableGaussian {
            location: [0.0; 3],
            covariance: [[0.02, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.01]],
            opacity: 0.8,
            color: [0.9, 0.3, 0.1],
        };
        [[0.0, -2.0, 0.3], [1.5, -1.5, 0.0]]
            .iter()
            .map(|&eye| {
                let camera = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 20.0, [16, 16]);
                let target = render(&[g], &camera, &RenderOptions::default());
                View { camera, target }
            })
            .collect()
    }

    #[test]
    fn flatten_roundtrip() {
        let m = tiny_model(1);
        let flat = flatten(&m);
        let layout = Layout::of(&m.scene);
        assert_eq!(flat.len(), layout.len());
        let back = model_from_flat(&flat, layout, &m.q);
        assert_eq!(back.scene, m.scene);
        assert_eq!(back.weights(), m.weights());
        assert!((back.q.s_cov - m.q.s_cov).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_gives_distortion() {
        let m = tiny_model(2);
        let cfg = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let v = loss(&m, &tiny_views(), &cfg, 5).unwrap();
        assert_eq!(v.l, v.d);
    }

    #[test]
    fn total_bits_arithmetic() {
        assert!((combine(0.001, 1000.0, 0.5, RateUnit::TotalBits, 256.0) - 1.5).abs() < 1e-12);
        assert!((combine(0.0, 1000.0, 0.5, RateUnit::TotalBits, 256.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hard_quantized_loss_recomposes() {
        let m = tiny_model(3);
        let views = tiny_views();
        let cfg = LossConfig {
            lambda: 0.001,
            use_noise: false,
            rate_unit: RateUnit::TotalBits,
            ..Default::default()
        };
        let v = loss(&m, &views, &cfg, 0).unwrap();
        let qm = quantize_model(&m).unwrap();
        let r = qm.estimated_report().total;
        let mut d = 0.0;
        for view in &views {
            let g = crate::prediction::decode_coupled(&qm.model.scene, &view.camera, &qm.model.nets).unwrap();
            d += distortion(&render(&g, &view.camera, &RenderOptions::default()), &view.target).unwrap();
        }
        d /= views.len() as f64;
        assert_eq!(v.r, r);
        assert!((v.l - (0.001 * r + d)).abs() < 1e-12);
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let m = tiny_model(4);
        let layout = Layout::of(&m.scene);
        let flat = flatten(&m);
        let views = tiny_views();
        let cfg = LossConfig::default();
        let a = evaluate_flat(&flat, layout, &m.q, &views, &cfg, &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
        let b = evaluate_flat(&flat, layout, &m.q, &views, &cfg, &mut ChaCha8Rng::seed_from_u64(9), true).unwrap();
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn step_rate_gradient_nonzero() {
        let mut m = tiny_model(5);
        for a in &mut m.scene.anchors {
            a.cov_scale = [-1.7, -2.1, -1.9];
        }
        let (_, grad) = loss_and_gradient(&m, &tiny_views()[..1], &LossConfig::default(), 3).unwrap();
        let r = Layout::of(&m.scene).range("covariance step");
        assert!(grad[r.start] != 0.0);
    }

    #[test]
    fn zero_steps_is_identity() {
        let m = tiny_model(6);
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let out = train(&m, &tiny_views(), &cfg).unwrap();
        assert_eq!(out.model, m);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let m = tiny_model(7);
        let cfg = TrainConfig {
            steps: 60,
            prune_interval: 0,
            seed: 11,
            ..Default::default()
        };
        let views = tiny_views();
        let a = train(&m, &views, &cfg).unwrap();
        let b = train(&m, &views, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
        let first: f64 = a.trace[..10].iter().map(|r| r.l).sum();
        let last: f64 = a.trace[50..].iter().map(|r| r.l).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn frozen_residuals_stay_zero() {
        let m = tiny_model(8);
        let cfg = TrainConfig {
            steps: 5,
            freeze_residual: true,
            ..Default::default()
        };
        let out = train(&m, &tiny_views(), &cfg).unwrap();
        assert!(out.model.scene.coupled.iter().all(|c| c.res_embedding == [0.0; RES_DIM]));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert!((cfg.learning_rate(0) - cfg.lr_init).abs() < 1e-15);
        assert!((cfg.learning_rate(cfg.steps) - cfg.lr_final).abs() < 1e-15);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[TraceRow { step: 0, l: 1.0, d: 0.5, r: 2.0 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,L,D_bits,R_bits\n0,1,0.5,2\n");
    }
}
