//! Quantization, the uniform-noise training proxy, and the probability
//! models that price every coded symbol.
//!
//! Reference embeddings are priced by a Gaussian whose parameters come from
//! a quantized hyperprior; the anchor covariance by a Gaussian conditioned
//! on the quantized reference embedding; residual embeddings by a Gaussian
//! conditioned on the reference embedding and their own hyperprior.
//! Hyperpriors themselves use a per-channel factorized model.

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::scene::{AnchorPrimitive, CoupledPrimitive, Scene, COV_DIM, REF_DIM, RES_DIM};

pub const HYPER_F_DIM: usize = 8;
pub const HYPER_G_DIM: usize = 4;
/// Factorized support is `[-SUPPORT, SUPPORT]`.
pub const SUPPORT: i64 = 64;
pub const SUPPORT_LEN: usize = (2 * SUPPORT + 1) as usize;
/// Every probability handed to the coder is at least this.
pub const PMF_FLOOR: f64 = 1.0 / 65536.0;
pub const SCALE_FLOOR: f64 = 1e-4;
pub const DEFAULT_COV_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub s_f: f64,
    pub s_g: f64,
    pub s_cov: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            s_f: 1.0,
            s_g: 1.0,
            s_cov: DEFAULT_COV_STEP,
        }
    }
}

impl QuantConfig {
    pub fn check(&self) -> Result<()> {
        if self.s_f > 0.0 && self.s_g > 0.0 && self.s_cov > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument("quantization steps must be positive".into()))
        }
    }
}

/// Round-half-to-even of `x / step`.
pub fn quantize(x: f64, step: f64) -> Result<i64> {
    let r = x / step;
    if !r.is_finite() || r.abs() > i32::MAX as f64 {
        return Err(Error::QuantizationOverflow);
    }
    Ok(r.round_ties_even() as i64)
}

pub fn dequantize(v: i64, step: f64) -> f64 {
    v as f64 * step
}

/// Training surrogate for [`quantize`]: `u + x / step` with `u` uniform in
/// `[-0.5, 0.5)`.
pub fn add_noise<S: Scalar>(x: S, step: S, u: f64) -> S {
    x / step + u
}

/// Gaussian mass on `[v - 1/2, v + 1/2]`. `v` may be a noisy (non-integer)
/// symbol during training.
pub fn discrete_gaussian_pmf<S: Scalar>(v: S, mean: S, scale: S) -> S {
    // Mirror into the lower tail where erfc is accurate.
    let d = (v - mean).abs();
    let upper = ((d - 0.5) / scale) * std::f64::consts::FRAC_1_SQRT_2;
    let lower = ((d + 0.5) / scale) * std::f64::consts::FRAC_1_SQRT_2;
    (upper.erfc() - lower.erfc()) * 0.5
}

/// [`discrete_gaussian_pmf`] floored at [`PMF_FLOOR`]: the probability a
/// symbol is priced and coded at.
pub fn gaussian_likelihood<S: Scalar>(v: S, mean: S, scale: S) -> S {
    discrete_gaussian_pmf(v, mean, scale).max_const(PMF_FLOOR)
}

pub fn rate_bits(p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("probability {p} outside (0, 1]")));
    }
    Ok(-p.log2())
}

/// `-log2 p` on either path.
pub fn bits_of<S: Scalar>(p: S) -> S {
    -(p.ln() / LN_2)
}

/// Per-channel learned logits over `[-SUPPORT, SUPPORT]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedBottleneck<S = f64> {
    pub hyper_f: Vec<Vec<S>>,
    pub hyper_g: Vec<Vec<S>>,
}

impl FactorizedBottleneck {
    /// Discretized Gaussian logits of width 2 in every channel.
    pub fn new() -> Self {
        let channel = || -> Vec<f64> {
            (-SUPPORT..=SUPPORT)
                .map(|k| -((k * k) as f64) / 8.0)
                .collect()
        };
        FactorizedBottleneck {
            hyper_f: (0..HYPER_F_DIM).map(|_| channel()).collect(),
            hyper_g: (0..HYPER_G_DIM).map(|_| channel()).collect(),
        }
    }
}

impl Default for FactorizedBottleneck {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Copy> FactorizedBottleneck<S> {
    pub fn map<T>(&self, mut f: impl FnMut(S) -> T) -> FactorizedBottleneck<T> {
        let mut m = |chs: &Vec<Vec<S>>| -> Vec<Vec<T>> {
            chs.iter().map(|c| c.iter().map(|&v| f(v)).collect()).collect()
        };
        FactorizedBottleneck {
            hyper_f: m(&self.hyper_f),
            hyper_g: m(&self.hyper_g),
        }
    }
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits
        .iter()
        .map(|l| l.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z = S::sum(e[0], &e[1..]);
    e.iter().map(|&v| v / z).collect()
}

/// Normalized probabilities of every factorized channel.
#[derive(Debug, Clone)]
pub struct FactorizedPmfs<S = f64> {
    pub hyper_f: Vec<Vec<S>>,
    pub hyper_g: Vec<Vec<S>>,
}

impl<S: Scalar> FactorizedBottleneck<S> {
    pub fn pmfs(&self) -> FactorizedPmfs<S> {
        FactorizedPmfs {
            hyper_f: self.hyper_f.iter().map(|c| softmax(c)).collect(),
            hyper_g: self.hyper_g.iter().map(|c| softmax(c)).collect(),
        }
    }
}

/// Probability of a (possibly noisy) hyperprior value under one channel:
/// the channel pmf viewed as a piecewise-constant density, integrated over
/// a unit interval centered at `x`. Equals the pmf at integers.
pub fn factorized_likelihood<S: Scalar>(pmf: &[S], x: S) -> S {
    let base = x.value().floor();
    let t = x - base;
    let at = |k: f64| -> Option<S> {
        let i = k as i64 + SUPPORT;
        (0..SUPPORT_LEN as i64).contains(&i).then(|| pmf[i as usize])
    };
    let p = match (at(base), at(base + 1.0)) {
        (Some(a), Some(b)) => a * (-t + 1.0) + b * t,
        (Some(a), None) => a * (-t + 1.0),
        (None, Some(b)) => b * t,
        (None, None) => t * 0.0,
    };
    p.max_const(PMF_FLOOR)
}

/// Hyper-encoders and parameter networks of the conditional Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCondModel<S = f64> {
    /// Reference embedding → reference hyperprior.
    pub hyper_f: Mlp<S>,
    /// Residual embedding → residual hyperprior.
    pub hyper_g: Mlp<S>,
    /// Reference hyperprior → (mean, scale) of the 32 reference channels.
    pub param_f: Mlp<S>,
    /// Quantized reference embedding → (mean, scale) of the 7 covariance
    /// scalars, in value units.
    pub param_cov: Mlp<S>,
    /// Quantized reference embedding ⊕ residual hyperprior → (mean, scale)
    /// of the 8 residual channels.
    pub param_g: Mlp<S>,
}

impl GaussianCondModel {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        GaussianCondModel {
            hyper_f: Mlp::init(REF_DIM, HYPER_F_DIM, rng),
            hyper_g: Mlp::init(RES_DIM, HYPER_G_DIM, rng),
            param_f: Mlp::init(HYPER_F_DIM, 2 * REF_DIM, rng),
            param_cov: Mlp::init(REF_DIM, 2 * COV_DIM, rng),
            param_g: Mlp::init(REF_DIM + HYPER_G_DIM, 2 * RES_DIM, rng),
        }
    }

    pub fn zeros() -> Self {
        GaussianCondModel {
            hyper_f: Mlp::zeros(REF_DIM, HYPER_F_DIM),
            hyper_g: Mlp::zeros(RES_DIM, HYPER_G_DIM),
            param_f: Mlp::zeros(HYPER_F_DIM, 2 * REF_DIM),
            param_cov: Mlp::zeros(REF_DIM, 2 * COV_DIM),
            param_g: Mlp::zeros(REF_DIM + HYPER_G_DIM, 2 * RES_DIM),
        }
    }
}

impl<S: Copy> GaussianCondModel<S> {
    pub fn nets(&self) -> [&Mlp<S>; 5] {
        [&self.hyper_f, &self.hyper_g, &self.param_f, &self.param_cov, &self.param_g]
    }

    pub fn nets_mut(&mut self) -> [&mut Mlp<S>; 5] {
        [
            &mut self.hyper_f,
            &mut self.hyper_g,
            &mut self.param_f,
            &mut self.param_cov,
            &mut self.param_g,
        ]
    }

    pub fn map<T>(&self, mut f: impl FnMut(S) -> T) -> GaussianCondModel<T> {
        GaussianCondModel {
            hyper_f: self.hyper_f.map(&mut f),
            hyper_g: self.hyper_g.map(&mut f),
            param_f: self.param_f.map(&mut f),
            param_cov: self.param_cov.map(&mut f),
            param_g: self.param_g.map(&mut f),
        }
    }
}

/// Mean and scale of one discretized Gaussian, in symbol units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams<S = f64> {
    pub mean: S,
    pub scale: S,
}

fn split_params<S: Scalar>(out: &[S], n: usize, unit: Option<S>) -> Vec<GaussianParams<S>> {
    (0..n)
        .map(|i| {
            let mean = out[i];
            let scale = out[n + i].softplus().max_const(SCALE_FLOOR);
            match unit {
                Some(s) => GaussianParams {
                    mean: mean / s,
                    scale: scale / s,
                },
                None => GaussianParams { mean, scale },
            }
        })
        .collect()
}

impl<S: Scalar> GaussianCondModel<S> {
    /// Distribution of the reference-embedding symbols given the hyperprior.
    pub fn ref_params(&self, hyper_f: &[S]) -> Vec<GaussianParams<S>> {
        split_params(&self.param_f.forward(hyper_f), REF_DIM, None)
    }

    /// Distribution of the covariance symbols given the dequantized
    /// reference embedding and the covariance step.
    pub fn cov_params(&self, ref_hat: &[S], s_cov: S) -> Vec<GaussianParams<S>> {
        split_params(&self.param_cov.forward(ref_hat), COV_DIM, Some(s_cov))
    }

    /// Distribution of the residual symbols given the dequantized reference
    /// embedding and the residual hyperprior.
    pub fn res_params(&self, ref_hat: &[S], hyper_g: &[S]) -> Vec<GaussianParams<S>> {
        let input: Vec<S> = ref_hat.iter().chain(hyper_g).copied().collect();
        split_params(&self.param_g.forward(&input), RES_DIM, None)
    }
}

/// Bits of a stream of (possibly noisy) symbols under per-symbol Gaussians.
pub fn gaussian_bits<S: Scalar>(symbols: &[S], params: &[GaussianParams<S>]) -> S {
    let bits: Vec<S> = symbols
        .iter()
        .zip(params)
        .map(|(&v, p)| bits_of(gaussian_likelihood(v, p.mean, p.scale)))
        .collect();
    S::sum(bits[0], &bits[1..])
}

pub fn factorized_bits<S: Scalar>(pmfs: &[Vec<S>], symbols: &[S]) -> S {
    let bits: Vec<S> = symbols
        .iter()
        .zip(pmfs)
        .map(|(&v, pmf)| bits_of(factorized_likelihood(pmf, v)))
        .collect();
    S::sum(bits[0], &bits[1..])
}

/// Quantized symbols of one anchor in decode order, with the probability
/// each is coded at.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorCode {
    pub hyper: [i64; HYPER_F_DIM],
    pub embedding: [i64; REF_DIM],
    pub cov: [i64; COV_DIM],
    pub hyper_probs: [f64; HYPER_F_DIM],
    pub embedding_probs: [f64; REF_DIM],
    pub cov_probs: [f64; COV_DIM],
    pub embedding_params: Vec<GaussianParams>,
    pub cov_params: Vec<GaussianParams>,
    pub bits_f: f64,
    pub bits_cov: f64,
    pub bits_hyper: f64,
}

impl AnchorCode {
    pub fn embedding_hat(&self, q: &QuantConfig) -> [f64; REF_DIM] {
        self.embedding.map(|v| dequantize(v, q.s_f))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledCode {
    pub hyper: [i64; HYPER_G_DIM],
    pub residual: [i64; RES_DIM],
    pub hyper_probs: [f64; HYPER_G_DIM],
    pub residual_probs: [f64; RES_DIM],
    pub residual_params: Vec<GaussianParams>,
    pub bits_g: f64,
    pub bits_hyper: f64,
}

fn quantize_all<const N: usize>(xs: &[f64; N], step: f64) -> Result<[i64; N]> {
    let mut out = [0i64; N];
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = quantize(x, step)?;
    }
    Ok(out)
}

fn check_support(symbols: &[i64]) -> Result<()> {
    match symbols.iter().find(|s| s.abs() > SUPPORT) {
        Some(&symbol) => Err(Error::SupportExceeded {
            symbol,
            bound: SUPPORT,
        }),
        None => Ok(()),
    }
}

fn factorized_prob(pmf: &[f64], v: i64) -> f64 {
    pmf[(v + SUPPORT) as usize].max(PMF_FLOOR)
}

/// Quantizes an anchor and prices it. Every conditioning input is a
/// quantized value, so a decoder holding the earlier symbols reproduces the
/// same probabilities.
pub fn model_anchor(
    anchor: &AnchorPrimitive,
    models: &GaussianCondModel,
    fb: &FactorizedPmfs,
    q: &QuantConfig,
) -> Result<AnchorCode> {
    let embedding = quantize_all(&anchor.ref_embedding, q.s_f)?;
    let f_hat = embedding.map(|v| dequantize(v, q.s_f));
    let hyper_out = models.hyper_f.forward(&f_hat);
    let mut hyper = [0i64; HYPER_F_DIM];
    for (h, &v) in hyper.iter_mut().zip(&hyper_out) {
        *h = quantize(v, 1.0)?;
    }
    check_support(&hyper)?;
    let cov = quantize_all(&anchor.cov_params(), q.s_cov)?;
    anchor_code_from_symbols(hyper, embedding, cov, models, fb, q)
}

/// Probabilities of already-quantized anchor symbols.
pub fn anchor_code_from_symbols(
    hyper: [i64; HYPER_F_DIM],
    embedding: [i64; REF_DIM],
    cov: [i64; COV_DIM],
    models: &GaussianCondModel,
    fb: &FactorizedPmfs,
    q: &QuantConfig,
) -> Result<AnchorCode> {
    check_support(&hyper)?;
    let hyper_probs: [f64; HYPER_F_DIM] =
        std::array::from_fn(|c| factorized_prob(&fb.hyper_f[c], hyper[c]));
    let hyper_hat = hyper.map(|v| v as f64);
    let embedding_params = models.ref_params(&hyper_hat);
    let embedding_probs: [f64; REF_DIM] = std::array::from_fn(|i| {
        let p = &embedding_params[i];
        gaussian_likelihood(embedding[i] as f64, p.mean, p.scale)
    });
    let f_hat = embedding.map(|v| dequantize(v, q.s_f));
    let cov_params = models.cov_params(&f_hat, q.s_cov);
    let cov_probs: [f64; COV_DIM] = std::array::from_fn(|i| {
        let p = &cov_params[i];
        gaussian_likelihood(cov[i] as f64, p.mean, p.scale)
    });
    let sum_bits = |ps: &[f64]| ps.iter().map(|&p| -p.log2()).sum::<f64>();
    Ok(AnchorCode {
        hyper,
        embedding,
        cov,
        bits_f: sum_bits(&embedding_probs),
        bits_cov: sum_bits(&cov_probs),
        bits_hyper: sum_bits(&hyper_probs),
        hyper_probs,
        embedding_probs,
        cov_probs,
        embedding_params,
        cov_params,
    })
}

pub fn model_coupled(
    coupled: &CoupledPrimitive,
    ref_hat: &[f64; REF_DIM],
    models: &GaussianCondModel,
    fb: &FactorizedPmfs,
    q: &QuantConfig,
) -> Result<CoupledCode> {
    let residual = quantize_all(&coupled.res_embedding, q.s_g)?;
    let g_hat = residual.map(|v| dequantize(v, q.s_g));
    let hyper_out = models.hyper_g.forward(&g_hat);
    let mut hyper = [0i64; HYPER_G_DIM];
    for (h, &v) in hyper.iter_mut().zip(&hyper_out) {
        *h = quantize(v, 1.0)?;
    }
    coupled_code_from_symbols(hyper, residual, ref_hat, models, fb)
}

pub fn coupled_code_from_symbols(
    hyper: [i64; HYPER_G_DIM],
    residual: [i64; RES_DIM],
    ref_hat: &[f64; REF_DIM],
    models: &GaussianCondModel,
    fb: &FactorizedPmfs,
) -> Result<CoupledCode> {
    check_support(&hyper)?;
    let hyper_probs: [f64; HYPER_G_DIM] =
        std::array::from_fn(|c| factorized_prob(&fb.hyper_g[c], hyper[c]));
    let residual_params = models.res_params(ref_hat, &hyper.map(|v| v as f64));
    let residual_probs: [f64; RES_DIM] = std::array::from_fn(|i| {
        let p = &residual_params[i];
        gaussian_likelihood(residual[i] as f64, p.mean, p.scale)
    });
    let sum_bits = |ps: &[f64]| ps.iter().map(|&p| -p.log2()).sum::<f64>();
    Ok(CoupledCode {
        hyper,
        residual,
        bits_g: sum_bits(&residual_probs),
        bits_hyper: sum_bits(&hyper_probs),
        hyper_probs,
        residual_probs,
        residual_params,
    })
}

/// Estimated bit budget of a scene, split by stream.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RateReport {
    pub bits_f: f64,
    #[serde(rename = "bits_Σ", alias = "bits_sigma")]
    pub bits_sigma: f64,
    pub bits_g: f64,
    pub bits_hyper: f64,
    pub bits_locations: f64,
    pub total: f64,
    pub per_anchor_avg: f64,
    pub per_coupled_avg: f64,
}

/// Per-primitive totals before they are folded into a [`RateReport`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RateParts {
    pub bits_f: f64,
    pub bits_sigma: f64,
    pub bits_hyper_f: f64,
    pub bits_g: f64,
    pub bits_hyper_g: f64,
    pub bits_locations: f64,
    pub anchors: usize,
    pub coupled: usize,
}

impl RateParts {
    pub fn report(&self) -> RateReport {
        let anchor_bits = self.bits_f + self.bits_sigma + self.bits_hyper_f + self.bits_locations;
        let coupled_bits = self.bits_g + self.bits_hyper_g;
        let avg = |b: f64, n: usize| if n == 0 { 0.0 } else { b / n as f64 };
        RateReport {
            bits_f: self.bits_f,
            bits_sigma: self.bits_sigma,
            bits_g: self.bits_g,
            bits_hyper: self.bits_hyper_f + self.bits_hyper_g,
            bits_locations: self.bits_locations,
            total: anchor_bits + coupled_bits,
            per_anchor_avg: avg(anchor_bits, self.anchors),
            per_coupled_avg: avg(coupled_bits, self.coupled),
        }
    }
}

/// Codes for every primitive of a scene, in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCodes {
    pub anchors: Vec<AnchorCode>,
    pub coupled: Vec<CoupledCode>,
}

pub fn model_scene(
    scene: &Scene,
    models: &GaussianCondModel,
    fb: &FactorizedBottleneck,
    q: &QuantConfig,
) -> Result<SceneCodes> {
    scene.check()?;
    let pmfs = fb.pmfs();
    let anchors = scene
        .anchors
        .iter()
        .map(|a| model_anchor(a, models, &pmfs, q))
        .collect::<Result<Vec<_>>>()?;
    let mut coupled = Vec::with_capacity(scene.coupled.len());
    for (a, code) in anchors.iter().enumerate() {
        let f_hat = code.embedding_hat(q);
        for c in scene.coupled_of(a) {
            coupled.push(model_coupled(c, &f_hat, models, &pmfs, q)?);
        }
    }
    Ok(SceneCodes { anchors, coupled })
}

impl SceneCodes {
    /// Sums in storage order.
    pub fn parts(&self, bits_locations: f64) -> RateParts {
        let mut p = RateParts {
            bits_locations,
            anchors: self.anchors.len(),
            coupled: self.coupled.len(),
            ..Default::default()
        };
        for a in &self.anchors {
            p.bits_f += a.bits_f;
            p.bits_sigma += a.bits_cov;
            p.bits_hyper_f += a.bits_hyper;
        }
        for c in &self.coupled {
            p.bits_g += c.bits_g;
            p.bits_hyper_g += c.bits_hyper;
        }
        p
    }
}

/// Rate of a scene with locations coded on the default grid.
pub fn scene_rate(
    scene: &Scene,
    models: &GaussianCondModel,
    fb: &FactorizedBottleneck,
    q: &QuantConfig,
) -> Result<RateReport> {
    let codes = model_scene(scene, models, fb, q)?;
    let locations: Vec<_> = scene.anchors.iter().map(|a| a.location).collect();
    let loc_bits = if locations.is_empty() {
        0.0
    } else {
        let grid = crate::coder::LocationGrid::for_points(&locations);
        crate::coder::estimate_location_bits(&locations, &grid)?
    };
    Ok(codes.parts(loc_bits).report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, Tape};

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(2.6, 1.0).unwrap(), 3);
        assert_eq!(quantize(0.004, 0.01).unwrap(), 0);
        assert_eq!(quantize(-1.25, 0.5).unwrap(), -2);
        assert_eq!(quantize(2.5, 1.0).unwrap(), 2);
        assert_eq!(quantize(3.5, 1.0).unwrap(), 4);
        assert!(matches!(quantize(1e12, 1.0), Err(Error::QuantizationOverflow)));
        assert!(matches!(quantize(f64::NAN, 1.0), Err(Error::QuantizationOverflow)));
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(3, 1.0), 3.0);
        assert_eq!(dequantize(0, 0.01), 0.0);
    }

    #[test]
    fn noise_examples() {
        assert_eq!(add_noise(2.0, 1.0, 0.0), 2.0);
        assert_eq!(add_noise(2.0, 0.5, 0.25), 4.25);
        let tape = Tape::new();
        let x = tape.var(0.3);
        let y = add_noise(x, x.lift(0.25), 0.1);
        let g = tape.backward(&[(y, 1.0)]);
        assert_eq!(g.wrt(x), 4.0);
    }

    #[test]
    fn gaussian_pmf_examples() {
        let p0 = discrete_gaussian_pmf(0.0, 0.0, 1.0);
        assert!((p0 - 0.382925).abs() < 1e-5);
        assert_eq!(discrete_gaussian_pmf(5.0, 5.0, 1.0), p0);
        let total: f64 = (-64..=64).map(|v| discrete_gaussian_pmf(v as f64, 0.0, 3.0)).sum();
        assert!((total - 1.0).abs() < 1e-6);
        // The far tail is floored only where it is priced.
        assert!(discrete_gaussian_pmf(40.0, 0.0, 1.0) < PMF_FLOOR);
        assert_eq!(gaussian_likelihood(40.0, 0.0, 1.0), PMF_FLOOR);
    }

    #[test]
    fn rate_bits_examples() {
        assert_eq!(rate_bits(0.5).unwrap(), 1.0);
        assert_eq!(rate_bits(1.0).unwrap(), 0.0);
        assert!((rate_bits(0.382925).unwrap() - 1.3850).abs() < 1e-3);
        assert!(rate_bits(0.0).is_err());
        assert!(rate_bits(-0.1).is_err());
    }

    #[test]
    fn pmf_gradient_matches_finite_difference() {
        for &(v, m, s) in &[(0.3, 0.1, 0.8), (2.7, -0.4, 1.5), (-1.2, 0.0, 0.3)] {
            let tape = Tape::new();
            let xs = tape.vars(&[v, m, s]);
            let b = bits_of(gaussian_likelihood(xs[0], xs[1], xs[2]));
            let g = tape.backward(&[(b, 1.0)]);
            let f = |x: &[f64]| bits_of(gaussian_likelihood(x[0], x[1], x[2]));
            for i in 0..3 {
                let fd = central_difference(f, &[v, m, s], i, 1e-5);
                let ad = g.wrt(xs[i]);
                assert!((fd - ad).abs() <= 1e-6 + 1e-4 * ad.abs(), "{i}: {fd} vs {ad}");
            }
        }
    }

    #[test]
    fn factorized_channels_normalize() {
        let fb = FactorizedBottleneck::new();
        for ch in fb.pmfs().hyper_f.iter().chain(&fb.pmfs().hyper_g) {
            assert!((ch.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn factorized_likelihood_interpolates() {
        let pmf = FactorizedBottleneck::new().pmfs().hyper_f[0].clone();
        let at = |k: i64| pmf[(k + SUPPORT) as usize];
        assert_eq!(factorized_likelihood(&pmf, 0.0), at(0));
        assert_eq!(factorized_likelihood(&pmf, -3.0), at(-3));
        let mid = factorized_likelihood(&pmf, 0.25);
        assert!((mid - (0.75 * at(0) + 0.25 * at(1))).abs() < 1e-15);
        assert_eq!(factorized_likelihood(&pmf, 100.0), PMF_FLOOR);
    }

    #[test]
    fn zero_anchor_codes_to_zero_symbols() {
        let anchor = AnchorPrimitive {
            location: [0.0; 3],
            cov_scale: [0.0; 3],
            cov_rotation: [0.0; 4],
            ref_embedding: [0.0; REF_DIM],
        };
        let models = GaussianCondModel::zeros();
        let fb = FactorizedBottleneck::new();
        let pmfs = fb.pmfs();
        let code = model_anchor(&anchor, &models, &pmfs, &QuantConfig::default()).unwrap();
        assert_eq!(code.hyper, [0; HYPER_F_DIM]);
        assert_eq!(code.embedding, [0; REF_DIM]);
        assert_eq!(code.cov, [0; COV_DIM]);
        // Zero networks: mean 0, scale softplus(0) for embeddings, and the
        // same scale divided by the step for covariance.
        let s0 = 2f64.ln();
        let pf = gaussian_likelihood(0.0, 0.0, s0);
        let pc = gaussian_likelihood(0.0, 0.0, s0 / DEFAULT_COV_STEP);
        let ph = pmfs.hyper_f[0][SUPPORT as usize];
        assert!((code.bits_f - 32.0 * -pf.log2()).abs() < 1e-9);
        assert!((code.bits_cov - 7.0 * -pc.log2()).abs() < 1e-9);
        assert!((code.bits_hyper - 8.0 * -ph.log2()).abs() < 1e-9);
    }

    #[test]
    fn support_is_enforced() {
        let mut models = GaussianCondModel::zeros();
        models.hyper_f.output_bias_mut()[2] = 70.0;
        let anchor = AnchorPrimitive::new([0.0; 3], 1.0);
        let pmfs = FactorizedBottleneck::new().pmfs();
        assert!(matches!(
            model_anchor(&anchor, &models, &pmfs, &QuantConfig::default()),
            Err(Error::SupportExceeded { symbol: 70, .. })
        ));
    }

    #[test]
    fn sharper_scale_is_cheaper_at_the_mean() {
        let mut last = f64::INFINITY;
        for s in [4.0, 2.0, 1.0, 0.5, 0.25] {
            let b = rate_bits(discrete_gaussian_pmf(3.0, 3.0, s)).unwrap();
            assert!(b < last);
            last = b;
        }
    }
}
