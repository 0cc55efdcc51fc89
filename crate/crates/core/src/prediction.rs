//! Inter-primitive prediction: coupled-primitive geometry comes from an
//! affine warp of its anchor, and appearance from view-conditioned networks.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::math::{covariance_from_scale_rot, quat_mul, quat_normalize, Quat, Vec3};
use crate::nn::Mlp;
use crate::scene::{AnchorPrimitive, Camera, CoupledPrimitive, RenderableGaussian, Scene, REF_DIM, RES_DIM};

pub const FEATURE_DIM: usize = REF_DIM + RES_DIM;
pub const VIEW_DIM: usize = 4;
pub const APPEARANCE_IN: usize = VIEW_DIM + FEATURE_DIM;
/// Starting opacity logit: ten coincident primitives at sigmoid(-2) add up
/// to roughly 0.7 combined opacity.
pub const OPACITY_INIT_BIAS: f64 = -2.0;

/// `h = f ⊕ g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionFeatures<S = f64> {
    pub values: [S; FEATURE_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams<S = f64> {
    pub translation: Vec3<S>,
    /// Diagonal of the scaling matrix, strictly positive.
    pub scale: Vec3<S>,
    pub rotation: Quat<S>,
}

/// Direction from the camera center to the anchor, and the inverse of
/// their distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewEmbedding<S = f64> {
    pub direction: Vec3<S>,
    pub inv_distance: S,
}

impl<S: Copy> ViewEmbedding<S> {
    pub fn to_array(&self) -> [S; VIEW_DIM] {
        let [x, y, z] = self.direction;
        [x, y, z, self.inv_distance]
    }
}

/// Translation, scale and rotation heads over `h`; opacity and color heads
/// over `ε ⊕ h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionNetworks<S = f64> {
    pub translation: Mlp<S>,
    pub scale: Mlp<S>,
    pub rotation: Mlp<S>,
    pub opacity: Mlp<S>,
    pub color: Mlp<S>,
}

impl PredictionNetworks {
    pub fn zeros() -> Self {
        PredictionNetworks {
            translation: Mlp::zeros(FEATURE_DIM, 3),
            scale: Mlp::zeros(FEATURE_DIM, 3),
            rotation: Mlp::zeros(FEATURE_DIM, 4),
            opacity: Mlp::zeros(APPEARANCE_IN, 1),
            color: Mlp::zeros(APPEARANCE_IN, 3),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        PredictionNetworks {
            translation: Mlp::init(FEATURE_DIM, 3, rng),
            scale: Mlp::init(FEATURE_DIM, 3, rng),
            rotation: Mlp::init(FEATURE_DIM, 4, rng),
            opacity: {
                let mut m = Mlp::init(APPEARANCE_IN, 1, rng);
                m.output_bias_mut()[0] = OPACITY_INIT_BIAS;
                m
            },
            color: Mlp::init(APPEARANCE_IN, 3, rng),
        }
    }
}

impl<S: Copy> PredictionNetworks<S> {
    pub fn nets(&self) -> [&Mlp<S>; 5] {
        [&self.translation, &self.scale, &self.rotation, &self.opacity, &self.color]
    }

    pub fn nets_mut(&mut self) -> [&mut Mlp<S>; 5] {
        [
            &mut self.translation,
            &mut self.scale,
            &mut self.rotation,
            &mut self.opacity,
            &mut self.color,
        ]
    }

    pub fn map<T>(&self, mut f: impl FnMut(S) -> T) -> PredictionNetworks<T> {
        PredictionNetworks {
            translation: self.translation.map(&mut f),
            scale: self.scale.map(&mut f),
            rotation: self.rotation.map(&mut f),
            opacity: self.opacity.map(&mut f),
            color: self.color.map(&mut f),
        }
    }
}

pub fn fuse<S: Copy>(ref_embedding: &[S; REF_DIM], res_embedding: &[S; RES_DIM]) -> PredictionFeatures<S> {
    let values = std::array::from_fn(|i| {
        if i < REF_DIM {
            ref_embedding[i]
        } else {
            res_embedding[i - REF_DIM]
        }
    });
    PredictionFeatures { values }
}

/// Zero network output is the identity warp.
pub fn predict_affine<S: Scalar>(h: &PredictionFeatures<S>, nets: &PredictionNetworks<S>) -> AffineParams<S> {
    let t = nets.translation.forward(&h.values);
    let s = nets.scale.forward(&h.values);
    let r = nets.rotation.forward(&h.values);
    AffineParams {
        translation: [t[0], t[1], t[2]],
        scale: [s[0].exp(), s[1].exp(), s[2].exp()],
        rotation: quat_normalize([r[0] + 1.0, r[1], r[2], r[3]]),
    }
}

/// Warped geometry of a coupled primitive in decomposed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpedGeometry<S = f64> {
    pub location: Vec3<S>,
    pub cov_scale: Vec3<S>,
    pub cov_rotation: Quat<S>,
}

/// Applies the warp to anchor geometry: location is translated, log-scales
/// add `ln(scale)`, rotations compose with the warp applied last.
pub fn apply_affine<S: Scalar>(
    location: Vec3<S>,
    cov_scale: Vec3<S>,
    cov_rotation: Quat<S>,
    params: &AffineParams<S>,
) -> WarpedGeometry<S> {
    WarpedGeometry {
        location: std::array::from_fn(|d| location[d] + params.translation[d]),
        cov_scale: std::array::from_fn(|d| cov_scale[d] + params.scale[d].ln()),
        cov_rotation: quat_normalize(quat_mul(params.rotation, quat_normalize(cov_rotation))),
    }
}

impl WarpedGeometry {
    pub fn covariance(&self) -> crate::math::Mat3 {
        covariance_from_scale_rot(self.cov_scale, self.cov_rotation)
    }
}

pub fn view_embedding<S: Scalar>(camera_center: Vec3, anchor_location: Vec3<S>) -> Result<ViewEmbedding<S>> {
    let d: Vec3<S> = std::array::from_fn(|i| anchor_location[i] - camera_center[i]);
    let dist2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    if !(dist2.value() > 0.0) {
        return Err(Error::DegenerateView);
    }
    let dist = dist2.sqrt();
    Ok(ViewEmbedding {
        direction: [d[0] / dist, d[1] / dist, d[2] / dist],
        inv_distance: dist.recip_scaled(1.0),
    })
}

/// Opacity and color, both squashed into (0, 1).
pub fn predict_appearance<S: Scalar>(
    h: &PredictionFeatures<S>,
    view: &ViewEmbedding<S>,
    nets: &PredictionNetworks<S>,
) -> (S, Vec3<S>) {
    let eps = view.to_array();
    let input: [S; APPEARANCE_IN] = std::array::from_fn(|i| {
        if i < VIEW_DIM {
            eps[i]
        } else {
            h.values[i - VIEW_DIM]
        }
    });
    let o = nets.opacity.forward(&input);
    let c = nets.color.forward(&input);
    (o[0].sigmoid(), [c[0].sigmoid(), c[1].sigmoid(), c[2].sigmoid()])
}

/// Everything predicted for one coupled primitive.
#[derive(Debug, Clone, Copy)]
pub struct PredictedPrimitive<S = f64> {
    pub geometry: WarpedGeometry<S>,
    pub opacity: S,
    pub color: Vec3<S>,
}

/// fuse → affine → warp → appearance for one coupled primitive.
pub fn predict_primitive<S: Scalar>(
    anchor: &AnchorPrimitive<S>,
    coupled: &CoupledPrimitive<S>,
    view: &ViewEmbedding<S>,
    nets: &PredictionNetworks<S>,
) -> PredictedPrimitive<S> {
    let h = fuse(&anchor.ref_embedding, &coupled.res_embedding);
    let affine = predict_affine(&h, nets);
    let geometry = apply_affine(anchor.location, anchor.cov_scale, anchor.cov_rotation, &affine);
    let (opacity, color) = predict_appearance(&h, view, nets);
    PredictedPrimitive {
        geometry,
        opacity,
        color,
    }
}

/// Renderable Gaussians for every coupled primitive as seen from `camera`,
/// anchor-major.
pub fn decode_coupled(
    scene: &Scene,
    camera: &Camera,
    nets: &PredictionNetworks,
) -> Result<Vec<RenderableGaussian>> {
    scene.check()?;
    let center = camera.center();
    let per_anchor: Vec<Result<Vec<RenderableGaussian>>> = scene
        .anchors
        .par_iter()
        .enumerate()
        .map(|(a, anchor)| {
            let view = view_embedding(center, anchor.location)?;
            Ok(scene
                .coupled_of(a)
                .iter()
                .map(|c| {
                    let p = predict_primitive(anchor, c, &view, nets);
                    RenderableGaussian {
                        location: p.geometry.location,
                        covariance: p.geometry.covariance(),
                        opacity: p.opacity,
                        color: p.color,
                    }
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(scene.coupled.len());
    for block in per_anchor {
        out.extend(block?);
    }
    Ok(out)
}
