//! EWA projection of 3D Gaussians to screen-space splats.

use crate::autodiff::Scalar;
use crate::math::{Mat3, Vec3};
use crate::scene::{Camera, RenderableGaussian};

pub const NEAR: f64 = 0.01;
/// Added to the screen-space covariance diagonal.
pub const LOW_PASS: f64 = 0.3;
/// Cull margin in screen-space standard deviations.
const CULL_SIGMAS: f64 = 3.0;

/// Screen-space footprint of one Gaussian. `conic` holds the upper
/// triangle `(a, b, c)` of the inverse covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<S = f64> {
    pub mean2d: [S; 2],
    pub cov2d: [S; 3],
    pub conic: [S; 3],
    pub depth: f64,
}

/// Projects a location/covariance pair; `None` when culled.
pub fn project_geometry<S: Scalar>(location: &Vec3<S>, cov: &Mat3<S>, cam: &Camera) -> Option<Projection<S>> {
    let r = &cam.rotation;
    let t: [S; 3] = std::array::from_fn(|i| {
        location[0] * r[i][0] + location[1] * r[i][1] + location[2] * r[i][2] + cam.translation[i]
    });
    let depth = t[2].value();
    if !(depth > NEAR) {
        return None;
    }
    let [fx, fy] = cam.focal;
    let [cx, cy] = cam.principal_point;
    let inv_z = t[2].recip_scaled(1.0);
    let u = t[0] * inv_z;
    let v = t[1] * inv_z;
    let mean2d = [u * fx + cx, v * fy + cy];
    // J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]; T = J R.
    let j00 = inv_z * fx;
    let j02 = -(u * inv_z) * fx;
    let j11 = inv_z * fy;
    let j12 = -(v * inv_z) * fy;
    let tm: [[S; 3]; 2] = [
        std::array::from_fn(|k| j00 * r[0][k] + j02 * r[2][k]),
        std::array::from_fn(|k| j11 * r[1][k] + j12 * r[2][k]),
    ];
    // T Σ T^T.
    let ts: [[S; 3]; 2] = std::array::from_fn(|i| {
        std::array::from_fn(|k| tm[i][0] * cov[0][k] + tm[i][1] * cov[1][k] + tm[i][2] * cov[2][k])
    });
    let dot = |a: &[S; 3], b: &[S; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let a = dot(&ts[0], &tm[0]) + LOW_PASS;
    let b = dot(&ts[0], &tm[1]);
    let c = dot(&ts[1], &tm[1]) + LOW_PASS;

    let (av, bv, cv) = (a.value(), b.value(), c.value());
    let det_v = av * cv - bv * bv;
    if !(det_v > 0.0) || !mean2d[0].value().is_finite() || !mean2d[1].value().is_finite() {
        return None;
    }
    let sigma = max_eigenvalue(av, bv, cv).sqrt();
    let (mx, my) = (mean2d[0].value(), mean2d[1].value());
    let margin = CULL_SIGMAS * sigma;
    if mx < -margin || mx > cam.width() as f64 + margin || my < -margin || my > cam.height() as f64 + margin {
        return None;
    }
    let inv_det = (a * c - b * b).recip_scaled(1.0);
    Some(Projection {
        mean2d,
        cov2d: [a, b, c],
        conic: [c * inv_det, -(b * inv_det), a * inv_det],
        depth,
    })
}

pub fn max_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    let mid = 0.5 * (a + c);
    let half = 0.5 * (a - c);
    mid + (half * half + b * b).sqrt()
}

/// A projected Gaussian ready for rasterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Splat2D {
    pub fn from_projection(p: &Projection, opacity: f64, color: [f64; 3]) -> Self {
        let [a, b, c] = p.cov2d;
        Splat2D {
            mean2d: p.mean2d,
            cov2d: [[a, b], [b, c]],
            conic: p.conic,
            depth: p.depth,
            opacity,
            color,
        }
    }
}

pub fn project(g: &RenderableGaussian, cam: &Camera) -> Option<Splat2D> {
    project_geometry(&g.location, &g.covariance, cam).map(|p| Splat2D::from_projection(&p, g.opacity, g.color))
}
