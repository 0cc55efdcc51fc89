//! Hybrid primitive structure: anchors carrying full geometry plus a
//! reference embedding, and coupled primitives carrying only a residual
//! embedding.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{covariance_from_scale_rot, quat_normalize, Mat3, Quat, Vec3, IDENTITY_QUAT};

pub const REF_DIM: usize = 32;
pub const RES_DIM: usize = 8;
pub const DEFAULT_K: usize = 10;
/// Scalars in the decomposed covariance: three log-scales and a quaternion.
pub const COV_DIM: usize = 7;

const EMBEDDING_INIT_STD: f64 = 0.01;
/// Initial anchor extent as a fraction of the mean nearest-anchor distance.
pub const INIT_EXTENT_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPrimitive<S = f64> {
    pub location: Vec3<S>,
    pub cov_scale: Vec3<S>,
    pub cov_rotation: Quat<S>,
    #[serde(with = "serde_arrays")]
    pub ref_embedding: [S; REF_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledPrimitive<S = f64> {
    pub anchor_index: usize,
    pub res_embedding: [S; RES_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderableGaussian {
    pub location: Vec3,
    pub covariance: Mat3,
    pub opacity: f64,
    pub color: Vec3,
}

/// Anchors plus their coupled primitives, stored anchor-major: the coupled
/// primitives of anchor `i` occupy `coupled[i * k..(i + 1) * k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene<S = f64> {
    pub anchors: Vec<AnchorPrimitive<S>>,
    pub coupled: Vec<CoupledPrimitive<S>>,
    pub k: usize,
}

impl<S: Copy> AnchorPrimitive<S> {
    /// The seven covariance scalars in coding order.
    pub fn cov_params(&self) -> [S; COV_DIM] {
        let [a, b, c] = self.cov_scale;
        let [w, x, y, z] = self.cov_rotation;
        [a, b, c, w, x, y, z]
    }

    pub fn set_cov_params(&mut self, p: [S; COV_DIM]) {
        self.cov_scale = [p[0], p[1], p[2]];
        self.cov_rotation = [p[3], p[4], p[5], p[6]];
    }
}

impl AnchorPrimitive {
    pub fn new(location: Vec3, extent: f64) -> Self {
        AnchorPrimitive {
            location,
            cov_scale: [extent.ln(); 3],
            cov_rotation: IDENTITY_QUAT,
            ref_embedding: [0.0; REF_DIM],
        }
    }

    /// `R diag(exp(s))^2 R^T`.
    pub fn covariance(&self) -> Mat3 {
        covariance_from_scale_rot(self.cov_scale, quat_normalize(self.cov_rotation))
    }

    pub fn check(&self) -> Result<()> {
        let q = self.cov_rotation;
        let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "anchor rotation norm {n} is not 1"
            )));
        }
        if self.cov_scale.iter().any(|s| !s.exp().is_finite() || s.exp() <= 0.0) {
            return Err(Error::InvalidArgument("anchor scale not finite".into()));
        }
        Ok(())
    }
}

impl<S> Scene<S> {
    pub fn coupled_of(&self, anchor: usize) -> &[CoupledPrimitive<S>] {
        &self.coupled[anchor * self.k..(anchor + 1) * self.k]
    }

    pub fn check(&self) -> Result<()> {
        if self.coupled.len() != self.k * self.anchors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} coupled primitives for {} anchors with K = {}",
                self.coupled.len(),
                self.anchors.len(),
                self.k
            )));
        }
        for (i, c) in self.coupled.iter().enumerate() {
            if c.anchor_index != i / self.k.max(1) {
                return Err(Error::InvalidArgument(format!(
                    "coupled primitive {i} points at anchor {}",
                    c.anchor_index
                )));
            }
        }
        Ok(())
    }
}

/// One anchor per occupied voxel, placed at the centroid of the voxel's
/// points. The result is independent of input order.
pub fn init_anchors<R: Rng + ?Sized>(
    points: &[Vec3],
    voxel_size: f64,
    rng: &mut R,
) -> Result<Vec<AnchorPrimitive>> {
    if points.is_empty() {
        return Err(Error::NoPoints);
    }
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidArgument("voxel size must be positive".into()));
    }
    let mut voxels: BTreeMap<[i64; 3], Vec<Vec3>> = BTreeMap::new();
    for p in points {
        voxels.entry(voxel_key(p, voxel_size)).or_default().push(*p);
    }
    let centroids: Vec<Vec3> = voxels
        .into_values()
        .map(|mut pts| {
            // Canonical summation order keeps the centroid bit-identical
            // under input permutation.
            pts.sort_by(|a, b| {
                a[0].total_cmp(&b[0])
                    .then(a[1].total_cmp(&b[1]))
                    .then(a[2].total_cmp(&b[2]))
            });
            let n = pts.len() as f64;
            let mut c = [0.0; 3];
            for p in &pts {
                for d in 0..3 {
                    c[d] += p[d];
                }
            }
            c.map(|v| v / n)
        })
        .collect();

    let nn = mean_nearest_neighbor(&centroids, voxel_size);
    let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
    Ok(centroids
        .into_iter()
        .map(|c| {
            let mut a = AnchorPrimitive::new(c, INIT_EXTENT_FRACTION * nn);
            for v in a.ref_embedding.iter_mut() {
                *v = normal.sample(rng);
            }
            a
        })
        .collect())
}

pub(crate) fn voxel_key(p: &Vec3, voxel_size: f64) -> [i64; 3] {
    p.map(|v| (v / voxel_size).floor() as i64)
}

/// Mean distance from each location to its nearest other location, found
/// with a hash grid of cell size `cell`. Falls back to `cell` for a single
/// location.
fn mean_nearest_neighbor(locs: &[Vec3], cell: f64) -> f64 {
    if locs.len() < 2 {
        return cell;
    }
    let mut grid: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in locs.iter().enumerate() {
        grid.entry(voxel_key(p, cell)).or_default().push(i);
    }
    let mut total = 0.0;
    for (i, p) in locs.iter().enumerate() {
        let key = voxel_key(p, cell);
        let mut best = f64::INFINITY;
        let mut ring: i64 = 0;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let k = [key[0] + dx, key[1] + dy, key[2] + dz];
                        for &j in grid.get(&k).into_iter().flatten() {
                            if j != i {
                                let d = crate::math::norm3(crate::math::sub3(*p, locs[j]));
                                best = best.min(d);
                            }
                        }
                    }
                }
            }
            // Every point outside ring r is at least r * cell away.
            if best <= ring as f64 * cell {
                break;
            }
            ring += 1;
        }
        total += best;
    }
    total / locs.len() as f64
}

/// Attaches `k` zero-initialized coupled primitives to every anchor.
pub fn attach_coupled(anchors: Vec<AnchorPrimitive>, k: usize) -> Scene {
    let coupled = (0..anchors.len())
        .flat_map(|a| {
            (0..k).map(move |_| CoupledPrimitive {
                anchor_index: a,
                res_embedding: [0.0; RES_DIM],
            })
        })
        .collect();
    Scene { anchors, coupled, k }
}

/// Indices of anchors whose accumulated max opacity reaches `threshold`.
pub fn surviving_anchors(stats: &[f64], threshold: f64) -> Vec<usize> {
    stats
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(i, _)| i)
        .collect()
}

impl<S: Copy> Scene<S> {
    /// Keeps only the listed anchors (in the given order) and their coupled
    /// primitives, remapping indices.
    pub fn select_anchors(&self, keep: &[usize]) -> Scene<S> {
        let mut anchors = Vec::with_capacity(keep.len());
        let mut coupled = Vec::with_capacity(keep.len() * self.k);
        for (new, &old) in keep.iter().enumerate() {
            anchors.push(self.anchors[old]);
            coupled.extend(self.coupled_of(old).iter().map(|c| CoupledPrimitive {
                anchor_index: new,
                res_embedding: c.res_embedding,
            }));
        }
        Scene {
            anchors,
            coupled,
            k: self.k,
        }
    }
}

/// Removes anchors whose accumulated max opacity is below `threshold`.
pub fn prune_anchors(scene: &Scene, stats: &[f64], threshold: f64) -> Result<Scene> {
    if stats.len() != scene.anchors.len() {
        return Err(Error::InvalidArgument(format!(
            "{} opacity stats for {} anchors",
            stats.len(),
            scene.anchors.len()
        )));
    }
    let keep = surviving_anchors(stats, threshold);
    if keep.is_empty() {
        return Err(Error::SceneEmptied);
    }
    Ok(scene.select_anchors(&keep))
}

/// Pinhole camera, world-to-camera `x_cam = R x + t`, looking down +z with
/// +y pointing down the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    pub resolution: [u32; 2],
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` roughly up in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, resolution: [u32; 2]) -> Self {
        let normalize = |v: Vec3| {
            let n = crate::math::norm3(v);
            v.map(|c| c / n)
        };
        let cross = |a: Vec3, b: Vec3| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let forward = normalize(crate::math::sub3(target, eye));
        let right = normalize(cross(forward, up));
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let translation = crate::math::mat_vec(&rotation, eye).map(|v| -v);
        Camera {
            rotation,
            translation,
            focal: [focal, focal],
            principal_point: [resolution[0] as f64 / 2.0, resolution[1] as f64 / 2.0],
            resolution,
        }
    }

    /// Camera center in world space, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        let rt = crate::math::mat_transpose(&self.rotation);
        crate::math::mat_vec(&rt, self.translation).map(|v| -v)
    }

    pub fn width(&self) -> usize {
        self.resolution[0] as usize
    }

    pub fn height(&self) -> usize {
        self.resolution[1] as usize
    }

    pub fn check(&self) -> Result<()> {
        let r = &self.rotation;
        let rrt = crate::math::mat_mul(r, &crate::math::mat_transpose(r));
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                if (rrt[i][j] - e).abs() > 1e-6 {
                    return Err(Error::InvalidArgument("camera rotation not orthonormal".into()));
                }
            }
        }
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return Err(Error::InvalidArgument("camera focal must be positive".into()));
        }
        Ok(())
    }
}

mod serde_arrays {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, T: Serialize, const N: usize>(
        v: &[T; N],
        s: S,
    ) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Deserialize<'de>, const N: usize>(
        d: D,
    ) -> Result<[T; N], D::Error> {
        let v = Vec::<T>::deserialize(d)?;
        let n = v.len();
        v.try_into()
            .map_err(|_| serde::de::Error::invalid_length(n, &"fixed-size array"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn single_voxel_collapses_to_centroid() {
        let pts = [[0.1, 0.2, 0.3], [0.5, 0.4, 0.2], [0.3, 0.9, 0.1]];
        let a = init_anchors(&pts, 1.0, &mut rng()).unwrap();
        assert_eq!(a.len(), 1);
        let c = [0.9 / 3.0, 1.5 / 3.0, 0.6 / 3.0];
        for d in 0..3 {
            assert!((a[0].location[d] - c[d]).abs() < 1e-12);
        }
        // A single anchor measures its extent against the voxel size.
        assert_eq!(a[0].cov_scale, [INIT_EXTENT_FRACTION.ln(); 3]);
        assert_eq!(a[0].cov_rotation, IDENTITY_QUAT);
    }

    #[test]
    fn separated_voxels_give_separate_anchors() {
        let pts = [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let a = init_anchors(&pts, 1.0, &mut rng()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].location, [0.0, 0.0, 0.0]);
        assert_eq!(a[1].location, [5.0, 0.0, 0.0]);
        assert!((a[0].cov_scale[0] - (INIT_EXTENT_FRACTION * 5.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn init_errors() {
        assert!(matches!(init_anchors(&[], 1.0, &mut rng()), Err(Error::NoPoints)));
        assert!(init_anchors(&[[0.0; 3]], 0.0, &mut rng()).is_err());
    }

    #[test]
    fn embeddings_are_small_random() {
        let pts: Vec<Vec3> = (0..200).map(|i| [i as f64, 0.0, 0.0]).collect();
        let a = init_anchors(&pts, 0.5, &mut rng()).unwrap();
        let all: Vec<f64> = a.iter().flat_map(|a| a.ref_embedding).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - 0.01).abs() < 1e-3);
    }

    #[test]
    fn nearest_neighbor_grid_matches_brute_force() {
        let mut r = rng();
        let locs: Vec<Vec3> = (0..300)
            .map(|_| [r.random::<f64>(), r.random::<f64>() * 3.0, r.random::<f64>()])
            .collect();
        let brute = locs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                locs.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| crate::math::norm3(crate::math::sub3(*p, *q)))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / locs.len() as f64;
        let grid = mean_nearest_neighbor(&locs, 0.05);
        assert!((brute - grid).abs() < 1e-12);
    }

    #[test]
    fn attach_counts() {
        let anchors = |n: usize| (0..n).map(|i| AnchorPrimitive::new([i as f64; 3], 1.0)).collect();
        let s = attach_coupled(anchors(5), DEFAULT_K);
        assert_eq!(s.coupled.len(), 50);
        s.check().unwrap();

        let s = attach_coupled(anchors(1), 1);
        assert_eq!(s.coupled.len(), 1);
        assert_eq!(s.coupled[0].res_embedding, [0.0; RES_DIM]);

        let s = attach_coupled(anchors(3), 15);
        assert_eq!(s.coupled.len(), 45);
        for (i, c) in s.coupled.iter().enumerate() {
            assert_eq!(c.anchor_index, i / 15);
        }
    }

    #[test]
    fn pruning() {
        let anchors = (0..3).map(|i| AnchorPrimitive::new([i as f64; 3], 1.0)).collect();
        let s = attach_coupled(anchors, 10);

        let same = prune_anchors(&s, &[0.5, 0.6, 0.7], 0.1).unwrap();
        assert_eq!(same, s);

        let p = prune_anchors(&s, &[0.001, 0.9, 0.004], 0.005).unwrap();
        assert_eq!(p.anchors.len(), 1);
        assert_eq!(p.anchors[0].location, [1.0; 3]);
        assert_eq!(p.coupled.len(), 10);
        p.check().unwrap();

        let two = attach_coupled(s.anchors[..2].to_vec(), 10);
        let p = prune_anchors(&two, &[0.0, 1.0], 0.5).unwrap();
        assert_eq!((p.anchors.len(), p.coupled.len()), (1, 10));

        assert!(matches!(
            prune_anchors(&s, &[0.0, 0.0, 0.0], 0.5),
            Err(Error::SceneEmptied)
        ));
        assert!(prune_anchors(&s, &[1.0], 0.5).is_err());
    }

    #[test]
    fn look_at_camera_geometry() {
        let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 50.0, [32, 32]);
        cam.check().unwrap();
        let c = cam.center();
        for d in 0..3 {
            assert!((c[d] - [0.0, 0.0, -3.0][d]).abs() < 1e-12);
        }
        let p = crate::math::mat_vec(&cam.rotation, [0.0; 3]);
        assert!((p[2] + cam.translation[2] - 3.0).abs() < 1e-12);
    }
}
