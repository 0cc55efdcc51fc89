mod common;

use std::collections::HashSet;
use std::fs;

use cgs_core::coder::write_scene;
use cgs_core::dataset::{load_dataset, make_toy_scene, save_dataset, ToySceneSpec};
use cgs_core::entropy::{model_scene, PMF_FLOOR};
use cgs_core::nn::{Mlp, HIDDEN};
use cgs_core::prediction::decode_coupled;
use cgs_core::scene::{init_anchors, RES_DIM};
use cgs_core::train::{evaluate, View};
use cgs_core::{Error, Image, RenderOptions};
use common::{quat_matrix, random_camera, random_model, rng};
use rand::seq::SliceRandom;
use rand::Rng;

/// Scalar-loop forward pass written from the documented layout.
fn mlp_oracle(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let p = &m.params;
    let (n, o) = (m.in_dim, m.out_dim);
    let mut at = 0;
    let mut layer = |input: &[f64], rows: usize, relu: bool| -> Vec<f64> {
        let cols = input.len();
        let w = &p[at..at + rows * cols];
        let b = &p[at + rows * cols..at + rows * cols + rows];
        at += rows * cols + rows;
        (0..rows)
            .map(|r| {
                let v = b[r] + (0..cols).map(|c| w[r * cols + c] * input[c]).sum::<f64>();
                if relu {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect()
    };
    assert_eq!(x.len(), n);
    let h0 = layer(x, HIDDEN, true);
    let r = layer(&h0, HIDDEN, true);
    let r2 = layer(&r, HIDDEN, false);
    let h1: Vec<f64> = h0.iter().zip(&r2).map(|(a, b)| a + b).collect();
    layer(&h1, o, false)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

fn unit(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

#[test]
fn decode_matches_step_by_step_oracle() {
    let model = random_model(6, 3, 12);
    let mut r = rng(13);
    let cam = random_camera(&mut r, 32);
    let got = decode_coupled(&model.scene, &cam, &model.nets).unwrap();
    let center = cam.center();
    let nets = &model.nets;
    let mut i = 0;
    for (a, anchor) in model.scene.anchors.iter().enumerate() {
        let d: Vec<f64> = (0..3).map(|k| anchor.location[k] - center[k]).collect();
        let dist = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let eps = [d[0] / dist, d[1] / dist, d[2] / dist, 1.0 / dist];
        for c in model.scene.coupled_of(a) {
            let h: Vec<f64> = anchor.ref_embedding.iter().chain(&c.res_embedding).copied().collect();
            let t = mlp_oracle(&nets.translation, &h);
            let s = mlp_oracle(&nets.scale, &h);
            let q = mlp_oracle(&nets.rotation, &h);
            let rot = unit(hamilton(unit([q[0] + 1.0, q[1], q[2], q[3]]), unit(anchor.cov_rotation)));
            let scale: Vec<f64> = (0..3).map(|k| (anchor.cov_scale[k] + s[k]).exp()).collect();
            let m = quat_matrix(rot);
            let app: Vec<f64> = eps.iter().chain(&h).copied().collect();
            let opacity = sigmoid(mlp_oracle(&nets.opacity, &app)[0]);
            let color = mlp_oracle(&nets.color, &app);
            let g = &got[i];
            for k in 0..3 {
                assert!((g.location[k] - (anchor.location[k] + t[k])).abs() < 1e-9);
                assert!((g.color[k] - sigmoid(color[k])).abs() < 1e-9);
                for l in 0..3 {
                    let cov: f64 = (0..3).map(|j| m[k][j] * scale[j] * scale[j] * m[l][j]).sum();
                    assert!((g.covariance[k][l] - cov).abs() < 1e-9 * cov.abs().max(1e-3));
                }
            }
            assert!((g.opacity - opacity).abs() < 1e-9);
            i += 1;
        }
    }
    assert_eq!(i, got.len());
}

#[test]
fn anchor_count_matches_voxel_occupancy() {
    let mut r = rng(14);
    let pts: Vec<[f64; 3]> = (0..1000).map(|_| std::array::from_fn(|_| r.random_range(0.0..1.0))).collect();
    let anchors = init_anchors(&pts, 0.25, &mut rng(1)).unwrap();
    let occupied: HashSet<[i64; 3]> = pts.iter().map(|p| p.map(|v| (v / 0.25).floor() as i64)).collect();
    assert_eq!(anchors.len(), occupied.len());

    let mut shuffled = pts.clone();
    shuffled.shuffle(&mut r);
    let sorted = |a: Vec<cgs_core::AnchorPrimitive>| {
        let mut l: Vec<[f64; 3]> = a.iter().map(|a| a.location).collect();
        l.sort_by(|a, b| a.partial_cmp(b).unwrap());
        l
    };
    let again = init_anchors(&shuffled, 0.25, &mut rng(1)).unwrap();
    assert_eq!(sorted(anchors), sorted(again));
}

#[test]
fn rate_totals_match_reverse_order_recount() {
    let model = random_model(50, 4, 15);
    let codes = model_scene(&model.scene, &model.entropy, &model.fb, &model.q).unwrap();
    let report = codes.parts(0.0).report();
    let bits = |ps: &[f64]| ps.iter().rev().map(|p| -p.max(PMF_FLOOR).log2()).sum::<f64>();
    let mut anchor_bits = 0.0;
    for a in codes.anchors.iter().rev() {
        anchor_bits += bits(&a.embedding_probs) + bits(&a.cov_probs) + bits(&a.hyper_probs);
    }
    let mut coupled_bits = 0.0;
    for c in codes.coupled.iter().rev() {
        coupled_bits += bits(&c.residual_probs) + bits(&c.hyper_probs);
    }
    assert!((report.total - anchor_bits - coupled_bits).abs() < 1e-6 * report.total);
    let per_coupled = coupled_bits / codes.coupled.len() as f64;
    assert!((report.per_coupled_avg - per_coupled).abs() < 1e-9 * per_coupled);
    assert_eq!(codes.coupled.len(), 50 * 4);
    assert!(codes.coupled.iter().all(|c| c.residual.len() == RES_DIM));
}

#[test]
fn decoded_bitstream_reproduces_encoder_renders() {
    let model = random_model(30, 3, 16);
    let enc = write_scene(&model, 0.001).unwrap();
    let mut r = rng(17);
    let views: Vec<(usize, View)> = (0..3)
        .map(|i| {
            let camera = random_camera(&mut r, 32);
            let target = enc.quantized.model.render(&camera, &RenderOptions::default()).unwrap();
            (i, View { camera, target })
        })
        .collect();
    let report = evaluate(&enc.bytes, &views, [0.0; 3]).unwrap();
    assert!(report.views.iter().all(|v| v.psnr == 100.0 && v.ssim == 1.0));
    assert_eq!(report.size_bytes, enc.bytes.len());
}

#[test]
fn sixteen_views_split_fourteen_two() {
    let spec = ToySceneSpec {
        gaussian_count: 5,
        camera_count: 16,
        image_size: 8,
        ..Default::default()
    };
    let (_, ds) = make_toy_scene(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.train.len(), 14);
    assert_eq!(loaded.test, vec![0, 8]);
    assert_eq!(loaded.images, ds.images);
}

#[test]
fn dataset_errors_name_the_file() {
    let spec = ToySceneSpec {
        gaussian_count: 3,
        camera_count: 2,
        image_size: 8,
        ..Default::default()
    };
    let (_, ds) = make_toy_scene(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();

    let img = dir.path().join("images/0001.png");
    Image::filled(9, 8, [0.5; 3]).save_png(&img).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("0001.png"), "{err}");

    fs::remove_file(dir.path().join("cameras.json")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("cameras.json"), "{err}");
    assert!(!matches!(err, Error::NoPoints));
}
