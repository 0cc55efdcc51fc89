//! Trains the reference toy scene and prints test metrics.
//!
//! `cargo run --release -p cgs-core --example toy_train -- [lambda] [steps] [freeze]`

use std::time::Instant;

use cgs_core::coder::write_scene;
use cgs_core::dataset::{make_toy_scene, ToySceneSpec};
use cgs_core::train::{evaluate, initial_model, train, window_means, TrainConfig, DEFAULT_VOXEL_FRACTION};

fn main() -> cgs_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let lambda = args.get(1).map_or(0.001, |s| s.parse().unwrap());
    let steps = args.get(2).map_or(2000, |s| s.parse().unwrap());
    let freeze = args.get(3).is_some_and(|s| s == "freeze");
    let (_, ds) = make_toy_scene(&ToySceneSpec::default())?;
    let model = initial_model(&ds.points, 10, DEFAULT_VOXEL_FRACTION, 7)?;
    println!("anchors {}", model.scene.anchors.len());
    let cfg = TrainConfig {
        lambda,
        steps,
        seed: 7,
        freeze_residual: freeze,
        ..Default::default()
    };
    let t = Instant::now();
    let out = train(&model, &ds.train_views(), &cfg)?;
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());
    let w = window_means(&out.trace, 100);
    println!("windows {:?}", w.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>());
    let bad = w.windows(2).filter(|p| p[1] > p[0]).count();
    println!("increasing windows: {bad}");
    let enc = write_scene(&out.model, lambda)?;
    let report = evaluate(&enc.bytes, &ds.test_views(), [0.0; 3])?;
    let train_views: Vec<_> = ds.train.iter().map(|&i| (i, ds.view(i))).collect();
    let tr = evaluate(&enc.bytes, &train_views, [0.0; 3])?;
    println!(
        "anchors {} bytes {} test psnr {:.2} ssim {:.4} train psnr {:.2} per_anchor {:.1} per_coupled {:.1}",
        out.model.scene.anchors.len(),
        report.size_bytes,
        report.mean_psnr,
        report.mean_ssim,
        tr.mean_psnr,
        report.rate.per_anchor_avg,
        report.rate.per_coupled_avg
    );
    Ok(())
}
