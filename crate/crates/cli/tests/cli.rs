use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgs"))
        .args(args)
        .env("CGS_THREADS", "2")
        .output()
        .expect("spawn cgs")
}

fn ok(args: &[&str]) -> Output {
    let out = cgs(args);
    assert!(
        out.status.success(),
        "cgs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small toy scene plus a short training run.
fn trained(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let spec = dir.join("spec.json");
    fs::write(
        &spec,
        r#"{"gaussian_count": 6, "camera_count": 9, "image_size": 16, "seed": 3}"#,
    )
    .unwrap();
    let scene = dir.join("scene");
    ok(&["toy", "--spec", s(&spec), "--out", s(&scene)]);
    let cgs_file = dir.join("out.cgs");
    ok(&[
        "train", "--scene", s(&scene), "--lambda", "0.001", "--steps", "12", "--out", s(&cgs_file), "--seed",
        "5", "--k", "3",
    ]);
    (scene, cgs_file)
}

#[test]
fn report_totals_match_file_size() {
    let dir = tempfile::tempdir().unwrap();
    let (_, file) = trained(dir.path());
    let json = dir.path().join("report.json");
    ok(&["report", "--in", s(&file), "--json", s(&json)]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let size = fs::metadata(&file).unwrap().len() as f64;
    let rate = &r["rate"];
    let streams = ["bits_f", "bits_Σ", "bits_g", "bits_hyper", "bits_locations"]
        .iter()
        .map(|k| rate[k].as_f64().unwrap())
        .sum::<f64>();
    assert_eq!(streams + r["overhead_bits"].as_f64().unwrap(), 8.0 * size);
    assert_eq!(rate["total"].as_f64().unwrap(), streams);
    assert_eq!(r["file_bytes"].as_f64().unwrap(), size);
    // The header stores lambda as f32.
    assert_eq!(r["lambda"].as_f64().unwrap() as f32, 0.001f32);
    assert_eq!(r["k"], 3);
}

#[test]
fn eval_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, file) = trained(dir.path());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&["eval", "--in", s(&file), "--scene", s(&scene), "--json", s(&a)]);
    ok(&["eval", "--in", s(&file), "--scene", s(&scene), "--json", s(&b)]);
    let ja = fs::read(&a).unwrap();
    assert_eq!(ja, fs::read(&b).unwrap());
    let r: Value = serde_json::from_slice(&ja).unwrap();
    assert_eq!(r["size_bytes"].as_u64().unwrap(), fs::metadata(&file).unwrap().len());
    let views: Vec<u64> = r["views"].as_array().unwrap().iter().map(|v| v["view"].as_u64().unwrap()).collect();
    assert_eq!(views, vec![0, 8]);
}

#[test]
fn training_is_reproducible() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (_, f1) = trained(d1.path());
    let (_, f2) = trained(d2.path());
    assert_eq!(fs::read(&f1).unwrap(), fs::read(&f2).unwrap());
    let trace = fs::read_to_string(format!("{}.trace.csv", s(&f1))).unwrap();
    assert!(trace.starts_with("step,L,D_bits,R_bits\n"));
    assert_eq!(trace.lines().count(), 13);
    assert!(Path::new(&format!("{}.optim.json", s(&f1))).exists());
}

#[test]
fn decode_and_render_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, file) = trained(dir.path());
    let out = dir.path().join("decoded");
    ok(&["decode", "--in", s(&file), "--out", s(&out), "--scene", s(&scene), "--background", "0.2", "0.3", "0.4"]);
    assert!(out.join("gaussians.ply").exists());
    let png = dir.path().join("view2.png");
    ok(&[
        "render", "--in", s(&file), "--camera", "2", "--out", s(&png), "--scene", s(&scene), "--background", "0.2",
        "0.3", "0.4",
    ]);
    assert_eq!(fs::read(out.join("renders/0002.png")).unwrap(), fs::read(&png).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cgs(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(cgs(&["report", "--in", "x.cgs"]).status.code(), Some(2));
    assert_eq!(cgs(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    let missing = dir.path().join("missing.cgs");
    let out = cgs(&["report", "--in", s(&missing), "--json", s(&json)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cgs"));

    let garbage = dir.path().join("garbage.cgs");
    fs::write(&garbage, b"not a bitstream at all, definitely not").unwrap();
    assert_eq!(cgs(&["report", "--in", s(&garbage), "--json", s(&json)]).status.code(), Some(1));

    let empty_scene = dir.path().join("empty");
    fs::create_dir_all(&empty_scene).unwrap();
    let out = cgs(&[
        "train", "--scene", s(&empty_scene), "--lambda", "0.001", "--steps", "1", "--out", s(&missing),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cameras.json"));
}
