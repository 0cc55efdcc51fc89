//! `cgs`: train, code, render and inspect compressed Gaussian-splat scenes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cgs_core::coder::{read_scene, write_scene, DecodedScene, SectionSizes};
use cgs_core::dataset::{load_dataset, make_toy_scene, save_dataset, write_gaussians_ply, Dataset, ToySceneSpec};
use cgs_core::scene::Camera;
use cgs_core::train::{
    evaluate, initial_model, train, write_trace_csv, TrainConfig, DEFAULT_VOXEL_FRACTION,
};
use cgs_core::{RateReport, RenderOptions};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cgs", version, about = "Compressed Gaussian-splat codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a scene directory and write the bitstream.
    Train(TrainArgs),
    /// Same as `train`.
    Encode(TrainArgs),
    /// Decode a bitstream to an attribute PLY, plus renders of every camera
    /// when `--scene` is given.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[command(flatten)]
        bg: Background,
    },
    /// Render one camera of a scene directory from a bitstream.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        out: PathBuf,
        /// Scene directory providing `cameras.json`.
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        bg: Background,
    },
    /// PSNR, SSIM and size on the test views.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        json: PathBuf,
        #[command(flatten)]
        bg: Background,
    },
    /// Bit budget per stream and byte size per section.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        json: PathBuf,
    },
    /// Generate the synthetic toy scene.
    Toy {
        /// JSON ToySceneSpec; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Anchor voxel size relative to the point-cloud diagonal.
    #[arg(long, default_value_t = DEFAULT_VOXEL_FRACTION)]
    voxel: f64,
    /// Train with residual embeddings held at zero.
    #[arg(long)]
    freeze_residual: bool,
    #[command(flatten)]
    bg: Background,
}

#[derive(Args, Clone)]
struct Background {
    /// Background color, components in [0, 1].
    #[arg(long, num_args = 3, value_names = ["R", "G", "B"], default_values_t = [0.0, 0.0, 0.0])]
    background: Vec<f64>,
}

impl Background {
    fn rgb(&self) -> Result<[f64; 3]> {
        let b = &self.background;
        if b.len() != 3 || b.iter().any(|v| !(0.0..=1.0).contains(v)) {
            bail!("--background needs three values in [0, 1]");
        }
        Ok([b[0], b[1], b[2]])
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_bitstream(path: &Path) -> Result<(Vec<u8>, DecodedScene)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let decoded = read_scene(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    Ok((bytes, decoded))
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.scene)?;
    let model = initial_model(&ds.points, a.k, a.voxel, a.seed)?;
    let cfg = TrainConfig {
        lambda: a.lambda,
        steps: a.steps,
        seed: a.seed,
        freeze_residual: a.freeze_residual,
        background: a.bg.rgb()?,
        ..Default::default()
    };
    let out = train(&model, &ds.train_views(), &cfg)?;
    let enc = write_scene(&out.model, a.lambda)?;
    fs::write(&a.out, &enc.bytes).with_context(|| format!("writing {}", a.out.display()))?;
    let trace_path = sidecar(&a.out, ".trace.csv");
    write_trace_csv(fs::File::create(&trace_path)?, &out.trace)?;
    write_json(&sidecar(&a.out, ".optim.json"), &out.optimizer)?;
    let last = out.trace.last();
    eprintln!(
        "wrote {} ({} bytes, {} anchors){}",
        a.out.display(),
        enc.bytes.len(),
        out.model.scene.anchors.len(),
        last.map_or(String::new(), |r| format!(", final L {:.6}", r.l))
    );
    Ok(())
}

fn cameras_of(scene: &Path) -> Result<Vec<Camera>> {
    Ok(cgs_core::dataset::load_cameras(&scene.join("cameras.json"))?)
}

/// Fixed viewpoint for the view-dependent attributes in the decoded PLY:
/// straight above the anchors' bounding box.
fn canonical_camera(decoded: &DecodedScene) -> Camera {
    let anchors = &decoded.model.scene.anchors;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for a in anchors {
        for d in 0..3 {
            lo[d] = lo[d].min(a.location[d]);
            hi[d] = hi[d].max(a.location[d]);
        }
    }
    let c: [f64; 3] = std::array::from_fn(|d| if anchors.is_empty() { 0.0 } else { 0.5 * (lo[d] + hi[d]) });
    let extent = (0..3).map(|d| hi[d] - lo[d]).fold(1.0f64, f64::max);
    let eye = [c[0], c[1] - 1e-3 * extent, c[2] + 4.0 * extent];
    Camera::look_at(eye, c, [0.0, 0.0, 1.0], 64.0, [64, 64])
}

fn run_decode(input: &Path, out: &Path, scene: Option<&Path>, bg: [f64; 3]) -> Result<()> {
    let (_, decoded) = read_bitstream(input)?;
    fs::create_dir_all(out)?;
    let gaussians = decoded.model.gaussians(&canonical_camera(&decoded))?;
    write_gaussians_ply(out.join("gaussians.ply"), &gaussians)?;
    if let Some(scene) = scene {
        let opts = RenderOptions {
            background: bg,
            early_exit: true,
        };
        fs::create_dir_all(out.join("renders"))?;
        for (i, cam) in cameras_of(scene)?.iter().enumerate() {
            decoded
                .model
                .render(cam, &opts)?
                .save_png(out.join("renders").join(format!("{i:04}.png")))?;
        }
    }
    Ok(())
}

fn run_render(input: &Path, camera: usize, out: &Path, scene: &Path, bg: [f64; 3]) -> Result<()> {
    let (_, decoded) = read_bitstream(input)?;
    let cams = cameras_of(scene)?;
    let Some(cam) = cams.get(camera) else {
        bail!("camera {camera} out of range: scene has {} cameras", cams.len());
    };
    let opts = RenderOptions {
        background: bg,
        early_exit: true,
    };
    decoded.model.render(cam, &opts)?.save_png(out)?;
    Ok(())
}

fn run_eval(input: &Path, scene: &Path, json: &Path, bg: [f64; 3]) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let ds: Dataset = load_dataset(scene)?;
    let report = evaluate(&bytes, &ds.test_views(), bg)?;
    write_json(json, &report)
}

#[derive(Serialize)]
struct Report {
    file_bytes: usize,
    file_bits: f64,
    lambda: f32,
    anchor_count: u32,
    k: u8,
    s_cov: f32,
    rate: RateReport,
    sections: SectionSizes,
    /// Header and network-weight bits, not attributed to any stream.
    overhead_bits: f64,
}

fn run_report(input: &Path, json: &Path) -> Result<()> {
    let (bytes, decoded) = read_bitstream(input)?;
    let h = &decoded.header;
    write_json(
        json,
        &Report {
            file_bytes: bytes.len(),
            file_bits: 8.0 * bytes.len() as f64,
            lambda: h.lambda,
            anchor_count: h.anchor_count,
            k: h.k,
            s_cov: h.s_cov,
            rate: decoded.coded_report(),
            sections: decoded.sizes,
            overhead_bits: decoded.sizes.overhead_bits(),
        },
    )
}

fn run_toy(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: ToySceneSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ToySceneSpec::default(),
    };
    let (gaussians, ds) = make_toy_scene(&spec)?;
    save_dataset(out, &ds)?;
    write_gaussians_ply(out.join("ground_truth.ply"), &gaussians)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) | Command::Encode(a) => run_train(a),
        Command::Decode { input, out, scene, bg } => run_decode(input, out, scene.as_deref(), bg.rgb()?),
        Command::Render {
            input,
            camera,
            out,
            scene,
            bg,
        } => run_render(input, *camera, out, scene, bg.rgb()?),
        Command::Eval { input, scene, json, bg } => run_eval(input, scene, json, bg.rgb()?),
        Command::Report { input, json } => run_report(input, json),
        Command::Toy { spec, out } => run_toy(spec.as_deref(), out),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CGS_THREADS") {
        let n: usize = v.parse().with_context(|| format!("CGS_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors exit with 2 through clap.
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
