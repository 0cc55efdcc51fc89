//! Scene directories, PLY point clouds and the synthetic toy scene.
//!
//! A scene directory holds `points.ply`, `cameras.json` and
//! `images/NNNN.png` (one per camera, zero-padded index).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{covariance_from_scale_rot, quat_normalize, Vec3};
use crate::render::{render, Image, RenderOptions};
use crate::scene::{Camera, RenderableGaussian};
use crate::train::View;

/// One test view out of every this many.
pub const TEST_EVERY: usize = 8;

/// Indices `0, 8, 16, ...` go to the test split, the rest to training.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % TEST_EVERY != 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub points: Vec<Vec3>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn new(cameras: Vec<Camera>, images: Vec<Image>, points: Vec<Vec3>) -> Result<Self> {
        if cameras.len() != images.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} cameras but {} images",
                cameras.len(),
                images.len()
            )));
        }
        let (train, test) = split_indices(cameras.len());
        Ok(Dataset {
            cameras,
            images,
            points,
            train,
            test,
        })
    }

    pub fn view(&self, i: usize) -> View {
        View {
            camera: self.cameras[i],
            target: self.images[i].clone(),
        }
    }

    pub fn train_views(&self) -> Vec<View> {
        self.train.iter().map(|&i| self.view(i)).collect()
    }

    /// Test views tagged with their dataset index.
    pub fn test_views(&self) -> Vec<(usize, View)> {
        self.test.iter().map(|&i| (i, self.view(i))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = c.rotation;
        CameraRecord {
            rotation: [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]],
            translation: c.translation,
            fx: c.focal[0],
            fy: c.focal[1],
            cx: c.principal_point[0],
            cy: c.principal_point[1],
            width: c.resolution[0],
            height: c.resolution[1],
        }
    }
}

impl From<&CameraRecord> for Camera {
    fn from(r: &CameraRecord) -> Self {
        let m = r.rotation;
        Camera {
            rotation: [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]],
            translation: r.translation,
            focal: [r.fx, r.fy],
            principal_point: [r.cx, r.cy],
            resolution: [r.width, r.height],
        }
    }
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("images").join(format!("{index:04}.png"))
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = fs::read_to_string(path).map_err(|e| Error::dataset(path, e))?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text).map_err(|e| Error::dataset(path, e))?;
    let cams: Vec<Camera> = records.iter().map(Camera::from).collect();
    for c in &cams {
        c.check().map_err(|e| Error::dataset(path, e))?;
    }
    Ok(cams)
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::dataset(path, e))?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads a scene directory and applies the default split.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let cameras = load_cameras(&dir.join("cameras.json"))?;
    let points = read_points_ply(dir.join("points.ply"))?;
    let mut images = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let path = image_path(dir, i);
        let img = Image::load_png(&path)?;
        if img.width != cam.width() || img.height != cam.height() {
            return Err(Error::dataset(
                &path,
                format!(
                    "image is {}x{} but camera {i} is {}x{}",
                    img.width,
                    img.height,
                    cam.width(),
                    cam.height()
                ),
            ));
        }
        images.push(img);
    }
    Dataset::new(cameras, images, points)
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    save_cameras(&dir.join("cameras.json"), &ds.cameras)?;
    write_points_ply(dir.join("points.ply"), &ds.points)?;
    for (i, img) in ds.images.iter().enumerate() {
        img.save_png(image_path(dir, i))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PLY

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<(String, PlyType)>,
}

/// Reads `x`, `y`, `z` of the `vertex` element. Other vertex properties are
/// skipped; list properties are not supported.
pub fn read_points_ply(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::dataset(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| Error::dataset(path, m);

    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<fs::File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::dataset(path, e))? == 0 {
            return Err(Error::dataset(path, "truncated PLY header"));
        }
        Ok(line.trim().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(bad("not a PLY file"));
    }
    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLe,
                    _ => return Err(bad("unsupported PLY format")),
                })
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| bad("element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| bad("element without count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let ty = tok.next().ok_or_else(|| bad("property without type"))?;
                if ty == "list" {
                    return Err(bad("list properties are not supported"));
                }
                let ty = PlyType::parse(ty).ok_or_else(|| bad("unknown property type"))?;
                let name = tok.next().ok_or_else(|| bad("property without name"))?;
                elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element"))?
                    .props
                    .push((name.to_string(), ty));
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let format = format.ok_or_else(|| bad("missing format line"))?;
    let mut points = Vec::new();
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let idx = |n: &str| el.props.iter().position(|(p, _)| p == n);
        let xyz = if is_vertex {
            match (idx("x"), idx("y"), idx("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => return Err(bad("vertex element lacks x/y/z")),
            }
        } else {
            None
        };
        let stride: usize = el.props.iter().map(|(_, t)| t.size()).sum();
        let mut buf = vec![0u8; stride];
        let mut text = String::new();
        for _ in 0..el.count {
            let vals: Vec<f64> = match format {
                PlyFormat::BinaryLe => {
                    r.read_exact(&mut buf).map_err(|_| bad("truncated PLY body"))?;
                    let mut at = 0;
                    el.props
                        .iter()
                        .map(|(_, t)| {
                            let v = t.read_le(&buf[at..]);
                            at += t.size();
                            v
                        })
                        .collect()
                }
                PlyFormat::Ascii => {
                    text.clear();
                    if r.read_line(&mut text).map_err(|e| Error::dataset(path, e))? == 0 {
                        return Err(bad("truncated PLY body"));
                    }
                    let vals: std::result::Result<Vec<f64>, _> =
                        text.split_whitespace().map(str::parse).collect();
                    let vals = vals.map_err(|_| bad("malformed PLY value"))?;
                    if vals.len() != el.props.len() {
                        return Err(bad("wrong number of PLY values"));
                    }
                    vals
                }
            };
            if let Some([x, y, z]) = xyz {
                let p = [vals[x], vals[y], vals[z]];
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(bad("non-finite point"));
                }
                points.push(p);
            }
        }
        if is_vertex {
            break;
        }
    }
    Ok(points)
}

fn write_ply(path: &Path, props: &[&str], rows: impl Iterator<Item = Vec<f32>>, count: usize) -> Result<()> {
    let mut out = Vec::new();
    write!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {count}\n")?;
    for p in props {
        writeln!(out, "property float {p}")?;
    }
    writeln!(out, "end_header")?;
    for row in rows {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::dataset(path, e))
}

pub fn write_points_ply(path: impl AsRef<Path>, points: &[Vec3]) -> Result<()> {
    write_ply(
        path.as_ref(),
        &["x", "y", "z"],
        points.iter().map(|p| p.iter().map(|&v| v as f32).collect()),
        points.len(),
    )
}

/// Gaussians with their covariance upper triangle, opacity and color.
pub fn write_gaussians_ply(path: impl AsRef<Path>, gaussians: &[RenderableGaussian]) -> Result<()> {
    let props = [
        "x", "y", "z", "cov_xx", "cov_xy", "cov_xz", "cov_yy", "cov_yz", "cov_zz", "opacity", "red", "green",
        "blue",
    ];
    let rows = gaussians.iter().map(|g| {
        let c = g.covariance;
        [
            g.location[0],
            g.location[1],
            g.location[2],
            c[0][0],
            c[0][1],
            c[0][2],
            c[1][1],
            c[1][2],
            c[2][2],
            g.opacity,
            g.color[0],
            g.color[1],
            g.color[2],
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    });
    write_ply(path.as_ref(), &props, rows, gaussians.len())
}

// ---------------------------------------------------------------------------
// Toy scene

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySceneSpec {
    pub gaussian_count: usize,
    pub camera_count: usize,
    pub image_size: u32,
    pub seed: u64,
    /// Colors drawn from this list; uniform random RGB when empty.
    pub palette: Vec<[f64; 3]>,
    /// Point-cloud samples drawn around each Gaussian, in addition to its
    /// center.
    pub points_per_gaussian: usize,
}

impl Default for ToySceneSpec {
    fn default() -> Self {
        ToySceneSpec {
            gaussian_count: 64,
            camera_count: 8,
            image_size: 64,
            seed: 7,
            palette: Vec::new(),
            points_per_gaussian: 0,
        }
    }
}

/// Distance from the scene centroid to every ring camera.
pub const RING_RADIUS: f64 = 2.5;
/// Height of the ring above the centroid.
pub const RING_HEIGHT: f64 = 0.8;
/// Horizontal field of view of the toy cameras, in degrees.
pub const TOY_FOV_DEG: f64 = 50.0;

/// Random Gaussians in the unit cube seen by a ring of cameras looking at
/// their centroid, with 8-bit targets rendered on a black background.
pub fn make_toy_scene(spec: &ToySceneSpec) -> Result<(Vec<RenderableGaussian>, Dataset)> {
    if spec.gaussian_count == 0 || spec.camera_count == 0 || spec.image_size == 0 {
        return Err(Error::InvalidArgument("toy scene counts must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gaussians = Vec::with_capacity(spec.gaussian_count);
    let mut points = Vec::new();
    for _ in 0..spec.gaussian_count {
        let location: Vec3 = std::array::from_fn(|_| rng.random::<f64>());
        let log_scale: Vec3 = std::array::from_fn(|_| rng.random_range(0.03f64..0.08).ln());
        let q = quat_normalize(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        let opacity = rng.random_range(0.7..0.95);
        let color = if spec.palette.is_empty() {
            std::array::from_fn(|_| rng.random::<f64>())
        } else {
            spec.palette[rng.random_range(0..spec.palette.len())]
        };
        gaussians.push(RenderableGaussian {
            location,
            covariance: covariance_from_scale_rot(log_scale, q),
            opacity,
            color,
        });
        points.push(location);
        for _ in 0..spec.points_per_gaussian {
            let s = log_scale.map(f64::exp);
            let r = crate::math::quat_to_mat(q);
            let z: Vec3 = std::array::from_fn(|d| s[d] * rng.random_range(-1.0..1.0));
            points.push(std::array::from_fn(|i| {
                location[i] + r[i][0] * z[0] + r[i][1] * z[1] + r[i][2] * z[2]
            }));
        }
    }
    let n = gaussians.len() as f64;
    let centroid: Vec3 = std::array::from_fn(|d| gaussians.iter().map(|g| g.location[d]).sum::<f64>() / n);
    let size = spec.image_size;
    let focal = 0.5 * size as f64 / (0.5 * TOY_FOV_DEG.to_radians()).tan();
    let horizontal = (RING_RADIUS * RING_RADIUS - RING_HEIGHT * RING_HEIGHT).sqrt();
    let cameras: Vec<Camera> = (0..spec.camera_count)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / spec.camera_count as f64;
            let eye = [
                centroid[0] + horizontal * theta.cos(),
                centroid[1] + horizontal * theta.sin(),
                centroid[2] + RING_HEIGHT,
            ];
            Camera::look_at(eye, centroid, [0.0, 0.0, 1.0], focal, [size, size])
        })
        .collect();
    let opts = RenderOptions::default();
    // Targets are stored as 8-bit PNGs, so they are generated at that depth.
    let images = cameras
        .iter()
        .map(|c| render(&gaussians, c, &opts).quantized_8bit())
        .collect();
    Ok((gaussians, Dataset::new(cameras, images, points)?))
}
