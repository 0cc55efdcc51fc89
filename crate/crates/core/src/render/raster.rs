//! Front-to-back alpha compositing of depth-sorted splats, tiled and
//! brute-force, and the reverse pass through it.

use std::cmp::Ordering;

use rayon::prelude::*;

use super::image::Image;
use super::project::{max_eigenvalue, Splat2D};

pub const TILE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
pub const EARLY_EXIT_T: f64 = 1e-4;
/// Splats contribute only where the squared Mahalanobis distance is at
/// most this.
pub const CUTOFF: f64 = 36.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    pub early_exit: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background: [0.0; 3],
            early_exit: true,
        }
    }
}

/// Depth first, then the remaining content, so the order does not depend
/// on where a splat sat in the input.
fn compare(a: &Splat2D, b: &Splat2D) -> Ordering {
    let key = |s: &Splat2D| {
        [
            s.depth,
            s.mean2d[0],
            s.mean2d[1],
            s.conic[0],
            s.conic[1],
            s.conic[2],
            s.opacity,
            s.color[0],
            s.color[1],
            s.color[2],
        ]
    };
    let (ka, kb) = (key(a), key(b));
    ka.iter()
        .zip(&kb)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Input indices of the visible splats in compositing order.
pub fn sort_splats(splats: &[Option<Splat2D>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).filter(|&i| splats[i].is_some()).collect();
    order.sort_by(|&i, &j| {
        compare(splats[i].as_ref().expect("visible"), splats[j].as_ref().expect("visible"))
    });
    order
}

/// Mahalanobis power and alpha of a splat at a pixel center, `None` past
/// the cutoff.
#[inline]
fn alpha_at(s: &Splat2D, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let [a, b, c] = s.conic;
    let power = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if !(power <= CUTOFF) {
        return None;
    }
    let alpha = (s.opacity * (-0.5 * power).exp()).min(ALPHA_MAX);
    Some((alpha, power, dx, dy))
}

/// Per-pixel compositing state.
#[derive(Debug, Clone, Copy)]
struct Pixel {
    color: [f64; 3],
    t: f64,
}

impl Pixel {
    fn new() -> Self {
        Pixel {
            color: [0.0; 3],
            t: 1.0,
        }
    }

    #[inline]
    fn blend(&mut self, s: &Splat2D, alpha: f64) {
        let w = alpha * self.t;
        for ch in 0..3 {
            self.color[ch] += s.color[ch] * w;
        }
        self.t *= 1.0 - alpha;
    }

    /// Rounding can push a saturated pixel an ulp past 1; the clamp is
    /// treated as identity by the reverse pass.
    fn finish(&self, background: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|ch| (self.color[ch] + background[ch] * self.t).min(1.0))
    }
}

/// Pixel-center bounding box of a splat's cutoff ellipse, with a pixel of
/// slack, as inclusive pixel ranges clipped to the image.
fn pixel_bounds(s: &Splat2D, width: usize, height: usize) -> Option<([usize; 2], [usize; 2])> {
    let r = (CUTOFF * max_eigenvalue(s.cov2d[0][0], s.cov2d[0][1], s.cov2d[1][1])).sqrt() + 1.0;
    let lo = |m: f64| (m - r - 0.5).floor().max(0.0);
    let x0 = lo(s.mean2d[0]);
    let y0 = lo(s.mean2d[1]);
    let x1 = (s.mean2d[0] + r - 0.5).ceil().min(width as f64 - 1.0);
    let y1 = (s.mean2d[1] + r - 0.5).ceil().min(height as f64 - 1.0);
    if x1 < x0 || y1 < y0 {
        return None;
    }
    Some(([x0 as usize, x1 as usize], [y0 as usize, y1 as usize]))
}

#[derive(Debug, Clone)]
struct TileState {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    /// Input indices in compositing order.
    list: Vec<usize>,
    /// Per pixel: number of list entries walked and final transmittance.
    used: Vec<u32>,
    t_final: Vec<f64>,
    colors: Vec<[f64; 3]>,
    max_weight: Vec<f64>,
}

/// Forward rasterization result, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct Raster {
    pub image: Image,
    /// Largest compositing weight `alpha * T` each input splat reached at
    /// any pixel; zero for culled splats.
    pub max_weight: Vec<f64>,
    tiles: Vec<TileState>,
    background: [f64; 3],
}

fn composite_tile(tile: &mut TileState, splats: &[Option<Splat2D>], opts: &RenderOptions) {
    for ly in 0..tile.h {
        for lx in 0..tile.w {
            let px = (tile.x0 + lx) as f64 + 0.5;
            let py = (tile.y0 + ly) as f64 + 0.5;
            let mut pix = Pixel::new();
            let mut used = tile.list.len();
            for (j, &i) in tile.list.iter().enumerate() {
                let s = splats[i].as_ref().expect("visible");
                let Some((alpha, ..)) = alpha_at(s, px, py) else {
                    continue;
                };
                let w = alpha * pix.t;
                if w > tile.max_weight[j] {
                    tile.max_weight[j] = w;
                }
                pix.blend(s, alpha);
                if opts.early_exit && pix.t < EARLY_EXIT_T {
                    used = j + 1;
                    break;
                }
            }
            let p = ly * tile.w + lx;
            tile.used[p] = used as u32;
            tile.t_final[p] = pix.t;
            tile.colors[p] = pix.finish(&opts.background);
        }
    }
}

/// Tiled rasterization over `TILE x TILE` blocks in parallel.
pub fn rasterize(splats: &[Option<Splat2D>], width: usize, height: usize, opts: &RenderOptions) -> Raster {
    let order = sort_splats(splats);
    let tx = width.div_ceil(TILE);
    let ty = height.div_ceil(TILE);
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); tx * ty];
    for &i in &order {
        let s = splats[i].as_ref().expect("visible");
        if let Some(([x0, x1], [y0, y1])) = pixel_bounds(s, width, height) {
            for ty_i in y0 / TILE..=y1 / TILE {
                for tx_i in x0 / TILE..=x1 / TILE {
                    lists[ty_i * tx + tx_i].push(i);
                }
            }
        }
    }
    let mut tiles: Vec<TileState> = lists
        .into_iter()
        .enumerate()
        .map(|(t, list)| {
            let x0 = (t % tx) * TILE;
            let y0 = (t / tx) * TILE;
            let w = TILE.min(width - x0);
            let h = TILE.min(height - y0);
            let n = list.len();
            TileState {
                x0,
                y0,
                w,
                h,
                list,
                used: vec![0; w * h],
                t_final: vec![1.0; w * h],
                colors: vec![[0.0; 3]; w * h],
                max_weight: vec![0.0; n],
            }
        })
        .collect();
    tiles.par_iter_mut().for_each(|t| composite_tile(t, splats, opts));

    let mut image = Image::filled(width, height, [0.0; 3]);
    let mut max_weight = vec![0.0; splats.len()];
    for t in &tiles {
        for ly in 0..t.h {
            for lx in 0..t.w {
                let c = t.colors[ly * t.w + lx];
                let o = 3 * ((t.y0 + ly) * width + t.x0 + lx);
                image.rgb[o..o + 3].copy_from_slice(&c);
            }
        }
        for (&i, &w) in t.list.iter().zip(&t.max_weight) {
            if w > max_weight[i] {
                max_weight[i] = w;
            }
        }
    }
    Raster {
        image,
        max_weight,
        tiles,
        background: opts.background,
    }
}

/// Per-pixel reference: every visible splat, globally sorted, no tiling
/// and no early exit.
pub fn rasterize_reference(splats: &[Option<Splat2D>], width: usize, height: usize, background: [f64; 3]) -> Image {
    let order = sort_splats(splats);
    let mut image = Image::filled(width, height, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut pix = Pixel::new();
            for &i in &order {
                let s = splats[i].as_ref().expect("visible");
                if let Some((alpha, ..)) = alpha_at(s, px, py) {
                    pix.blend(s, alpha);
                }
            }
            let o = 3 * (y * width + x);
            image.rgb[o..o + 3].copy_from_slice(&pix.finish(&background));
        }
    }
    image
}

/// Gradient of a scalar with respect to one splat's rasterizer inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for d in 0..2 {
            self.mean2d[d] += o.mean2d[d];
        }
        for d in 0..3 {
            self.conic[d] += o.conic[d];
            self.color[d] += o.color[d];
        }
        self.opacity += o.opacity;
    }
}

fn backward_tile(tile: &TileState, splats: &[Option<Splat2D>], d_image: &[f64], width: usize, bg: &[f64; 3]) -> Vec<SplatGrad> {
    let mut grads = vec![SplatGrad::default(); tile.list.len()];
    for ly in 0..tile.h {
        for lx in 0..tile.w {
            let p = ly * tile.w + lx;
            let (x, y) = (tile.x0 + lx, tile.y0 + ly);
            let o = 3 * (y * width + x);
            let g = [d_image[o], d_image[o + 1], d_image[o + 2]];
            if g == [0.0; 3] {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = tile.t_final[p];
            // Color composited behind the current splat, background included.
            let mut behind: [f64; 3] = std::array::from_fn(|ch| bg[ch] * t);
            for j in (0..tile.used[p] as usize).rev() {
                let s = splats[tile.list[j]].as_ref().expect("visible");
                let Some((alpha, power, dx, dy)) = alpha_at(s, px, py) else {
                    continue;
                };
                let one_minus = 1.0 - alpha;
                t /= one_minus;
                let w = alpha * t;
                let gr = &mut grads[j];
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    gr.color[ch] += g[ch] * w;
                    d_alpha += g[ch] * (s.color[ch] * t - behind[ch] / one_minus);
                    behind[ch] += s.color[ch] * w;
                }
                let gauss = (-0.5 * power).exp();
                if s.opacity * gauss >= ALPHA_MAX {
                    continue;
                }
                gr.opacity += d_alpha * gauss;
                let d_power = -0.5 * alpha * d_alpha;
                let [a, b, c] = s.conic;
                gr.conic[0] += d_power * dx * dx;
                gr.conic[1] += d_power * 2.0 * dx * dy;
                gr.conic[2] += d_power * dy * dy;
                gr.mean2d[0] -= d_power * 2.0 * (a * dx + b * dy);
                gr.mean2d[1] -= d_power * 2.0 * (b * dx + c * dy);
            }
        }
    }
    grads
}

/// Reverse pass: `d_image` is the gradient of a scalar with respect to
/// every output channel. Returns one gradient per input splat.
pub fn rasterize_backward(raster: &Raster, splats: &[Option<Splat2D>], d_image: &[f64]) -> Vec<SplatGrad> {
    let width = raster.image.width;
    assert_eq!(d_image.len(), raster.image.rgb.len(), "gradient image size");
    let per_tile: Vec<Vec<SplatGrad>> = raster
        .tiles
        .par_iter()
        .map(|t| backward_tile(t, splats, d_image, width, &raster.background))
        .collect();
    let mut out = vec![SplatGrad::default(); splats.len()];
    for (t, grads) in raster.tiles.iter().zip(&per_tile) {
        for (&i, g) in t.list.iter().zip(grads) {
            out[i].add(g);
        }
    }
    out
}
