//! Image metrics and the rendering loss, with gradients with respect to the
//! rendered image.

use super::image::Image;
use crate::error::Result;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Weight of the structural term in the rendering loss.
pub const SSIM_WEIGHT: f64 = 0.2;
pub const PSNR_CAP: f64 = 100.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_size(b)?;
    let n = a.rgb.len().max(1) as f64;
    Ok(a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_size(b)?;
    let n = a.rgb.len().max(1) as f64;
    Ok(a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
fn window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Window used for an image: 11 taps, shrunk (kept odd) for images smaller
/// than that.
fn window_size(width: usize, height: usize) -> usize {
    let m = SSIM_WINDOW.min(width).min(height);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Valid (unpadded) separable correlation of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let ow = w + 1 - k;
    let oh = h + 1 - k;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let row = &plane[y * w + x..y * w + x + k];
            tmp[y * ow + x] = row.iter().zip(taps).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| tmp[(y + i) * ow + x] * taps[i]).sum();
        }
    }
    (out, ow, oh)
}

/// Adjoint of [`filter_valid`]: spreads a valid-size map back to `w x h`.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w + 1 - k;
    let oh = h + 1 - k;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for i in 0..k {
                tmp[(y + i) * ow + x] += v * taps[i];
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..k {
                out[y * w + x + i] += v * taps[i];
            }
        }
    }
    out
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.rgb.iter().skip(ch).step_by(3).copied().collect()
}

/// Mean SSIM over channels and valid window positions; with
/// `want_grad`, also its gradient with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    a.check_same_size(b)?;
    let (w, h) = (a.width, a.height);
    if w == 0 || h == 0 {
        return Ok((1.0, want_grad.then(Vec::new)));
    }
    let taps = window(window_size(w, h));
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.rgb.len()]);
    for ch in 0..3 {
        let x = channel(a, ch);
        let y = channel(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mu_x, ow, oh) = filter_valid(&x, w, h, &taps);
        let (mu_y, ..) = filter_valid(&y, w, h, &taps);
        let (e_xx, ..) = filter_valid(&xx, w, h, &taps);
        let (e_yy, ..) = filter_valid(&yy, w, h, &taps);
        let (e_xy, ..) = filter_valid(&xy, w, h, &taps);
        let n = (ow * oh) as f64;
        let mut g_mu = vec![0.0; ow * oh];
        let mut g_xx = vec![0.0; ow * oh];
        let mut g_xy = vec![0.0; ow * oh];
        let mut sum = 0.0;
        for p in 0..ow * oh {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * (e_xy[p] - mx * my) + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = (e_xx[p] - mx * mx) + (e_yy[p] - my * my) + SSIM_C2;
            let num = a1 * a2;
            let den = b1 * b2;
            let s = num / den;
            sum += s;
            if want_grad {
                let d_num = 2.0 * my * a2 - 2.0 * my * a1;
                let d_den = 2.0 * mx * b2 - 2.0 * mx * b1;
                g_mu[p] = (d_num - s * d_den) / den;
                g_xx[p] = -s * b1 / den;
                g_xy[p] = 2.0 * a1 / den;
            }
        }
        total += sum / n;
        if let Some(grad) = grad.as_mut() {
            let scale = 1.0 / (3.0 * n);
            let t_mu = filter_valid_adjoint(&g_mu, w, h, &taps);
            let t_xx = filter_valid_adjoint(&g_xx, w, h, &taps);
            let t_xy = filter_valid_adjoint(&g_xy, w, h, &taps);
            for q in 0..w * h {
                grad[3 * q + ch] = scale * (t_mu[q] + 2.0 * x[q] * t_xx[q] + y[q] * t_xy[q]);
            }
        }
    }
    Ok((total / 3.0, grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// `(1 - w) L1 + w (1 - SSIM)`.
pub fn distortion(rendered: &Image, target: &Image) -> Result<f64> {
    let l = l1(rendered, target)?;
    let s = ssim(rendered, target)?;
    Ok((1.0 - SSIM_WEIGHT) * l + SSIM_WEIGHT * (1.0 - s))
}

/// Distortion and its gradient with respect to every channel of
/// `rendered`.
pub fn distortion_with_grad(rendered: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    let l = l1(rendered, target)?;
    let (s, g) = ssim_impl(rendered, target, true)?;
    let mut grad = g.expect("requested");
    let n = rendered.rgb.len().max(1) as f64;
    for (i, gv) in grad.iter_mut().enumerate() {
        let d = rendered.rgb[i] - target.rgb[i];
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *gv = (1.0 - SSIM_WEIGHT) * sign / n - SSIM_WEIGHT * *gv;
    }
    Ok(((1.0 - SSIM_WEIGHT) * l + SSIM_WEIGHT * (1.0 - s), grad))
}
