//! CPU splatting renderer and image metrics.

pub mod image;
pub mod metrics;
pub mod project;
pub mod raster;

pub use image::Image;
pub use metrics::{distortion, distortion_with_grad, l1, mse, psnr, ssim};
pub use project::{project, project_geometry, Projection, Splat2D};
pub use raster::{rasterize, rasterize_backward, rasterize_reference, Raster, RenderOptions, SplatGrad};

use crate::scene::{Camera, RenderableGaussian};

pub fn project_all(gaussians: &[RenderableGaussian], cam: &Camera) -> Vec<Option<Splat2D>> {
    gaussians.iter().map(|g| project(g, cam)).collect()
}

/// Tiled render.
pub fn render(gaussians: &[RenderableGaussian], cam: &Camera, opts: &RenderOptions) -> Image {
    rasterize(&project_all(gaussians, cam), cam.width(), cam.height(), opts).image
}

/// Brute-force per-pixel render without tiling or early exit.
pub fn render_reference(gaussians: &[RenderableGaussian], cam: &Camera, background: [f64; 3]) -> Image {
    rasterize_reference(&project_all(gaussians, cam), cam.width(), cam.height(), background)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> Camera {
        Camera {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            focal: [40.0, 40.0],
            principal_point: [8.0, 8.0],
            resolution: [16, 16],
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let opts = RenderOptions {
            background: [0.1, 0.2, 0.3],
            early_exit: true,
        };
        let img = render(&[], &camera(), &opts);
        assert_eq!(img, Image::filled(16, 16, [0.1, 0.2, 0.3]));
    }

    #[test]
    fn single_saturated_splat() {
        // Centered on pixel (8, 8) with opacity high enough to clamp.
        let g = RenderableGaussian {
            location: [0.5 / 40.0, 0.5 / 40.0, 1.0],
            covariance: [[1e-3, 0.0, 0.0], [0.0, 1e-3, 0.0], [0.0, 0.0, 1e-3]],
            opacity: 1.0,
            color: [1.0, 0.0, 0.0],
        };
        let img = render(&[g], &camera(), &RenderOptions::default());
        assert_eq!(img.pixel(8, 8), [0.99, 0.0, 0.0]);
    }
}
