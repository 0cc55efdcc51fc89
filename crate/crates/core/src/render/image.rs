use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&color);
        }
        Image { width, height, rgb }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn check_same_size(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, data: &[u8]) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            rgb: data.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized_8bit(&self) -> Self {
        Image::from_rgb8(self.width, self.height, &self.to_rgb8()).expect("same size")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::dataset(path, e))?;
        w.write_image_data(&self.to_rgb8())
            .map_err(|e| Error::dataset(path, e))?;
        w.finish().map_err(|e| Error::dataset(path, e))?;
        Ok(())
    }

    /// Reads an 8-bit RGB or RGBA PNG; alpha is dropped.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::dataset(path, e))?;
        let dec = png::Decoder::new(BufReader::new(file));
        let mut reader = dec.read_info().map_err(|e| Error::dataset(path, e))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::dataset(path, "image too large"))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::dataset(path, e))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::dataset(path, "expected 8-bit channels"));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let data = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => data.to_vec(),
            png::ColorType::Rgba => data
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            other => return Err(Error::dataset(path, format!("unsupported color type {other:?}"))),
        };
        Image::from_rgb8(w, h, &rgb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(5, 3, [0.2, 0.4, 0.6]);
        img.rgb[7] = 1.0;
        let img = img.quantized_8bit();
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
    }

    #[test]
    fn missing_png_names_the_file() {
        let err = Image::load_png("/nonexistent/frame.png").unwrap_err();
        assert!(err.to_string().contains("frame.png"));
    }
}
