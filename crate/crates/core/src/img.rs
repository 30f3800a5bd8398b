//! RGB image buffer, PNG IO, and the scalar image metrics.

use std::path::Path;

use crate::error::{GsError, Result};

/// Reported PSNR ceiling for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

/// H×W×3 image with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `data[(y * width + x) * 3 + ch]`
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Image {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&color);
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut raw = Vec::with_capacity(self.data.len());
        for &v in &self.data {
            raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            encoder,
            &raw,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| GsError::Image(format!("png encode: {e}")))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Image> {
        let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| GsError::Image(format!("png decode: {e}")))?
            .to_rgb8();
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let data = decoded
            .into_raw()
            .into_iter()
            .map(|b| b as f64 / 255.0)
            .collect();
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        Image::from_png_bytes(&std::fs::read(path)?)
    }
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(GsError::Image(format!(
            "size mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared error over all channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`] for identical
/// inputs (unit peak).
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Mean absolute error over all channels.
pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.data.len() as f64)
}
