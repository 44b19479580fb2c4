//! Float image buffers and PNG import/export.
//!
//! Pixels are stored row-major as three f64 channels. The colorspace tag
//! tracks what those channels mean; conversions are explicit.

use std::path::Path;

use crate::color;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    RgbLinear,
    Srgb,
    Lab,
}

#[derive(Debug, Clone)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, 3 channels per pixel.
    pub channels: Vec<f64>,
    pub colorspace: ColorSpace,
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("png error on {path}: {source}")]
    Png { path: String, source: image::ImageError },
    #[error("image {path} has size {got_w}x{got_h}, expected {want_w}x{want_h}")]
    Dimensions { path: String, got_w: usize, got_h: usize, want_w: usize, want_h: usize },
}

impl Image {
    pub fn new(width: usize, height: usize, colorspace: ColorSpace) -> Self {
        Image { width, height, channels: vec![0.0; width * height * 3], colorspace }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.channels[i], self.channels[i + 1], self.channels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.channels[i] = rgb[0];
        self.channels[i + 1] = rgb[1];
        self.channels[i + 2] = rgb[2];
    }

    /// Encode to 8-bit sRGB PNG. Linear images pass through the sRGB curve,
    /// already-encoded images are quantized as-is.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let mut buf = Vec::with_capacity(self.width * self.height * 3);
        match self.colorspace {
            ColorSpace::RgbLinear => {
                for v in &self.channels {
                    buf.push(color::linear_to_srgb_u8(*v));
                }
            }
            ColorSpace::Srgb => {
                for v in &self.channels {
                    buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
            ColorSpace::Lab => {
                for px in self.channels.chunks_exact(3) {
                    let lab = color::LabPixel::from_normalized([px[0], px[1], px[2]]);
                    let n = lab.normalized();
                    for c in n {
                        buf.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer sized from dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| ImageError::Png { path: path.display().to_string(), source })
    }

    /// Load an 8-bit PNG as sRGB-tagged floats in [0,1].
    pub fn load_png_srgb(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)
            .map_err(|source| ImageError::Png { path: path.display().to_string(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut channels = Vec::with_capacity((w * h * 3) as usize);
        for v in img.as_raw() {
            channels.push(*v as f64 / 255.0);
        }
        Ok(Image { width: w as usize, height: h as usize, channels, colorspace: ColorSpace::Srgb })
    }

    /// sRGB image decoded to linear RGB.
    pub fn to_linear(&self) -> Image {
        match self.colorspace {
            ColorSpace::RgbLinear => self.clone(),
            ColorSpace::Srgb => {
                let channels = self.channels.iter().map(|v| color::srgb_decode(*v)).collect();
                Image { width: self.width, height: self.height, channels, colorspace: ColorSpace::RgbLinear }
            }
            ColorSpace::Lab => panic!("no direct LAB -> linear path"),
        }
    }

    /// Linear or sRGB image converted to normalized LAB channels.
    pub fn to_lab_normalized(&self) -> Image {
        let lin = self.to_linear();
        let mut channels = Vec::with_capacity(lin.channels.len());
        for px in lin.channels.chunks_exact(3) {
            let n = color::rgb_to_lab_normalized([px[0], px[1], px[2]]);
            channels.extend_from_slice(&n);
        }
        Image { width: self.width, height: self.height, channels, colorspace: ColorSpace::Lab }
    }

    /// Luma (BT.601 on the sRGB-encoded values) as 8-bit grayscale,
    /// the input format of the feature detector.
    pub fn to_gray_u8(&self) -> Vec<u8> {
        let encoded: Vec<f64> = match self.colorspace {
            ColorSpace::Srgb => self.channels.clone(),
            ColorSpace::RgbLinear => self.channels.iter().map(|v| color::srgb_encode(*v)).collect(),
            ColorSpace::Lab => panic!("grayscale conversion expects RGB input"),
        };
        encoded
            .chunks_exact(3)
            .map(|px| {
                let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                (y * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }
}

/// Save a single-channel map as 8-bit grayscale PNG, values already in [0,1].
pub fn save_gray_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), ImageError> {
    let buf: Vec<u8> =
        values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer sized from dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImageError::Png { path: path.display().to_string(), source })
}

/// Save depths (mm) as 16-bit PNG with a fixed mm-per-unit scale.
pub fn save_depth_png16(
    path: &Path,
    width: usize,
    height: usize,
    depths_mm: &[f64],
    mm_per_unit: f64,
) -> Result<(), ImageError> {
    let buf: Vec<u16> = depths_mm
        .iter()
        .map(|d| (d / mm_per_unit).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        width as u32,
        height as u32,
        buf,
    )
    .expect("buffer sized from dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImageError::Png { path: path.display().to_string(), source })
}

/// Read a 16-bit depth PNG back as raw units: `(width, height, units)`.
/// Multiply by the bundle's mm-per-unit scale to recover millimetres.
pub fn load_depth_png16(path: &Path) -> Result<(usize, usize, Vec<u16>), ImageError> {
    let img = image::open(path)
        .map_err(|source| ImageError::Png { path: path.display().to_string(), source })?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}
