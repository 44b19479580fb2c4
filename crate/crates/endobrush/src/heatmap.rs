//! View-dependent per-pixel training weights.
//!
//! Pixels seen head-on and within a trustworthy distance band carry reliable
//! style information; grazing or far-away pixels do not. Each rendered view
//! gets a weight map combining an orientation term with a normalized distance
//! term, hard-masked outside the trusted range.

use std::io::{Read, Write};
use std::path::Path;

use crate::camera::CameraPose;
use crate::img;
use crate::raster::FragmentBuffer;

/// Distance beyond which pixels carry no training weight (mm).
pub const DEFAULT_D_MAX_MM: f64 = 15.0;
/// Orientation cutoff: pixels with flipped-normal cosine above this are
/// masked. Zero keeps every geometrically possible pixel.
pub const DEFAULT_THETA_THRESH: f64 = 0.0;

#[derive(Debug, thiserror::Error)]
pub enum HeatmapError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("heatmap file {path}: {detail}")]
    Format { path: String, detail: String },
}

/// How measured depth enters the weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceTerm {
    /// `min(depth/d_max, 1)` — farther (still unmasked) pixels weigh more.
    #[default]
    Direct,
    /// `1 − min(depth/d_max, 1)` — nearer pixels weigh more.
    Inverted,
}

/// Per-pixel training weights for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major weights in [0,1]; exactly 0 wherever `valid` is false.
    pub weights: Vec<f64>,
    /// False where the pixel is empty, out of mask, beyond d_max, or past
    /// the orientation cutoff.
    pub valid: Vec<bool>,
}

impl Heatmap {
    pub fn weight(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// The weight formula: half the sum of an orientation term `(1−θ)/2` and a
/// unit-scaled distance term. With normals flipped toward the camera,
/// θ ∈ [−1, 0], so the orientation term rewards head-on viewing.
#[inline]
pub fn heatmap_value(theta: f64, distance_term: f64) -> f64 {
    0.5 * ((1.0 - theta) / 2.0 + distance_term)
}

/// Compute the weight map for one rendered view with the default
/// (direct) distance term.
pub fn compute_heatmap(
    frag: &FragmentBuffer,
    pose: &CameraPose,
    d_max: f64,
    theta_thresh: f64,
) -> Heatmap {
    compute_heatmap_with(frag, pose, d_max, theta_thresh, DistanceTerm::Direct)
}

/// Compute the weight map with an explicit distance-term convention.
pub fn compute_heatmap_with(
    frag: &FragmentBuffer,
    pose: &CameraPose,
    d_max: f64,
    theta_thresh: f64,
    term: DistanceTerm,
) -> Heatmap {
    assert!(d_max > 0.0, "d_max must be positive, got {d_max}");
    assert!(
        (-1.0..=1.0).contains(&theta_thresh),
        "theta_thresh must be a cosine in [-1,1], got {theta_thresh}"
    );
    let n = frag.width * frag.height;
    let mut weights = vec![0.0f64; n];
    let mut valid = vec![false; n];
    for (i, fr) in frag.fragments.iter().enumerate() {
        if fr.is_empty() || !fr.in_mask || fr.depth > d_max {
            continue;
        }
        let v = (fr.world_point - pose.position).normalize();
        // flip the surface normal toward the camera so θ = n·v ≤ 0
        let mut theta = fr.normal.dot(&v);
        if theta > 0.0 {
            theta = -theta;
        }
        if theta > theta_thresh {
            continue;
        }
        let d = (fr.depth / d_max).min(1.0);
        let dist = match term {
            DistanceTerm::Direct => d,
            DistanceTerm::Inverted => 1.0 - d,
        };
        weights[i] = heatmap_value(theta, dist);
        valid[i] = true;
    }
    Heatmap { width: frag.width, height: frag.height, weights, valid }
}

/// Grayscale visualization: weight 0 → black, 1 → white.
pub fn save_heatmap_png(h: &Heatmap, path: &Path) -> Result<(), img::ImageError> {
    img::save_gray_png(path, h.width, h.height, &h.weights)
}

/// Persist weights as raw 32-bit floats: `u32 width, u32 height` then
/// row-major `f32` weights, all little-endian.
pub fn save_heatmap_f32(h: &Heatmap, path: &Path) -> Result<(), HeatmapError> {
    let io_err = |source| HeatmapError::Io { path: path.display().to_string(), source };
    let mut buf = Vec::with_capacity(8 + 4 * h.weights.len());
    buf.extend_from_slice(&(h.width as u32).to_le_bytes());
    buf.extend_from_slice(&(h.height as u32).to_le_bytes());
    for &w in &h.weights {
        buf.extend_from_slice(&(w as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)
}

/// Load a weight file written by [`save_heatmap_f32`]. Validity is
/// recovered as weight > 0 (valid pixels always weigh at least 1/4, since
/// the orientation term is at least 1/2).
pub fn load_heatmap_f32(path: &Path) -> Result<Heatmap, HeatmapError> {
    let io_err = |source| HeatmapError::Io { path: path.display().to_string(), source };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    let fmt_err = |detail: String| HeatmapError::Format { path: path.display().to_string(), detail };
    if bytes.len() < 8 {
        return Err(fmt_err(format!("{} bytes is too short for the header", bytes.len())));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expect = 8 + 4 * width * height;
    if bytes.len() != expect {
        return Err(fmt_err(format!(
            "{}x{} needs {} bytes, file has {}",
            width,
            height,
            expect,
            bytes.len()
        )));
    }
    let weights: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let valid = weights.iter().map(|&w| w > 0.0).collect();
    Ok(Heatmap { width, height, weights, valid })
}
