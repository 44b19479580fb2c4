//! Oriented binary image features: segment-test corner detection with
//! non-maximum suppression, intensity-centroid orientation, seeded 256-bit
//! binary descriptors sampled in a rotated patch, and mutual-nearest-neighbor
//! Hamming matching.
//!
//! Everything here is deterministic given the descriptor seed: detection and
//! suppression break ties by pixel index, descriptor probe pairs come from a
//! counter-based RNG, and matching breaks ties by lower index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::img::Image;

/// Smallest image the detector accepts (per side).
pub const MIN_DETECT_SIZE: usize = 32;

/// Contiguous circle pixels required by the segment test.
pub const SEGMENT_ARC: usize = 9;

/// Half-width of the square the descriptor probe pairs are drawn from
/// (the nominal 31×31 patch).
pub const DESCRIPTOR_PATCH_RADIUS: i32 = 13;

/// Probe pairs rotate with the keypoint, so reads reach radius
/// ceil(13·√2) = 19; keypoints closer than this to a border are dropped.
pub const DESCRIPTOR_BORDER: usize = 19;

/// Default seed for the descriptor probe layout.
pub const DEFAULT_DESCRIPTOR_SEED: u64 = 0xB1EF;

/// Radius of the intensity-centroid orientation patch.
const ORIENTATION_RADIUS: i32 = 15;

/// 16-pixel Bresenham circle of radius 3, clockwise from 12 o'clock.
pub const CIRCLE_16: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("image is {width}x{height}; the detector needs at least {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("validity mask has {got} entries for a {width}x{height} image")]
    MaskSize { got: usize, width: usize, height: usize },
}

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Gray {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Gray {
        assert_eq!(data.len(), width * height, "pixel count must match dimensions");
        Gray { width, height, data }
    }

    /// Luma of an RGB image (see [`Image::to_gray_u8`]).
    pub fn from_image(img: &Image) -> Gray {
        Gray::new(img.width, img.height, img.to_gray_u8())
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    fn at_i(&self, x: i32, y: i32) -> u8 {
        self.data[y as usize * self.width + x as usize]
    }
}

/// Detector settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    /// Segment-test contrast threshold on 8-bit values.
    pub threshold: u8,
    /// Keep at most this many keypoints (by response).
    pub max_keypoints: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams { threshold: 20, max_keypoints: 500 }
    }
}

/// A detected corner in image coordinates (y grows downward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageKeypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
    /// Intensity-centroid angle in [−π, π).
    pub orientation: f64,
}

impl ImageKeypoint {
    #[inline]
    pub fn xi(&self) -> usize {
        self.x as usize
    }

    #[inline]
    pub fn yi(&self) -> usize {
        self.y as usize
    }
}

/// Segment-test response at one pixel: 0 when not a corner, otherwise the
/// summed contrast margin of whichever side (brighter/darker) sustains a
/// contiguous arc of [`SEGMENT_ARC`].
fn segment_response(gray: &Gray, x: usize, y: usize, t: u8) -> f64 {
    let c = gray.at(x, y) as i32;
    let t = t as i32;
    let mut bright = [false; 16];
    let mut dark = [false; 16];
    let mut vals = [0i32; 16];
    for (k, (dx, dy)) in CIRCLE_16.iter().enumerate() {
        let v = gray.at_i(x as i32 + dx, y as i32 + dy) as i32;
        vals[k] = v;
        bright[k] = v > c + t;
        dark[k] = v < c - t;
    }
    let has_arc = |mask: &[bool; 16]| -> bool {
        let mut run = 0usize;
        // doubled walk handles wraparound
        for k in 0..32 {
            if mask[k % 16] {
                run += 1;
                if run >= SEGMENT_ARC {
                    return true;
                }
            } else {
                run = 0;
            }
        }
        false
    };
    if has_arc(&bright) {
        let sum: i32 =
            (0..16).filter(|&k| bright[k]).map(|k| vals[k] - c - t).sum();
        sum as f64
    } else if has_arc(&dark) {
        let sum: i32 = (0..16).filter(|&k| dark[k]).map(|k| c - t - vals[k]).sum();
        sum as f64
    } else {
        0.0
    }
}

/// Intensity-centroid orientation over a disc of radius 15, clipped at the
/// image border. Returns an angle in [−π, π); a featureless patch gives 0.
fn centroid_orientation(gray: &Gray, x: usize, y: usize) -> f64 {
    let (w, h) = (gray.width as i32, gray.height as i32);
    let (cx, cy) = (x as i32, y as i32);
    let mut m10 = 0i64;
    let mut m01 = 0i64;
    for dy in -ORIENTATION_RADIUS..=ORIENTATION_RADIUS {
        for dx in -ORIENTATION_RADIUS..=ORIENTATION_RADIUS {
            if dx * dx + dy * dy > ORIENTATION_RADIUS * ORIENTATION_RADIUS {
                continue;
            }
            let (px, py) = (cx + dx, cy + dy);
            if px < 0 || py < 0 || px >= w || py >= h {
                continue;
            }
            let v = gray.at_i(px, py) as i64;
            m10 += dx as i64 * v;
            m01 += dy as i64 * v;
        }
    }
    let mut theta = (m01 as f64).atan2(m10 as f64);
    if theta >= std::f64::consts::PI {
        theta = -std::f64::consts::PI;
    }
    theta
}

/// Segment-test corners with non-maximum suppression and a response-ranked
/// top-K cut. See [`detect_masked`] for the masked variant.
pub fn detect(gray: &Gray, params: &DetectorParams) -> Result<Vec<ImageKeypoint>, FeatureError> {
    detect_masked(gray, params, None)
}

/// [`detect`] restricted to a validity mask: a corner is kept only when its
/// center and all 16 circle pixels are valid. Rendered images use this to
/// keep detections off the mask rim, where contrast is a render artifact
/// rather than surface content.
pub fn detect_masked(
    gray: &Gray,
    params: &DetectorParams,
    valid: Option<&[bool]>,
) -> Result<Vec<ImageKeypoint>, FeatureError> {
    let (w, h) = (gray.width, gray.height);
    if w < MIN_DETECT_SIZE || h < MIN_DETECT_SIZE {
        return Err(FeatureError::ImageTooSmall { width: w, height: h, min: MIN_DETECT_SIZE });
    }
    if let Some(mask) = valid {
        if mask.len() != w * h {
            return Err(FeatureError::MaskSize { got: mask.len(), width: w, height: h });
        }
    }
    let circle_valid = |x: usize, y: usize| -> bool {
        match valid {
            None => true,
            Some(mask) => {
                mask[y * w + x]
                    && CIRCLE_16.iter().all(|(dx, dy)| {
                        let px = (x as i32 + dx) as usize;
                        let py = (y as i32 + dy) as usize;
                        mask[py * w + px]
                    })
            }
        }
    };

    let mut response = vec![0.0f64; w * h];
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            if circle_valid(x, y) {
                response[y * w + x] = segment_response(gray, x, y, params.threshold);
            }
        }
    }

    // non-maximum suppression over the 8-neighborhood; plateaus resolve by
    // pixel index so the survivor set is deterministic
    let mut kept = Vec::new();
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let i = y * w + x;
            let r = response[i];
            if r <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nbrs: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let j = (y as i32 + dy) as usize * w + (x as i32 + dx) as usize;
                    let rj = response[j];
                    if rj > r || (rj == r && j > i) {
                        is_max = false;
                        break 'nbrs;
                    }
                }
            }
            if is_max {
                kept.push((i, r));
            }
        }
    }

    kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    kept.truncate(params.max_keypoints);
    Ok(kept
        .into_iter()
        .map(|(i, r)| {
            let (x, y) = (i % w, i / w);
            ImageKeypoint {
                x: x as f64,
                y: y as f64,
                response: r,
                orientation: centroid_orientation(gray, x, y),
            }
        })
        .collect())
}

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    #[inline]
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        (0..4).map(|i| (self.0[i] ^ other.0[i]).count_ones()).sum()
    }

    #[inline]
    pub fn bit(&self, k: usize) -> bool {
        (self.0[k / 64] >> (k % 64)) & 1 == 1
    }
}

/// The 256 probe pairs a descriptor compares, drawn once from a seed and
/// shared by every frame of an evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorLayout {
    pairs: Vec<[i32; 4]>,
}

impl DescriptorLayout {
    /// Uniform probe pairs in the [−13, 13]² patch square; degenerate pairs
    /// (both probes equal) are redrawn.
    pub fn seeded(seed: u64) -> DescriptorLayout {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = DESCRIPTOR_PATCH_RADIUS;
        let mut pairs = Vec::with_capacity(256);
        while pairs.len() < 256 {
            let p = [
                rng.random_range(-r..=r),
                rng.random_range(-r..=r),
                rng.random_range(-r..=r),
                rng.random_range(-r..=r),
            ];
            if p[0] != p[2] || p[1] != p[3] {
                pairs.push(p);
            }
        }
        DescriptorLayout { pairs }
    }

    pub fn pairs(&self) -> &[[i32; 4]] {
        &self.pairs
    }
}

/// Descriptors for the keypoints far enough from the border, as
/// `(keypoint index, descriptor)` pairs; closer keypoints are dropped.
///
/// Each of the 256 bits is set when the first probe reads strictly darker
/// than the second, with the probe offsets rotated by the keypoint's
/// orientation and rounded to pixels.
pub fn describe(
    gray: &Gray,
    keypoints: &[ImageKeypoint],
    layout: &DescriptorLayout,
) -> Vec<(usize, Descriptor)> {
    let (w, h) = (gray.width, gray.height);
    let border = DESCRIPTOR_BORDER;
    let mut out = Vec::new();
    for (ki, kp) in keypoints.iter().enumerate() {
        let (x, y) = (kp.xi(), kp.yi());
        if x < border || y < border || x + border >= w || y + border >= h {
            continue;
        }
        let (sin, cos) = kp.orientation.sin_cos();
        let rotate = |px: i32, py: i32| -> (i32, i32) {
            let rx = (cos * px as f64 - sin * py as f64).round() as i32;
            let ry = (sin * px as f64 + cos * py as f64).round() as i32;
            (x as i32 + rx, y as i32 + ry)
        };
        let mut bits = [0u64; 4];
        for (k, p) in layout.pairs.iter().enumerate() {
            let (ax, ay) = rotate(p[0], p[1]);
            let (bx, by) = rotate(p[2], p[3]);
            if gray.at_i(ax, ay) < gray.at_i(bx, by) {
                bits[k / 64] |= 1u64 << (k % 64);
            }
        }
        out.push((ki, Descriptor(bits)));
    }
    out
}

/// Mutual nearest neighbors under Hamming distance, kept when the distance
/// is ≤ `max_hamming`; nearest-neighbor ties go to the lower index. Pairs
/// come back sorted by the first index.
pub fn match_descriptors(
    a: &[Descriptor],
    b: &[Descriptor],
    max_hamming: u32,
) -> Vec<(usize, usize)> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let nearest = |from: &[Descriptor], to: &[Descriptor]| -> Vec<usize> {
        from.iter()
            .map(|d| {
                let mut best = 0usize;
                let mut best_dist = u32::MAX;
                for (j, e) in to.iter().enumerate() {
                    let dist = d.hamming(e);
                    if dist < best_dist {
                        best = j;
                        best_dist = dist;
                    }
                }
                best
            })
            .collect()
    };
    let a_to_b = nearest(a, b);
    let b_to_a = nearest(b, a);
    let mut pairs = Vec::new();
    for (i, &j) in a_to_b.iter().enumerate() {
        if b_to_a[j] == i && a[i].hamming(&b[j]) <= max_hamming {
            pairs.push((i, j));
        }
    }
    pairs
}
