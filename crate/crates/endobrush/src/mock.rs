//! Deterministic procedural target painter standing in for a 2D stylization
//! network.
//!
//! Both modes color a pixel purely from the surface point behind it: the
//! world point is quantized to a fixed cell size and hashed (seed included),
//! so the same surface cell gets the same color in every view. CONSISTENT
//! mode stops there. JITTERED mode additionally rotates each view's colors
//! around the gray axis by a per-view angle drawn from the seed, modeling a
//! stylizer whose palette drifts between frames while the underlying pattern
//! stays put.
//!
//! The palette is a flesh-toned base with a small hashed offset per cell.
//! The offset amplitude is deliberately modest: baked textures inherit the
//! mock's spatial gradients, and downstream multi-view consistency checks
//! compare colors of near-coincident surface points, which bounds how fast
//! the field may change per millimeter. Most of the offset is shared across
//! channels (a brightness speckle) so the luma contrast available to feature
//! detection is as large as that bound allows.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::img::{ColorSpace, Image};
use crate::raster::FragmentBuffer;

/// Quantization cell edge length in millimeters.
pub const CELL_SIZE_MM: f64 = 0.5;

/// Base linear-RGB color every cell offset is applied to.
pub const BASE_COLOR: [f64; 3] = [0.52, 0.26, 0.23];

/// Maximum per-channel magnitude of the hashed cell offset.
pub const SPECKLE_AMPLITUDE: f64 = 0.03;

/// Fraction of the offset shared by all three channels.
const SHARED_WEIGHT: f64 = 0.75;

/// Largest per-view hue rotation JITTERED mode applies (radians).
pub const MAX_HUE_JITTER_RAD: f64 = std::f64::consts::PI / 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockMode {
    /// Same surface cell, same color, in every view.
    Consistent,
    /// Consistent colors plus a per-view rotation around the gray axis.
    Jittered,
}

impl std::fmt::Display for MockMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MockMode::Consistent => write!(f, "consistent"),
            MockMode::Jittered => write!(f, "jittered"),
        }
    }
}

/// Integer cell containing a world point (floor on each axis).
pub fn cell_of(p: &Point3<f64>) -> [i64; 3] {
    [
        (p.x / CELL_SIZE_MM).floor() as i64,
        (p.y / CELL_SIZE_MM).floor() as i64,
        (p.z / CELL_SIZE_MM).floor() as i64,
    ]
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless hash of a cell index under a seed.
fn cell_hash(cell: [i64; 3], seed: u64) -> u64 {
    let mut h = splitmix64(seed);
    for c in cell {
        h = splitmix64(h ^ c as u64);
    }
    h
}

/// Map 16 hash bits to a symmetric offset in [-1, 1].
fn signed_unit(bits: u64) -> f64 {
    (bits & 0xFFFF) as f64 / 32767.5 - 1.0
}

/// Linear-RGB color of a quantization cell.
pub fn cell_color(cell: [i64; 3], seed: u64) -> [f64; 3] {
    let h = cell_hash(cell, seed);
    let shared = signed_unit(h);
    let mut rgb = [0.0; 3];
    for k in 0..3 {
        let tint = signed_unit(h >> (16 * (k + 1)));
        let offset = SPECKLE_AMPLITUDE * (SHARED_WEIGHT * shared + (1.0 - SHARED_WEIGHT) * tint);
        rgb[k] = BASE_COLOR[k] + offset;
    }
    rgb
}

/// Linear-RGB color of the cell containing a world point.
pub fn surface_color(p: &Point3<f64>, seed: u64) -> [f64; 3] {
    cell_color(cell_of(p), seed)
}

/// Per-view hue rotation angle for JITTERED mode, uniform in
/// ±[`MAX_HUE_JITTER_RAD`] and a pure function of (seed, pose id).
pub fn jitter_angle(seed: u64, pose_id: u32) -> f64 {
    let mut h = splitmix64(seed ^ 0x4A49_5454_4552_2121);
    h = splitmix64(h ^ pose_id as u64);
    MAX_HUE_JITTER_RAD * signed_unit(h)
}

/// Rotate a linear-RGB color about the gray axis (1,1,1)/sqrt(3).
/// Grays are fixed points; the vector norm is preserved.
pub fn rotate_hue(rgb: [f64; 3], angle: f64) -> [f64; 3] {
    let inv_sqrt3 = 1.0 / 3.0_f64.sqrt();
    let a = [inv_sqrt3, inv_sqrt3, inv_sqrt3];
    let (sin, cos) = angle.sin_cos();
    let dot = a[0] * rgb[0] + a[1] * rgb[1] + a[2] * rgb[2];
    let cross = [
        a[1] * rgb[2] - a[2] * rgb[1],
        a[2] * rgb[0] - a[0] * rgb[2],
        a[0] * rgb[1] - a[1] * rgb[0],
    ];
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = rgb[k] * cos + cross[k] * sin + a[k] * dot * (1.0 - cos);
    }
    out
}

/// Paint one view's stylization target from its fragment buffer.
///
/// Pixels with no fragment or outside the circular mask are black; everything
/// else is colored from the fragment's world point. The result is linear RGB
/// (PNG export applies the sRGB curve).
pub fn stylize_view(frag: &FragmentBuffer, mode: MockMode, seed: u64, pose_id: u32) -> Image {
    let mut img = Image::new(frag.width, frag.height, ColorSpace::RgbLinear);
    let angle = match mode {
        MockMode::Consistent => 0.0,
        MockMode::Jittered => jitter_angle(seed, pose_id),
    };
    for y in 0..frag.height {
        for x in 0..frag.width {
            let f = frag.at(x, y);
            if f.is_empty() || !f.in_mask {
                continue;
            }
            let mut rgb = surface_color(&f.world_point, seed);
            if angle != 0.0 {
                rgb = rotate_hue(rgb, angle);
            }
            img.set_pixel(x, y, rgb);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraPose, Intrinsics};
    use crate::fixture;
    use crate::raster::rasterize;
    use nalgebra::{Matrix3, Point3, Rotation3, Vector3};

    #[test]
    fn cell_quantization_floors_each_axis() {
        assert_eq!(cell_of(&Point3::new(0.0, 0.0, 0.0)), [0, 0, 0]);
        assert_eq!(cell_of(&Point3::new(0.49, 0.5, 0.99)), [0, 1, 1]);
        assert_eq!(cell_of(&Point3::new(-0.01, -0.5, -0.51)), [-1, -1, -2]);
    }

    #[test]
    fn colors_depend_only_on_the_cell_and_seed() {
        let a = surface_color(&Point3::new(1.01, 2.02, 3.03), 7);
        let b = surface_color(&Point3::new(1.49, 2.49, 3.49), 7);
        assert_eq!(a, b, "same cell must give identical colors");
        let c = surface_color(&Point3::new(1.51, 2.02, 3.03), 7);
        assert_ne!(a, c, "neighboring cell should differ");
        let d = surface_color(&Point3::new(1.01, 2.02, 3.03), 8);
        assert_ne!(a, d, "different seed should differ");
    }

    #[test]
    fn palette_stays_within_the_advertised_band() {
        for i in 0..2000i64 {
            let rgb = cell_color([i, -2 * i, 3 * i + 1], 123);
            for k in 0..3 {
                let delta = (rgb[k] - BASE_COLOR[k]).abs();
                assert!(delta <= SPECKLE_AMPLITUDE + 1e-12, "offset {delta} exceeds amplitude");
                assert!(rgb[k] > 0.0 && rgb[k] < 1.0);
            }
        }
    }

    #[test]
    fn hash_algorithm_is_frozen() {
        // Values pinned from an independent implementation of the same hash
        // chain; a drift here silently invalidates every previously generated
        // target set, so these literals must never be "fixed" to match code.
        let a = cell_color([0, 0, 0], 7);
        let ea = [0.52897047379263, 0.27917486839093614, 0.23721492332341498];
        let b = cell_color([3, -5, 12], 42);
        let eb = [0.5440826276035706, 0.2738880750743877, 0.2549782558937972];
        for k in 0..3 {
            assert!((a[k] - ea[k]).abs() < 1e-15, "channel {k}: {} vs {}", a[k], ea[k]);
            assert!((b[k] - eb[k]).abs() < 1e-15, "channel {k}: {} vs {}", b[k], eb[k]);
        }
        let angle = jitter_angle(3, 0);
        assert!((angle - -0.04602811545314413).abs() < 1e-15);
    }

    #[test]
    fn gray_axis_is_fixed_under_hue_rotation() {
        let g = [0.42, 0.42, 0.42];
        let r = rotate_hue(g, 1.1);
        for k in 0..3 {
            assert!((r[k] - g[k]).abs() < 1e-12);
        }
        let v = [0.6, 0.2, 0.3];
        let rotated = rotate_hue(v, 0.7);
        let norm_in: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_out: f64 = rotated.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm_in - norm_out).abs() < 1e-12, "rotation must preserve norm");
        let same = rotate_hue(v, 0.0);
        assert_eq!(same, v);
        let full = rotate_hue(v, std::f64::consts::TAU);
        for k in 0..3 {
            assert!((full[k] - v[k]).abs() < 1e-12);
        }
        // luma component along the gray axis is preserved exactly
        let mean_in = (v[0] + v[1] + v[2]) / 3.0;
        let mean_out = (rotated[0] + rotated[1] + rotated[2]) / 3.0;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    fn tube_view() -> (FragmentBuffer, Intrinsics) {
        let mesh = fixture::cylinder(5.0, 60.0, 48, 60);
        let intr = Intrinsics { width: 96, height: 96, ..Intrinsics::default() };
        let pose = CameraPose {
            rotation: Matrix3::identity(),
            position: Point3::new(0.0, 0.0, 10.0),
            pose_id: 0,
        };
        (rasterize(&mesh, &pose, &intr), intr)
    }

    #[test]
    fn stylized_pixels_rehash_from_their_fragments() {
        let (frag, _) = tube_view();
        let img = stylize_view(&frag, MockMode::Consistent, 99, 0);
        let mut checked = 0;
        for y in 0..frag.height {
            for x in 0..frag.width {
                let f = frag.at(x, y);
                if f.is_empty() || !f.in_mask {
                    assert_eq!(img.pixel(x, y), [0.0; 3]);
                    continue;
                }
                // independent re-derivation from the raw fragment
                let cell = [
                    (f.world_point.x / CELL_SIZE_MM).floor() as i64,
                    (f.world_point.y / CELL_SIZE_MM).floor() as i64,
                    (f.world_point.z / CELL_SIZE_MM).floor() as i64,
                ];
                assert_eq!(img.pixel(x, y), cell_color(cell, 99));
                checked += 1;
            }
        }
        assert!(checked > 1000, "view should cover many pixels, got {checked}");
    }

    #[test]
    fn consistent_mode_agrees_across_views_on_shared_cells() {
        let mesh = fixture::cylinder(5.0, 60.0, 48, 60);
        let intr = Intrinsics { width: 96, height: 96, ..Intrinsics::default() };
        let pose_a = CameraPose {
            rotation: Matrix3::identity(),
            position: Point3::new(0.0, 0.0, 10.0),
            pose_id: 0,
        };
        let pose_b = CameraPose {
            rotation: Rotation3::from_axis_angle(&Vector3::y_axis(), 0.05).into_inner(),
            position: Point3::new(0.3, 0.1, 13.0),
            pose_id: 1,
        };
        let frag_a = rasterize(&mesh, &pose_a, &intr);
        let frag_b = rasterize(&mesh, &pose_b, &intr);
        let img_a = stylize_view(&frag_a, MockMode::Consistent, 5, 0);
        let img_b = stylize_view(&frag_b, MockMode::Consistent, 5, 1);

        use std::collections::HashMap;
        let mut by_cell: HashMap<[i64; 3], [f64; 3]> = HashMap::new();
        for y in 0..frag_a.height {
            for x in 0..frag_a.width {
                let f = frag_a.at(x, y);
                if !f.is_empty() && f.in_mask {
                    by_cell.insert(cell_of(&f.world_point), img_a.pixel(x, y));
                }
            }
        }
        let mut shared = 0;
        for y in 0..frag_b.height {
            for x in 0..frag_b.width {
                let f = frag_b.at(x, y);
                if f.is_empty() || !f.in_mask {
                    continue;
                }
                if let Some(&color) = by_cell.get(&cell_of(&f.world_point)) {
                    assert_eq!(img_b.pixel(x, y), color, "same cell, different color");
                    shared += 1;
                }
            }
        }
        assert!(shared > 500, "views should share many cells, got {shared}");
    }

    #[test]
    fn jittered_mode_is_stable_per_view_but_varies_between_views() {
        let (frag, _) = tube_view();
        let first = stylize_view(&frag, MockMode::Jittered, 11, 4);
        let again = stylize_view(&frag, MockMode::Jittered, 11, 4);
        assert_eq!(first.channels, again.channels, "same view must reproduce exactly");

        let other_view = stylize_view(&frag, MockMode::Jittered, 11, 5);
        assert_ne!(first.channels, other_view.channels, "views should be jittered apart");

        let consistent = stylize_view(&frag, MockMode::Consistent, 11, 4);
        // jitter preserves each pixel's gray-axis component
        for (j, c) in first.channels.chunks_exact(3).zip(consistent.channels.chunks_exact(3)) {
            let mj = (j[0] + j[1] + j[2]) / 3.0;
            let mc = (c[0] + c[1] + c[2]) / 3.0;
            assert!((mj - mc).abs() < 1e-12);
        }
    }

    #[test]
    fn jitter_angles_are_bounded_and_seed_dependent() {
        let mut distinct = std::collections::HashSet::new();
        for pose in 0..100u32 {
            let a = jitter_angle(3, pose);
            assert!(a.abs() <= MAX_HUE_JITTER_RAD);
            distinct.insert(a.to_bits());
            assert_eq!(a, jitter_angle(3, pose), "angle must be deterministic");
        }
        assert!(distinct.len() > 90, "angles should vary across views");
        assert_ne!(jitter_angle(3, 0), jitter_angle(4, 0));
    }
}
