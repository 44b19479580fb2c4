//! sRGB / linear RGB / CIELAB conversions with analytic Jacobians.
//!
//! The training loss is evaluated in a normalized LAB space, so the
//! conversion has to be differentiable: `lab_jacobian` gives the exact
//! derivative of the matrix + cube-root chain and is what carries pixel
//! gradients back into linear RGB.

/// Linear RGB -> XYZ, sRGB primaries, D65 white, 2 degree observer.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// D65 reference white.
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const DELTA: f64 = 6.0 / 29.0;
const DELTA3: f64 = DELTA * DELTA * DELTA;
const LINEAR_SLOPE: f64 = 1.0 / (3.0 * DELTA * DELTA);
const LINEAR_OFFSET: f64 = 4.0 / 29.0;

/// A CIELAB color. `l` in [0,100], `a` and `b` nominally in [-128,127].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabPixel {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabPixel {
    /// Normalized form used by the loss: (L/100, (a+128)/255, (b+128)/255).
    pub fn normalized(&self) -> [f64; 3] {
        [self.l / 100.0, (self.a + 128.0) / 255.0, (self.b + 128.0) / 255.0]
    }

    pub fn from_normalized(n: [f64; 3]) -> Self {
        LabPixel { l: n[0] * 100.0, a: n[1] * 255.0 - 128.0, b: n[2] * 255.0 - 128.0 }
    }
}

/// Scale factors mapping a raw LAB differential to the normalized form.
pub const LAB_NORM_SCALE: [f64; 3] = [1.0 / 100.0, 1.0 / 255.0, 1.0 / 255.0];

fn lab_f(t: f64) -> f64 {
    if t > DELTA3 {
        t.cbrt()
    } else {
        t * LINEAR_SLOPE + LINEAR_OFFSET
    }
}

/// Derivative of `lab_f`. At the seam the linear-segment slope is used;
/// the two branches agree there so the derivative is continuous.
fn lab_f_prime(t: f64) -> f64 {
    if t > DELTA3 {
        let c = t.cbrt();
        1.0 / (3.0 * c * c)
    } else {
        LINEAR_SLOPE
    }
}

/// Convert a linear RGB triple (components clamped to [0,1]) to CIELAB.
pub fn rgb_to_lab(rgb: [f64; 3]) -> LabPixel {
    let r = rgb[0].clamp(0.0, 1.0);
    let g = rgb[1].clamp(0.0, 1.0);
    let b = rgb[2].clamp(0.0, 1.0);
    let m = &RGB_TO_XYZ;
    let x = m[0][0] * r + m[0][1] * g + m[0][2] * b;
    let y = m[1][0] * r + m[1][1] * g + m[1][2] * b;
    let z = m[2][0] * r + m[2][1] * g + m[2][2] * b;
    let fx = lab_f(x / WHITE[0]);
    let fy = lab_f(y / WHITE[1]);
    let fz = lab_f(z / WHITE[2]);
    LabPixel { l: 116.0 * fy - 16.0, a: 500.0 * (fx - fy), b: 200.0 * (fy - fz) }
}

/// Jacobian d(L,a,b)/d(r,g,b) at a linear RGB point, rows L/a/b.
pub fn lab_jacobian(rgb: [f64; 3]) -> [[f64; 3]; 3] {
    let r = rgb[0].clamp(0.0, 1.0);
    let g = rgb[1].clamp(0.0, 1.0);
    let b = rgb[2].clamp(0.0, 1.0);
    let m = &RGB_TO_XYZ;
    let x = m[0][0] * r + m[0][1] * g + m[0][2] * b;
    let y = m[1][0] * r + m[1][1] * g + m[1][2] * b;
    let z = m[2][0] * r + m[2][1] * g + m[2][2] * b;
    // du_i/d(rgb_j) where u_i = f(xyz_i / white_i)
    let mut du = [[0.0f64; 3]; 3];
    let t = [x / WHITE[0], y / WHITE[1], z / WHITE[2]];
    for i in 0..3 {
        let fp = lab_f_prime(t[i]) / WHITE[i];
        for j in 0..3 {
            du[i][j] = fp * m[i][j];
        }
    }
    let mut jac = [[0.0f64; 3]; 3];
    for j in 0..3 {
        jac[0][j] = 116.0 * du[1][j];
        jac[1][j] = 500.0 * (du[0][j] - du[1][j]);
        jac[2][j] = 200.0 * (du[1][j] - du[2][j]);
    }
    jac
}

/// Jacobian of the *normalized* LAB triple w.r.t. linear RGB.
pub fn lab_norm_jacobian(rgb: [f64; 3]) -> [[f64; 3]; 3] {
    let mut jac = lab_jacobian(rgb);
    for (row, s) in jac.iter_mut().zip(LAB_NORM_SCALE) {
        for v in row.iter_mut() {
            *v *= s;
        }
    }
    jac
}

/// Linear RGB in [0,1] and normalized LAB in one step.
pub fn rgb_to_lab_normalized(rgb: [f64; 3]) -> [f64; 3] {
    rgb_to_lab(rgb).normalized()
}

/// Standard sRGB transfer curve (linear toe below 0.0031308).
pub fn srgb_encode(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if x <= 0.0031308 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    }
}

/// Inverse of `srgb_encode`.
pub fn srgb_decode(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    if s <= 0.04045 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

/// 8-bit sRGB value to linear, exact on all 256 codes.
pub fn srgb_u8_to_linear(v: u8) -> f64 {
    srgb_decode(v as f64 / 255.0)
}

/// Linear value to the nearest 8-bit sRGB code (round half away from zero).
pub fn linear_to_srgb_u8(x: f64) -> u8 {
    (srgb_encode(x) * 255.0).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn white_and_black_anchor_points() {
        let w = rgb_to_lab([1.0, 1.0, 1.0]);
        assert!((w.l - 100.0).abs() < 0.01, "L={}", w.l);
        assert!(w.a.abs() < 0.01 && w.b.abs() < 0.01);
        let k = rgb_to_lab([0.0, 0.0, 0.0]);
        assert!(k.l.abs() < 0.01 && k.a.abs() < 0.01 && k.b.abs() < 0.01);
    }

    // Reference values frozen from an independent implementation
    // (scikit-image rgb2lab on the sRGB-encoded inputs).
    #[test]
    fn matches_reference_implementation() {
        let g = rgb_to_lab([0.5, 0.5, 0.5]);
        assert!((g.l - 76.0693).abs() < 0.01, "L={}", g.l);
        assert!(g.a.abs() < 0.01 && g.b.abs() < 0.01);

        let c = rgb_to_lab([0.8, 0.2, 0.1]);
        assert!((c.l - 63.3747).abs() < 0.01);
        assert!((c.a - 38.5606).abs() < 0.01);
        assert!((c.b - 37.2897).abs() < 0.01);

        let d = rgb_to_lab([0.2, 0.6, 0.3]);
        assert!((d.l - 75.6550).abs() < 0.01);
        assert!((d.a - (-36.2849)).abs() < 0.01);
        assert!((d.b - 19.6718).abs() < 0.01);
    }

    #[test]
    fn continuous_across_piecewise_threshold() {
        // Feed y/Yn exactly delta^3 from both sides through lab_f.
        let eps = 1e-13;
        let left = lab_f(DELTA3 - eps);
        let right = lab_f(DELTA3 + eps);
        assert!((left - right).abs() < 1e-9);
        // Derivative is continuous there too.
        assert!((lab_f_prime(DELTA3 - eps) - lab_f_prime(DELTA3 + eps)).abs() < 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..100 {
            let p: [f64; 3] = [
                rng.random_range(0.01..0.99),
                rng.random_range(0.01..0.99),
                rng.random_range(0.01..0.99),
            ];
            let jac = lab_jacobian(p);
            for j in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[j] += h;
                lo[j] -= h;
                let lhi = rgb_to_lab(hi);
                let llo = rgb_to_lab(lo);
                let fd = [
                    (lhi.l - llo.l) / (2.0 * h),
                    (lhi.a - llo.a) / (2.0 * h),
                    (lhi.b - llo.b) / (2.0 * h),
                ];
                for i in 0..3 {
                    let denom = fd[i].abs().max(1e-6);
                    assert!(
                        (jac[i][j] - fd[i]).abs() / denom < 1e-4,
                        "jac[{i}][{j}]={} fd={} at {:?}",
                        jac[i][j],
                        fd[i],
                        p
                    );
                }
            }
        }
    }

    #[test]
    fn gray_axis_stays_neutral() {
        // The standard matrix constants carry 7 significant digits; their Y row
        // sums to 1.0000001, so gray is neutral only to that precision. Value
        // error stays below 1e-4 and Jacobian row sums below 1e-3.
        for g in [0.1, 0.3, 0.5, 0.8] {
            let lab = rgb_to_lab([g, g, g]);
            assert!(lab.a.abs() < 1e-4, "a = {} at gray {g}", lab.a);
            assert!(lab.b.abs() < 1e-4, "b = {} at gray {g}", lab.b);
            let jac = lab_jacobian([g, g, g]);
            let a_dot: f64 = jac[1].iter().sum();
            let b_dot: f64 = jac[2].iter().sum();
            assert!(a_dot.abs() < 1e-3, "a row sum {a_dot}");
            assert!(b_dot.abs() < 1e-3, "b row sum {b_dot}");
        }
    }

    #[test]
    fn jacobian_in_linear_segment_is_constant_composition() {
        // Points with all XYZ/white below delta^3 sit in the linear piece,
        // so the Jacobian is exactly the constant-slope composition.
        let p = [1e-4, 1e-4, 1e-4];
        let jac = lab_jacobian(p);
        let m = &RGB_TO_XYZ;
        for j in 0..3 {
            let du: Vec<f64> =
                (0..3).map(|i| LINEAR_SLOPE / WHITE[i] * m[i][j]).collect();
            assert!((jac[0][j] - 116.0 * du[1]).abs() < 1e-9);
            assert!((jac[1][j] - 500.0 * (du[0] - du[1])).abs() < 1e-9);
            assert!((jac[2][j] - 200.0 * (du[1] - du[2])).abs() < 1e-9);
        }
    }

    #[test]
    fn srgb_curve_knee_and_endpoints() {
        assert_eq!(srgb_encode(0.0), 0.0);
        assert!((srgb_encode(1.0) - 1.0).abs() < 1e-12);
        assert!((srgb_encode(0.0031308) - 0.04045).abs() < 1e-6);
        assert!((srgb_decode(0.04045) - 0.0031308).abs() < 1e-6);
    }

    #[test]
    fn srgb_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(0.0..1.0);
            assert!((srgb_decode(srgb_encode(x)) - x).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_lab_stays_in_unit_cube() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..2000 {
            let rgb = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let n = rgb_to_lab(rgb).normalized();
            for c in n {
                assert!((-1e-12..=1.0 + 1e-12).contains(&c), "{n:?} from {rgb:?}");
            }
        }
    }
}
