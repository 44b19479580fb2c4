//! The learnable texture: Fourier feature encoding of normalized vertex
//! positions feeding a small MLP that outputs per-vertex RGB.
//!
//! Parameters are stored at 32-bit precision (the checkpoint format) but all
//! arithmetic runs in f64. The in-memory f64 values are kept exactly
//! f32-representable, so saving and reloading a model reproduces its outputs
//! bit for bit.

use nalgebra::Point3;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Default number of Fourier frequencies (encoding dimension is twice this).
pub const DEFAULT_FREQUENCY_COUNT: usize = 128;
/// Default standard deviation of the Gaussian frequency matrix.
pub const DEFAULT_SIGMA: f64 = 5.0;
/// Default hidden layer width.
pub const DEFAULT_HIDDEN_WIDTH: usize = 256;
/// Number of hidden layers in the full-size model.
pub const HIDDEN_LAYERS: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum TextureError {
    #[error("vertex {index} component {component} is {value}, outside the normalized range")]
    Unnormalized { index: usize, component: usize, value: f64 },
    #[error("feature width {got} does not match the model input width {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("gradient shape {got} does not match output shape {expected}")]
    GradientShape { expected: String, got: String },
    #[error("forward cache does not match this model: {0}")]
    StaleCache(String),
}

/// Round to the nearest f32 and widen back: the value that 32-bit storage
/// would reproduce. Parameters live on this grid so checkpoints round-trip
/// exactly; finite-difference probes should snap their steps through it too.
#[inline]
pub fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

/// Fixed random frequency matrix mapping normalized positions to a
/// high-frequency embedding the MLP can fit sharp detail against.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierEncoder {
    pub frequency_count: usize,
    pub sigma: f64,
    pub rng_seed: u64,
    /// F×3 frequency matrix, values exactly f32-representable.
    g: Array2<f64>,
}

impl FourierEncoder {
    pub fn new(frequency_count: usize, sigma: f64, rng_seed: u64) -> Self {
        assert!(frequency_count > 0, "need at least one frequency");
        assert!(sigma > 0.0, "sigma must be positive, got {sigma}");
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        let g = Array2::from_shape_fn((frequency_count, 3), |_| f32_exact(normal.sample(&mut rng)));
        FourierEncoder { frequency_count, sigma, rng_seed, g }
    }

    /// Rebuild from a stored frequency matrix (checkpoint loading).
    pub(crate) fn from_matrix(
        frequency_count: usize,
        sigma: f64,
        rng_seed: u64,
        g: Array2<f64>,
    ) -> Self {
        assert_eq!(g.dim(), (frequency_count, 3));
        FourierEncoder { frequency_count, sigma, rng_seed, g }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.g
    }

    /// Width of an encoded row: cosines then sines, one pair per frequency.
    pub fn encoding_dim(&self) -> usize {
        2 * self.frequency_count
    }

    /// Encode normalized vertex positions: row i is
    /// (cos(2π G vᵢ), sin(2π G vᵢ)). Components must lie in [−1, 1].
    pub fn encode(&self, vertices: &[Point3<f64>]) -> Result<Array2<f64>, TextureError> {
        for (index, v) in vertices.iter().enumerate() {
            for component in 0..3 {
                let value = v[component];
                if !(value.abs() <= 1.0 + 1e-6) {
                    return Err(TextureError::Unnormalized { index, component, value });
                }
            }
        }
        let f = self.frequency_count;
        let mut out = Array2::zeros((vertices.len(), 2 * f));
        for (i, v) in vertices.iter().enumerate() {
            for k in 0..f {
                let phase = std::f64::consts::TAU
                    * (self.g[(k, 0)] * v.x + self.g[(k, 1)] * v.y + self.g[(k, 2)] * v.z);
                out[(i, k)] = phase.cos();
                out[(i, f + k)] = phase.sin();
            }
        }
        Ok(out)
    }
}

/// One affine layer; values exactly f32-representable.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out × in.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Gradients with the same layout as the model's parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.b.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Activations saved by a forward pass for the matching backward pass.
pub struct ForwardCache {
    input: Array2<f64>,
    /// Pre-activation of every layer, in order.
    pre: Vec<Array2<f64>>,
}

/// Fully connected network: rectified hidden layers, hyperbolic-tangent
/// output remapped to (0,1) RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureMlp {
    layers: Vec<Layer>,
}

impl TextureMlp {
    /// Full-size model: input width `encoding_dim`, six hidden layers of
    /// `hidden_width`, three outputs.
    pub fn new(encoding_dim: usize, hidden_width: usize, rng_seed: u64) -> Self {
        let mut dims = vec![encoding_dim];
        dims.extend(std::iter::repeat_n(hidden_width, HIDDEN_LAYERS));
        dims.push(3);
        Self::with_dims(&dims, rng_seed)
    }

    /// Arbitrary layer sizes (first = input width, last = 3 for RGB).
    /// Weights start uniform in ±√(6/(fan_in+fan_out)); biases start at zero.
    pub fn with_dims(dims: &[usize], rng_seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        assert_eq!(*dims.last().unwrap(), 3, "output layer must be RGB");
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let layers = dims
            .windows(2)
            .map(|io| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    f32_exact(rng.random_range(-limit..limit))
                });
                Layer { w, b: Array1::zeros(fan_out) }
            })
            .collect();
        TextureMlp { layers }
    }

    pub(crate) fn from_layers(layers: Vec<Layer>) -> Self {
        TextureMlp { layers }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer sizes [input, hidden…, 3].
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].w.ncols()];
        d.extend(self.layers.iter().map(|l| l.w.nrows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Replace one layer's parameters (values are snapped to f32 precision).
    pub fn set_layer(&mut self, index: usize, w: Array2<f64>, b: Array1<f64>) {
        assert_eq!(w.dim(), self.layers[index].w.dim(), "weight shape mismatch");
        assert_eq!(b.len(), self.layers[index].b.len(), "bias length mismatch");
        self.layers[index].w = w.mapv(f32_exact);
        self.layers[index].b = b.mapv(f32_exact);
    }

    pub(crate) fn layers_mut(&mut self) -> &mut Vec<Layer> {
        &mut self.layers
    }

    /// Forward pass: features (N × input_dim) → RGB (N × 3) in (0,1).
    pub fn forward(
        &self,
        features: &Array2<f64>,
    ) -> Result<(Array2<f64>, ForwardCache), TextureError> {
        if features.ncols() != self.input_dim() {
            return Err(TextureError::FeatureWidth {
                expected: self.input_dim(),
                got: features.ncols(),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = features.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w.t()) + &layer.b;
            if li + 1 < self.layers.len() {
                a = z.mapv(|v| v.max(0.0));
            }
            pre.push(z);
        }
        let out = pre.last().unwrap().mapv(|z| (z.tanh() + 1.0) / 2.0);
        Ok((out, ForwardCache { input: features.clone(), pre }))
    }

    /// Reverse-mode gradients for all parameters given ∂loss/∂rgb.
    /// The rectifier's subgradient at exactly zero is taken as zero.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_rgb: &Array2<f64>,
    ) -> Result<Gradients, TextureError> {
        if cache.pre.len() != self.layers.len() || cache.input.ncols() != self.input_dim() {
            return Err(TextureError::StaleCache(format!(
                "cache has {} layers of input width {}, model has {} of width {}",
                cache.pre.len(),
                cache.input.ncols(),
                self.layers.len(),
                self.input_dim()
            )));
        }
        for (li, z) in cache.pre.iter().enumerate() {
            if z.nrows() != cache.input.nrows() || z.ncols() != self.layers[li].w.nrows() {
                return Err(TextureError::StaleCache(format!(
                    "cached layer {li} has shape {:?}",
                    z.dim()
                )));
            }
        }
        let out_shape = cache.pre.last().unwrap().dim();
        if grad_rgb.dim() != out_shape {
            return Err(TextureError::GradientShape {
                expected: format!("{out_shape:?}"),
                got: format!("{:?}", grad_rgb.dim()),
            });
        }

        let mut grad_w = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut grad_b = vec![Array1::zeros(0); self.layers.len()];
        // d rgb / d z = (1 − tanh²(z)) / 2
        let z_out = cache.pre.last().unwrap();
        let mut delta = grad_rgb * &z_out.mapv(|z| (1.0 - z.tanh().powi(2)) / 2.0);
        for li in (0..self.layers.len()).rev() {
            let a_prev = if li == 0 {
                cache.input.clone()
            } else {
                cache.pre[li - 1].mapv(|v| v.max(0.0))
            };
            grad_w[li] = delta.t().dot(&a_prev);
            grad_b[li] = delta.sum_axis(Axis(0));
            if li > 0 {
                let gate = cache.pre[li - 1].mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
                delta = delta.dot(&self.layers[li].w) * &gate;
            }
        }
        Ok(Gradients { w: grad_w, b: grad_b })
    }

    /// Convenience: forward without keeping the cache.
    pub fn predict(&self, features: &Array2<f64>) -> Result<Array2<f64>, TextureError> {
        Ok(self.forward(features)?.0)
    }
}

/// Per-vertex RGB as plain arrays, for handoff to shading and baking.
pub fn rgb_rows(colors: &Array2<f64>) -> Vec<[f64; 3]> {
    colors.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}
