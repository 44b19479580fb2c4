//! Adaptive-moment parameter updates for the texture model.
//!
//! Moments live at 32-bit storage precision like the model weights (all
//! arithmetic in f64), so a checkpointed optimizer resumes bit-identically.

use ndarray::{Array1, Array2};

use crate::texture::{f32_exact, Gradients, TextureMlp};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("gradient shapes do not match the model: {0}")]
    ShapeMismatch(String),
}

/// Step-size schedule knobs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: DEFAULT_LEARNING_RATE,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// What a call to [`AdamState::step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient contained a NaN or infinity; parameters, moments, and
    /// the step count were left untouched.
    SkippedNonFinite,
}

/// First/second moment accumulators plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub params: AdamParams,
    step: u64,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl AdamState {
    pub fn new(mlp: &TextureMlp, params: AdamParams) -> Self {
        let m_w = mlp.layers().iter().map(|l| Array2::zeros(l.w.dim())).collect();
        let v_w = mlp.layers().iter().map(|l| Array2::zeros(l.w.dim())).collect();
        let m_b = mlp.layers().iter().map(|l| Array1::zeros(l.b.len())).collect();
        let v_b = mlp.layers().iter().map(|l| Array1::zeros(l.b.len())).collect();
        AdamState { params, step: 0, m_w, v_w, m_b, v_b }
    }

    pub(crate) fn from_parts(
        params: AdamParams,
        step: u64,
        m_w: Vec<Array2<f64>>,
        v_w: Vec<Array2<f64>>,
        m_b: Vec<Array1<f64>>,
        v_b: Vec<Array1<f64>>,
    ) -> Self {
        AdamState { params, step, m_w, v_w, m_b, v_b }
    }

    pub(crate) fn moments(
        &self,
    ) -> (&[Array2<f64>], &[Array2<f64>], &[Array1<f64>], &[Array1<f64>]) {
        (&self.m_w, &self.v_w, &self.m_b, &self.v_b)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected moment update in place. A non-finite
    /// gradient skips the update entirely rather than poisoning the model.
    pub fn step(
        &mut self,
        mlp: &mut TextureMlp,
        grads: &Gradients,
    ) -> Result<StepOutcome, OptimError> {
        if grads.w.len() != self.m_w.len() || grads.b.len() != self.m_b.len() {
            return Err(OptimError::ShapeMismatch(format!(
                "{} weight / {} bias gradients for a {}-layer model",
                grads.w.len(),
                grads.b.len(),
                self.m_w.len()
            )));
        }
        for (li, (gw, gb)) in grads.w.iter().zip(&grads.b).enumerate() {
            if gw.dim() != self.m_w[li].dim() || gb.len() != self.m_b[li].len() {
                return Err(OptimError::ShapeMismatch(format!(
                    "layer {li}: gradient {:?}/{:?} vs model {:?}/{:?}",
                    gw.dim(),
                    gb.len(),
                    self.m_w[li].dim(),
                    self.m_b[li].len()
                )));
            }
        }
        if !grads.is_finite() {
            return Ok(StepOutcome::SkippedNonFinite);
        }

        self.step += 1;
        let t = self.step as i32;
        let AdamParams { learning_rate, beta1, beta2, epsilon } = self.params;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (li, layer) in mlp.layers_mut().iter_mut().enumerate() {
            update_tensor(
                layer.w.as_slice_mut().expect("contiguous"),
                grads.w[li].as_slice().expect("contiguous"),
                self.m_w[li].as_slice_mut().expect("contiguous"),
                self.v_w[li].as_slice_mut().expect("contiguous"),
                learning_rate,
                beta1,
                beta2,
                epsilon,
                bc1,
                bc2,
            );
            update_tensor(
                layer.b.as_slice_mut().expect("contiguous"),
                grads.b[li].as_slice().expect("contiguous"),
                self.m_b[li].as_slice_mut().expect("contiguous"),
                self.v_b[li].as_slice_mut().expect("contiguous"),
                learning_rate,
                beta1,
                beta2,
                epsilon,
                bc1,
                bc2,
            );
        }
        Ok(StepOutcome::Applied)
    }
}

#[allow(clippy::too_many_arguments)]
fn update_tensor(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..p.len() {
        let gi = g[i];
        m[i] = f32_exact(beta1 * m[i] + (1.0 - beta1) * gi);
        v[i] = f32_exact(beta2 * v[i] + (1.0 - beta2) * gi * gi);
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = f32_exact(p[i] - lr * m_hat / (v_hat.sqrt() + epsilon));
    }
}
