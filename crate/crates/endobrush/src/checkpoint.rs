//! Binary model checkpoints.
//!
//! Layout: magic `MBRUSH01`, encoder scalars (frequency count, sigma, rng
//! seed), mesh provenance (vertex count and the position normalizer, so a
//! checkpoint can refuse to bake onto the wrong mesh), layer dimensions,
//! then every tensor as little-endian 32-bit floats in declaration order:
//! the frequency matrix, each layer's weights and bias, and optionally the
//! optimizer moments. Loading reproduces forward outputs bit for bit.

use std::path::Path;

use nalgebra::Point3;
use ndarray::{Array1, Array2};

use crate::mesh::{BoundingBoxNormalizer, TriMesh};
use crate::optim::{AdamParams, AdamState};
use crate::texture::{FourierEncoder, Layer, TextureMlp};

pub const MAGIC: &[u8; 8] = b"MBRUSH01";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: magic bytes are {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, {remaining} left")]
    Truncated { offset: usize, needed: usize, remaining: usize },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Which mesh a checkpoint was trained against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointProvenance {
    pub vertex_count: u32,
    pub center: [f64; 3],
    pub half_extent: f64,
}

impl CheckpointProvenance {
    pub fn for_mesh(mesh: &TriMesh) -> Self {
        let norm = BoundingBoxNormalizer::fit(mesh);
        CheckpointProvenance {
            vertex_count: mesh.vertex_count() as u32,
            center: [norm.center.x, norm.center.y, norm.center.z],
            half_extent: norm.half_extent,
        }
    }

    pub fn normalizer(&self) -> BoundingBoxNormalizer {
        BoundingBoxNormalizer {
            center: Point3::new(self.center[0], self.center[1], self.center[2]),
            half_extent: self.half_extent,
        }
    }

    /// Does this checkpoint match a mesh (same vertex count and bounding
    /// geometry within 1e-9 mm)?
    pub fn matches(&self, mesh: &TriMesh) -> bool {
        let other = Self::for_mesh(mesh);
        self.vertex_count == other.vertex_count
            && self
                .center
                .iter()
                .zip(&other.center)
                .all(|(a, b)| (a - b).abs() < 1e-9)
            && (self.half_extent - other.half_extent).abs() < 1e-9
    }
}

/// Everything a checkpoint holds.
pub struct Checkpoint {
    pub encoder: FourierEncoder,
    pub mlp: TextureMlp,
    pub optimizer: Option<AdamState>,
    pub provenance: CheckpointProvenance,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

pub fn save_checkpoint(
    path: &Path,
    encoder: &FourierEncoder,
    mlp: &TextureMlp,
    optimizer: Option<&AdamState>,
    provenance: &CheckpointProvenance,
) -> Result<(), CheckpointError> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(encoder.frequency_count as u32);
    w.f64(encoder.sigma);
    w.u64(encoder.rng_seed);
    w.u32(provenance.vertex_count);
    for c in provenance.center {
        w.f64(c);
    }
    w.f64(provenance.half_extent);
    let dims = mlp.dims();
    w.u32(dims.len() as u32);
    for d in &dims {
        w.u32(*d as u32);
    }
    w.tensor(encoder.matrix().iter().copied());
    for layer in mlp.layers() {
        w.tensor(layer.w.iter().copied());
        w.tensor(layer.b.iter().copied());
    }
    match optimizer {
        None => w.u8(0),
        Some(state) => {
            w.u8(1);
            w.u64(state.step_count());
            let p = state.params;
            w.f64(p.learning_rate);
            w.f64(p.beta1);
            w.f64(p.beta2);
            w.f64(p.epsilon);
            let (m_w, v_w, m_b, v_b) = state.moments();
            for li in 0..m_w.len() {
                w.tensor(m_w[li].iter().copied());
                w.tensor(v_w[li].iter().copied());
                w.tensor(m_b[li].iter().copied());
                w.tensor(v_b[li].iter().copied());
            }
        }
    }
    std::fs::write(path, &w.buf)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                remaining: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// Read `n` f32 values, widened to f64.
    fn tensor(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    let magic = r.take(8).map_err(|_| CheckpointError::BadMagic { found: bytes.clone() })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() });
    }
    let frequency_count = r.u32()? as usize;
    let sigma = r.f64()?;
    let rng_seed = r.u64()?;
    if frequency_count == 0 || frequency_count > 1 << 20 {
        return Err(CheckpointError::Format(format!(
            "frequency count {frequency_count} out of range"
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(CheckpointError::Format(format!("sigma {sigma} must be positive")));
    }
    let vertex_count = r.u32()?;
    let center = [r.f64()?, r.f64()?, r.f64()?];
    let half_extent = r.f64()?;
    let provenance = CheckpointProvenance { vertex_count, center, half_extent };

    let dim_count = r.u32()? as usize;
    if !(2..=64).contains(&dim_count) {
        return Err(CheckpointError::Format(format!("{dim_count} layer dims out of range")));
    }
    let mut dims = Vec::with_capacity(dim_count);
    for _ in 0..dim_count {
        let d = r.u32()? as usize;
        if d == 0 || d > 1 << 20 {
            return Err(CheckpointError::Format(format!("layer dim {d} out of range")));
        }
        dims.push(d);
    }
    if dims[0] != 2 * frequency_count {
        return Err(CheckpointError::Format(format!(
            "input width {} does not match 2x{frequency_count} frequencies",
            dims[0]
        )));
    }
    if *dims.last().unwrap() != 3 {
        return Err(CheckpointError::Format(format!(
            "output width {} must be 3",
            dims.last().unwrap()
        )));
    }

    let g_vals = r.tensor(frequency_count * 3)?;
    let g = Array2::from_shape_vec((frequency_count, 3), g_vals).expect("sized above");
    let encoder = FourierEncoder::from_matrix(frequency_count, sigma, rng_seed, g);

    let mut layers = Vec::with_capacity(dim_count - 1);
    for io in dims.windows(2) {
        let (fan_in, fan_out) = (io[0], io[1]);
        let w_vals = r.tensor(fan_out * fan_in)?;
        let b_vals = r.tensor(fan_out)?;
        layers.push(Layer {
            w: Array2::from_shape_vec((fan_out, fan_in), w_vals).expect("sized above"),
            b: Array1::from_vec(b_vals),
        });
    }
    let mlp = TextureMlp::from_layers(layers);

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let params = AdamParams {
                learning_rate: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                epsilon: r.f64()?,
            };
            let mut m_w = Vec::new();
            let mut v_w = Vec::new();
            let mut m_b = Vec::new();
            let mut v_b = Vec::new();
            for io in dims.windows(2) {
                let (fan_in, fan_out) = (io[0], io[1]);
                let mw = r.tensor(fan_out * fan_in)?;
                let vw = r.tensor(fan_out * fan_in)?;
                let mb = r.tensor(fan_out)?;
                let vb = r.tensor(fan_out)?;
                m_w.push(Array2::from_shape_vec((fan_out, fan_in), mw).expect("sized above"));
                v_w.push(Array2::from_shape_vec((fan_out, fan_in), vw).expect("sized above"));
                m_b.push(Array1::from_vec(mb));
                v_b.push(Array1::from_vec(vb));
            }
            Some(AdamState::from_parts(params, step, m_w, v_w, m_b, v_b))
        }
        other => {
            return Err(CheckpointError::Format(format!("optimizer flag {other} must be 0 or 1")))
        }
    };
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes after the checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { encoder, mlp, optimizer, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use crate::texture::Gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (FourierEncoder, TextureMlp, AdamState, CheckpointProvenance) {
        let encoder = FourierEncoder::new(8, 5.0, 42);
        let mut mlp = TextureMlp::with_dims(&[16, 12, 12, 3], 7);
        let mut state = AdamState::new(&mlp, AdamParams::default());
        // a few steps so moments are nonzero
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let grads = Gradients {
                w: mlp
                    .layers()
                    .iter()
                    .map(|l| Array2::from_shape_fn(l.w.dim(), |_| rng.random_range(-0.1..0.1)))
                    .collect(),
                b: mlp
                    .layers()
                    .iter()
                    .map(|l| Array1::from_shape_fn(l.b.len(), |_| rng.random_range(-0.1..0.1)))
                    .collect(),
            };
            state.step(&mut mlp, &grads).unwrap();
        }
        let mesh = fixture::cylinder(5.0, 50.0, 12, 5);
        let provenance = CheckpointProvenance::for_mesh(&mesh);
        (encoder, mlp, state, provenance)
    }

    #[test]
    fn round_trip_reproduces_forward_outputs_bitwise() {
        let (encoder, mlp, state, provenance) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbrush");
        save_checkpoint(&path, &encoder, &mlp, Some(&state), &provenance).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.encoder, encoder);
        assert_eq!(back.mlp, mlp);
        assert_eq!(back.optimizer.as_ref(), Some(&state));
        assert_eq!(back.provenance, provenance);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<nalgebra::Point3<f64>> = (0..100)
            .map(|_| {
                nalgebra::Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let a = mlp.predict(&encoder.encode(&pts).unwrap()).unwrap();
        let b = back.mlp.predict(&back.encoder.encode(&pts).unwrap()).unwrap();
        assert_eq!(a, b, "reloaded model must predict bit-identically");
    }

    #[test]
    fn checkpoint_without_optimizer_loads_none() {
        let (encoder, mlp, _, provenance) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbrush");
        save_checkpoint(&path, &encoder, &mlp, None, &provenance).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.optimizer.is_none());
        assert_eq!(back.mlp, mlp);
    }

    #[test]
    fn corrupted_magic_is_a_distinct_error() {
        let (encoder, mlp, _, provenance) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbrush");
        save_checkpoint(&path, &encoder, &mlp, None, &provenance).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn truncation_mid_tensor_is_a_distinct_error() {
        let (encoder, mlp, state, provenance) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbrush");
        save_checkpoint(&path, &encoder, &mlp, Some(&state), &provenance).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let (encoder, mlp, _, provenance) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbrush");
        save_checkpoint(&path, &encoder, &mlp, None, &provenance).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn provenance_distinguishes_meshes() {
        let a = fixture::cylinder(5.0, 50.0, 12, 5);
        let b = fixture::cylinder(5.0, 60.0, 12, 5);
        let p = CheckpointProvenance::for_mesh(&a);
        assert!(p.matches(&a));
        assert!(!p.matches(&b));
    }

    #[test]
    fn resumed_optimizer_continues_bit_identically() {
        let (encoder, mut mlp, mut state, provenance) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbrush");
        save_checkpoint(&path, &encoder, &mlp, Some(&state), &provenance).unwrap();
        let mut back = load_checkpoint(&path).unwrap();
        // take the same further step on both copies
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let grads = Gradients {
            w: mlp
                .layers()
                .iter()
                .map(|l| Array2::from_shape_fn(l.w.dim(), |_| rng.random_range(-0.1..0.1)))
                .collect(),
            b: mlp
                .layers()
                .iter()
                .map(|l| Array1::from_shape_fn(l.b.len(), |_| rng.random_range(-0.1..0.1)))
                .collect(),
        };
        state.step(&mut mlp, &grads).unwrap();
        let bstate = back.optimizer.as_mut().unwrap();
        bstate.step(&mut back.mlp, &grads).unwrap();
        assert_eq!(back.mlp, mlp);
        assert_eq!(back.optimizer.unwrap(), state);
    }
}
