//! Latent-state encoder, dynamic-transition encoder and next-transition head.
//!
//! Both encoders share one architecture (no shared weights): a per-timestep
//! input projection, a stack of residual blocks of two causal dilated
//! convolutions with dilation doubling per block, and a per-timestep output
//! projection. Encoders see the full series; windows are taken afterwards.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PlantsError, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PLANTS01";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub depth: usize,
    pub kernel: usize,
    pub latent_dim: usize,
    pub transition_dim: usize,
    pub head_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(in_channels: usize) -> Self {
        ModelConfig {
            in_channels,
            hidden: 32,
            depth: 4,
            kernel: 3,
            latent_dim: 16,
            transition_dim: 16,
            head_hidden: 32,
            seed: 0,
        }
    }

    /// `D = D_l + D_t`.
    pub fn repr_dim(&self) -> usize {
        self.latent_dim + self.transition_dim
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.hidden,
            self.kernel,
            self.latent_dim,
            self.transition_dim,
            self.head_hidden,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(PlantsError::invalid(format!("model dimensions must be positive: {self:?}")));
        }
        if self.depth > 24 {
            return Err(PlantsError::invalid("encoder depth above 24 overflows the dilation"));
        }
        Ok(())
    }

    fn encoder_shapes(&self, out_dim: usize) -> Vec<Vec<usize>> {
        let (c, h, k) = (self.in_channels, self.hidden, self.kernel);
        let mut s = vec![vec![c, h], vec![h]];
        for _ in 0..self.depth {
            s.extend([vec![k, h, h], vec![h], vec![k, h, h], vec![h]]);
        }
        s.extend([vec![h, out_dim], vec![out_dim]]);
        s
    }

    fn head_shapes(&self) -> Vec<Vec<usize>> {
        vec![
            vec![self.repr_dim(), self.head_hidden],
            vec![self.head_hidden],
            vec![self.head_hidden, self.transition_dim],
            vec![self.transition_dim],
        ]
    }

    /// Parameter shapes in checkpoint order: latent encoder, transition
    /// encoder, prediction head.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut s = self.encoder_shapes(self.latent_dim);
        s.extend(self.encoder_shapes(self.transition_dim));
        s.extend(self.head_shapes());
        s
    }

    fn encoder_len(&self) -> usize {
        4 + 4 * self.depth
    }
}

/// Per-channel standardization statistics carried with a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
    pub normalization: Option<Normalization>,
}

/// Graph handles for every model parameter.
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: Vec<Var>,
    depth: usize,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn encoder_len(&self) -> usize {
        4 + 4 * self.depth
    }

    fn latent(&self) -> &[Var] {
        &self.vars[..self.encoder_len()]
    }

    fn transition(&self) -> &[Var] {
        &self.vars[self.encoder_len()..2 * self.encoder_len()]
    }

    fn head(&self) -> &[Var] {
        &self.vars[2 * self.encoder_len()..]
    }
}

impl Model {
    /// Uniform fan-in initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes = config.param_shapes();
        let enc = config.encoder_len();
        let mut params = Vec::with_capacity(shapes.len());
        for (idx, shape) in shapes.iter().enumerate() {
            // Biases share the fan-in of the weight before them.
            let fan_in = if shape.len() == 1 {
                fan_in_of(&shapes[idx - 1])
            } else {
                fan_in_of(shape)
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::new(shape.clone(), data)?);
        }
        debug_assert_eq!(params.len(), 2 * enc + 4);
        Ok(Model {
            config,
            params,
            normalization: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn enc_len(&self) -> usize {
        self.config.encoder_len()
    }

    /// Output projection (weight, bias) indices of the latent encoder.
    pub fn latent_output_params(&self) -> (usize, usize) {
        (self.enc_len() - 2, self.enc_len() - 1)
    }

    /// Output projection (weight, bias) indices of the transition encoder.
    pub fn transition_output_params(&self) -> (usize, usize) {
        (2 * self.enc_len() - 2, 2 * self.enc_len() - 1)
    }

    /// Second head layer (weight, bias) indices.
    pub fn head_output_params(&self) -> (usize, usize) {
        (self.params.len() - 2, self.params.len() - 1)
    }

    /// Registers parameters on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        BoundModel {
            vars,
            depth: self.config.depth,
        }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.config.in_channels {
            return Err(PlantsError::shape(
                "encode",
                s,
                &[0, 0, self.config.in_channels],
            ));
        }
        Ok(())
    }

    /// `(B, L, C) -> (B, L, D_l)`.
    pub fn latent_graph(&self, g: &mut Graph, bound: &BoundModel, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        encoder_forward(g, bound.latent(), x, self.config.depth)
    }

    /// `(B, L, C) -> (B, L, D_t)`.
    pub fn transition_graph(&self, g: &mut Graph, bound: &BoundModel, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        encoder_forward(g, bound.transition(), x, self.config.depth)
    }

    /// Prediction head `G`: `(R, D_l + D_t) -> (R, D_t)`.
    pub fn head_graph(&self, g: &mut Graph, bound: &BoundModel, uv: Var) -> Result<Var> {
        let s = g.shape(uv);
        if s.len() != 2 || s[1] != self.config.repr_dim() {
            return Err(PlantsError::shape("predict_next", s, &[0, self.config.repr_dim()]));
        }
        let p = bound.head();
        let h = g.matmul(uv, p[0])?;
        let h = g.add_bias(h, p[1])?;
        let h = g.relu(h);
        let o = g.matmul(h, p[2])?;
        g.add_bias(o, p[3])
    }

    fn encode_with(
        &self,
        series: &[f64],
        len: usize,
        f: impl Fn(&Model, &mut Graph, &BoundModel, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let c = self.config.in_channels;
        if series.len() != len * c {
            return Err(PlantsError::shape("encode", &[len, c], &[series.len()]));
        }
        if series.iter().any(|v| !v.is_finite()) {
            return Err(PlantsError::NonFinite("encoder input".into()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![1, len, c], series.to_vec())?);
        let out = f(self, &mut g, &bound, x)?;
        let d = *g.shape(out).last().unwrap();
        g.value(out).clone().reshaped(&[len, d])
    }

    /// `L × C -> L × D_l`.
    pub fn encode_latent(&self, series: &[f64], len: usize) -> Result<Tensor> {
        self.encode_with(series, len, |m, g, b, x| m.latent_graph(g, b, x))
    }

    /// `L × C -> L × D_t`.
    pub fn encode_transition(&self, series: &[f64], len: usize) -> Result<Tensor> {
        self.encode_with(series, len, |m, g, b, x| m.transition_graph(g, b, x))
    }

    /// `L × C -> L × (D_l + D_t)`, latent columns first.
    pub fn encode_full(&self, series: &[f64], len: usize) -> Result<Tensor> {
        self.encode_with(series, len, |m, g, b, x| {
            let u = m.latent_graph(g, b, x)?;
            let v = m.transition_graph(g, b, x)?;
            g.concat(&[u, v], 2)
        })
    }

    /// `G(concat(u, v))` for single vectors.
    pub fn predict_next(&self, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.config.latent_dim || v.len() != self.config.transition_dim {
            return Err(PlantsError::shape(
                "predict_next",
                &[u.len(), v.len()],
                &[self.config.latent_dim, self.config.transition_dim],
            ));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let mut uv = u.to_vec();
        uv.extend_from_slice(v);
        let x = g.constant(Tensor::new(vec![1, uv.len()], uv)?);
        let out = self.head_graph(&mut g, &bound, x)?;
        Ok(g.value(out).data().to_vec())
    }

    // ---- checkpoint ----

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            c.in_channels,
            c.hidden,
            c.depth,
            c.kernel,
            c.latent_dim,
            c.transition_dim,
            c.head_hidden,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.ndim() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.normalization {
            None => out.push(0),
            Some(n) => {
                out.push(1);
                out.extend_from_slice(&(n.mean.len() as u32).to_le_bytes());
                for v in n.mean.iter().chain(&n.std) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(PlantsError::Checkpoint("bad magic (expected PLANTS01)".into()));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            in_channels: dims[0],
            hidden: dims[1],
            depth: dims[2],
            kernel: dims[3],
            latent_dim: dims[4],
            transition_dim: dims[5],
            head_hidden: dims[6],
            seed: r.u64()?,
        };
        config.validate()?;
        let shapes = config.param_shapes();
        let count = r.u32()? as usize;
        if count != shapes.len() {
            return Err(PlantsError::Checkpoint(format!(
                "expected {} parameter arrays, found {count}",
                shapes.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for (i, expected) in shapes.iter().enumerate() {
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
            if &shape != expected {
                return Err(PlantsError::Checkpoint(format!(
                    "parameter {i}: shape {shape:?} does not match config ({expected:?})"
                )));
            }
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
            params.push(Tensor::new(shape, data)?);
        }
        let normalization = match r.take(1)?[0] {
            0 => None,
            1 => {
                let c = r.u32()? as usize;
                let mean = (0..c).map(|_| r.f64()).collect::<Result<_>>()?;
                let std = (0..c).map(|_| r.f64()).collect::<Result<_>>()?;
                Some(Normalization { mean, std })
            }
            _ => return Err(PlantsError::Checkpoint("bad normalization flag".into())),
        };
        if r.pos != bytes.len() {
            return Err(PlantsError::Checkpoint("trailing bytes".into()));
        }
        Ok(Model {
            config,
            params,
            normalization,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn fan_in_of(shape: &[usize]) -> usize {
    match shape.len() {
        // (in, out) affine weight
        2 => shape[0],
        // (kernel, in, out) convolution weight
        3 => shape[0] * shape[1],
        _ => shape.iter().product(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(PlantsError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Per-timestep affine map on a `(B, L, in)` tensor.
fn timestep_linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let out = g.shape(w)[1];
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = g.matmul(flat, w)?;
    let y = g.add_bias(y, b)?;
    g.reshape(y, &[s[0], s[1], out])
}

fn encoder_forward(g: &mut Graph, p: &[Var], x: Var, depth: usize) -> Result<Var> {
    let mut h = timestep_linear(g, x, p[0], p[1])?;
    for blk in 0..depth {
        let dilation = 1usize << blk;
        let base = 2 + 4 * blk;
        let r = g.relu(h);
        let r = g.conv1d(r, p[base], p[base + 1], dilation)?;
        let r = g.relu(r);
        let r = g.conv1d(r, p[base + 2], p[base + 3], dilation)?;
        h = g.add(h, r)?;
    }
    let n = p.len();
    timestep_linear(g, h, p[n - 2], p[n - 1])
}

/// Mean of the first `valid` rows of a row-major `w × D` window.
pub fn pool_window(window: &[f64], dim: usize, valid: usize) -> Result<Vec<f64>> {
    if dim == 0 || window.len() % dim != 0 {
        return Err(PlantsError::shape("pool_window", &[window.len()], &[dim]));
    }
    let w = window.len() / dim;
    if valid == 0 || valid > w {
        return Err(PlantsError::invalid(format!(
            "pool_window: {valid} valid rows in a window of {w}"
        )));
    }
    let mut out = vec![0.0; dim];
    for row in window[..valid * dim].chunks(dim) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / valid as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

/// Temporal max-pool of an `L × D` representation.
pub fn instance_vector(repr: &Tensor) -> Result<Vec<f64>> {
    if repr.ndim() != 2 || repr.shape()[0] == 0 {
        return Err(PlantsError::shape("instance_vector", repr.shape(), &[]));
    }
    let d = repr.shape()[1];
    let mut out = vec![f64::NEG_INFINITY; d];
    for row in repr.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = o.max(*v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            hidden: 6,
            depth: 3,
            kernel: 3,
            latent_dim: 4,
            transition_dim: 3,
            head_hidden: 5,
            seed: 9,
        }
    }

    fn series(len: usize, c: usize, phase: f64) -> Vec<f64> {
        (0..len * c).map(|i| (i as f64 * 0.31 + phase).sin()).collect()
    }

    #[test]
    fn output_shapes() {
        let m = Model::new(small()).unwrap();
        for len in [1, 7, 30] {
            let x = series(len, 2, 0.0);
            assert_eq!(m.encode_latent(&x, len).unwrap().shape(), &[len, 4]);
            assert_eq!(m.encode_transition(&x, len).unwrap().shape(), &[len, 3]);
            assert_eq!(m.encode_full(&x, len).unwrap().shape(), &[len, 7]);
        }
    }

    #[test]
    fn zero_output_projection_gives_zero_embedding() {
        let mut m = Model::new(small()).unwrap();
        let (w, b) = m.latent_output_params();
        for i in [w, b] {
            m.params_mut()[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = m.encode_latent(&vec![0.0; 20], 10).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_probe_both_encoders() {
        for depth in 1..=4 {
            let cfg = ModelConfig { depth, ..small() };
            let m = Model::new(cfg).unwrap();
            let len = 40;
            let x = series(len, 2, 0.3);
            for t in [0, 5, 17, 39] {
                let mut y = x.clone();
                y[t * 2] += 3.0;
                y[t * 2 + 1] -= 1.5;
                for (a, b) in [
                    (m.encode_latent(&x, len).unwrap(), m.encode_latent(&y, len).unwrap()),
                    (m.encode_transition(&x, len).unwrap(), m.encode_transition(&y, len).unwrap()),
                ] {
                    let d = a.shape()[1];
                    assert_eq!(&a.data()[..t * d], &b.data()[..t * d], "depth {depth} t {t}");
                    assert_ne!(&a.data()[t * d..(t + 1) * d], &b.data()[t * d..(t + 1) * d]);
                }
            }
        }
    }

    #[test]
    fn encoders_do_not_share_weights() {
        let cfg = ModelConfig {
            latent_dim: 4,
            transition_dim: 4,
            ..small()
        };
        let m = Model::new(cfg).unwrap();
        let x = series(12, 2, 1.0);
        assert_ne!(m.encode_latent(&x, 12).unwrap(), m.encode_transition(&x, 12).unwrap());
    }

    #[test]
    fn full_is_column_concat() {
        let m = Model::new(small()).unwrap();
        let x = series(15, 2, 0.7);
        let u = m.encode_latent(&x, 15).unwrap();
        let v = m.encode_transition(&x, 15).unwrap();
        let z = m.encode_full(&x, 15).unwrap();
        for t in 0..15 {
            assert_eq!(&z.data()[t * 7..t * 7 + 4], &u.data()[t * 4..t * 4 + 4]);
            assert_eq!(&z.data()[t * 7 + 4..t * 7 + 7], &v.data()[t * 3..t * 3 + 3]);
        }
        assert_eq!(instance_vector(&z).unwrap().len(), 7);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let m = Model::new(small()).unwrap();
        assert!(m.encode_latent(&series(10, 3, 0.0), 10).is_err());
        assert!(m.encode_latent(&[f64::NAN; 20], 10).is_err());
    }

    #[test]
    fn pool_window_cases() {
        let w = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        assert_eq!(pool_window(&w, 2, 3).unwrap(), vec![1.0, 2.0]);
        assert_eq!(pool_window(&[4.0, 5.0], 2, 1).unwrap(), vec![4.0, 5.0]);
        let padded = [1.0, 3.0, 0.0, 0.0];
        assert_eq!(pool_window(&padded, 1, 2).unwrap(), pool_window(&padded[..2], 1, 2).unwrap());
        assert!(pool_window(&padded, 1, 0).is_err());
    }

    #[test]
    fn pool_window_matches_scalar_loop() {
        let w: Vec<f64> = (0..5 * 3).map(|i| (i as f64 * 1.7).cos()).collect();
        let got = pool_window(&w, 3, 5).unwrap();
        for d in 0..3 {
            let mut s = 0.0;
            for t in 0..5 {
                s += w[t * 3 + d];
            }
            assert!((got[d] - s / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_next_shape_and_zero_head() {
        let mut m = Model::new(small()).unwrap();
        let out = m.predict_next(&[0.1; 4], &[0.2; 3]).unwrap();
        assert_eq!(out.len(), 3);
        assert!(m.predict_next(&[0.1; 3], &[0.2; 3]).is_err());
        let (w, b) = m.head_output_params();
        for i in [w, b] {
            m.params_mut()[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(m.predict_next(&[0.1; 4], &[0.2; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let mut m = Model::new(small()).unwrap();
        m.normalization = Some(Normalization {
            mean: vec![0.5, -1.0],
            std: vec![2.0, 1.0],
        });
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..8], b"PLANTS01");
        assert_eq!(Model::from_bytes(&bytes).unwrap(), m);

        let mut bad = bytes.clone();
        // corrupt the first parameter's leading extent
        let first_dim = 8 + 7 * 4 + 8 + 4 + 4;
        bad[first_dim] = 99;
        assert!(Model::from_bytes(&bad).is_err());
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
