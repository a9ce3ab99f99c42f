use super::kernels::{self, ConvGeom};
use super::{split_axis, Tensor};
use crate::error::{PlantsError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    /// Leaf created by the caller (parameter or input).
    Leaf,
    /// Result of an op whose operands carry no gradient.
    Const,
    Binary(BinKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize, mask: Option<Vec<bool>> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    SwapAxes01(Var),
    SqErr(Var, Var),
    MatMul(Var, Var),
    BatchMatMulNt(Var, Var),
    AddBias(Var, Var),
    Conv1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    WindowMean { x: Var, window: usize },
    L2Normalize { x: Var, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Forward ops append nodes in topological order;
/// [`Graph::backward`] walks them once in reverse.
///
/// Leaf gradients persist across `backward` calls and accumulate until
/// [`Graph::zero_grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn bin_shape_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || a.is_scalar() || b.is_scalar()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Const
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `x` cut off from the tape (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Accumulated gradient of a leaf; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match &self.leaf_grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !bin_shape_ok(ta, tb) {
            return Err(PlantsError::shape(name, ta.shape(), tb.shape()));
        }
        let n = ta.numel().max(tb.numel());
        let shape = if ta.numel() >= tb.numel() && !(ta.is_scalar() && !tb.is_scalar()) {
            ta.shape().to_vec()
        } else {
            tb.shape().to_vec()
        };
        let (da, db) = (ta.data(), tb.data());
        let (sa, sb) = (da.len() == 1 && n > 1, db.len() == 1 && n > 1);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = da[if sa { 0 } else { i }];
            let y = db[if sb { 0 } else { i }];
            out.push(match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => {
                    if y == 0.0 {
                        return Err(PlantsError::Domain {
                            op: "div",
                            detail: format!("zero divisor at flat index {i}"),
                        });
                    }
                    x / y
                }
            });
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v + c).collect();
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::AddScalar(x), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(i) = self.value(x).data().iter().position(|&v| v <= 0.0) {
            return Err(PlantsError::Domain {
                op: "log",
                detail: format!("non-positive input at flat index {i}"),
            });
        }
        Ok(self.map(x, f64::ln, Op::Log(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    // ---- softmax family ----

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(PlantsError::Invalid(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (d[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[idx(k)] /= s;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.log_softmax_impl(x, axis, None)
    }

    /// Log-softmax over the unmasked entries of each slice along `axis`.
    /// Masked entries (mask `false`) evaluate to 0 and receive no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, axis: usize, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(PlantsError::shape(
                "masked_log_softmax",
                self.shape(x),
                &[mask.len()],
            ));
        }
        self.log_softmax_impl(x, axis, Some(mask))
    }

    fn log_softmax_impl(&mut self, x: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let keep = |k: usize| mask.as_ref().map_or(true, |m| m[k]);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n)
                    .filter(|&k| keep(idx(k)))
                    .map(|k| d[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    continue;
                }
                let s: f64 = (0..n)
                    .filter(|&k| keep(idx(k)))
                    .map(|k| (d[idx(k)] - m).exp())
                    .sum();
                let lse = m + s.ln();
                for k in 0..n {
                    if keep(idx(k)) {
                        out[idx(k)] = d[idx(k)] - lse;
                    }
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x, axis, mask }, rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * n + k) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| PlantsError::invalid("mean_axis: axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    /// `Σ (a − b)²` as a scalar.
    pub fn sq_err(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(PlantsError::shape("sq_err", ta.shape(), tb.shape()));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::SqErr(a, b), rg))
    }

    // ---- structural ----

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| PlantsError::invalid("concat: no inputs"))?;
        self.check_axis(*first, axis, "concat")?;
        let base = self.shape(*first).to_vec();
        for &v in &xs[1..] {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(PlantsError::shape("concat", &base, s));
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = xs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        if start + len > n {
            return Err(PlantsError::Invalid(format!(
                "slice: range {start}..{} exceeds extent {n} on axis {axis}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Swaps the first two axes: `(a, b, ...) -> (b, a, ...)`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() < 2 {
            return Err(PlantsError::shape("swap_axes01", t.shape(), &[]));
        }
        let (a, b) = (t.shape()[0], t.shape()[1]);
        let inner: usize = t.shape()[2..].iter().product();
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * inner;
                let dst = (j * a + i) * inner;
                out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.swap(0, 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SwapAxes01(x), rg))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(PlantsError::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched `a · bᵀ`: `(G, R, D) × (G, S, D) -> (G, R, S)`.
    pub fn batch_matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.ndim() == 3
            && tb.ndim() == 3
            && ta.shape()[0] == tb.shape()[0]
            && ta.shape()[2] == tb.shape()[2];
        if !ok {
            return Err(PlantsError::shape("batch_matmul_nt", ta.shape(), tb.shape()));
        }
        let (g, r, d) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let s = tb.shape()[1];
        let mut out = vec![0.0; g * r * s];
        for gi in 0..g {
            for i in 0..r {
                let arow = &ta.data()[(gi * r + i) * d..(gi * r + i + 1) * d];
                for j in 0..s {
                    let brow = &tb.data()[(gi * s + j) * d..(gi * s + j + 1) * d];
                    out[(gi * r + i) * s + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![g, r, s], out)?, Op::BatchMatMulNt(a, b), rg))
    }

    /// Adds a length-C bias to every row of an `(..., C)` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = *tx.shape().last().unwrap_or(&0);
        if tb.ndim() != 1 || tb.shape()[0] != c {
            return Err(PlantsError::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    /// Causal dilated 1-D convolution. `x: (B, L, C_in)`, `w: (K, C_in, C_out)`,
    /// `b: (C_out)`; output `(B, L, C_out)`. The input is padded on the left
    /// only, so output `t` depends on inputs at times `≤ t`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.ndim() != 3 || tw.ndim() != 3 || tx.shape()[2] != tw.shape()[1] {
            return Err(PlantsError::shape("conv1d", tx.shape(), tw.shape()));
        }
        if tb.ndim() != 1 || tb.shape()[0] != tw.shape()[2] {
            return Err(PlantsError::shape("conv1d", tw.shape(), tb.shape()));
        }
        if dilation == 0 || tw.shape()[0] == 0 {
            return Err(PlantsError::invalid("conv1d: kernel and dilation must be ≥ 1"));
        }
        let geom = ConvGeom {
            batch: tx.shape()[0],
            len: tx.shape()[1],
            c_in: tx.shape()[2],
            c_out: tw.shape()[2],
            kernel: tw.shape()[0],
            dilation,
        };
        let out = kernels::conv1d_forward(tx.data(), tw.data(), tb.data(), geom);
        let t = Tensor::new(vec![geom.batch, geom.len, geom.c_out], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv1d { x, w, b, geom }, rg))
    }

    /// Mean over consecutive non-overlapping windows of the time axis:
    /// `(B, L, D) -> (B, ⌈L/w⌉, D)`. The trailing window averages only the
    /// positions that exist in the series (zero padding is excluded).
    pub fn window_mean(&mut self, x: Var, window: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 3 || window == 0 {
            return Err(PlantsError::shape("window_mean", t.shape(), &[window]));
        }
        let (b, l, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let m = l.div_ceil(window);
        let mut out = vec![0.0; b * m * d];
        for bi in 0..b {
            for wi in 0..m {
                let (s, e) = (wi * window, ((wi + 1) * window).min(l));
                let orow = &mut out[(bi * m + wi) * d..(bi * m + wi + 1) * d];
                for ti in s..e {
                    let row = &t.data()[(bi * l + ti) * d..(bi * l + ti + 1) * d];
                    for (o, v) in orow.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let inv = 1.0 / (e - s) as f64;
                orow.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![b, m, d], out)?,
            Op::WindowMean { x, window },
            rg,
        ))
    }

    /// Scales each last-axis row to unit L2 norm (norm floored at `eps`).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let c = *t
            .shape()
            .last()
            .ok_or_else(|| PlantsError::invalid("l2_normalize: scalar input"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, eps }, rg))
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`; adds into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(PlantsError::invalid("backward: empty graph"));
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(PlantsError::shape("backward", lt.shape(), &[]));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate_into(&mut self.leaf_grads[idx], &g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut send = |v: Var, d: Vec<f64>| {
            if nodes[v.0].requires_grad {
                accumulate_into(&mut grads[v.0], &d);
            }
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                let n = g.len();
                let ai = |i: usize| da[if da.len() == 1 { 0 } else { i }];
                let bi = |i: usize| db[if db.len() == 1 { 0 } else { i }];
                if wants(*a) {
                    let ga: Vec<f64> = (0..n)
                        .map(|i| match kind {
                            BinKind::Add | BinKind::Sub => g[i],
                            BinKind::Mul => g[i] * bi(i),
                            BinKind::Div => g[i] / bi(i),
                        })
                        .collect();
                    send(*a, reduce_to(ga, da.len()));
                }
                if wants(*b) {
                    let gb: Vec<f64> = (0..n)
                        .map(|i| match kind {
                            BinKind::Add => g[i],
                            BinKind::Sub => -g[i],
                            BinKind::Mul => g[i] * ai(i),
                            BinKind::Div => -g[i] * ai(i) / (bi(i) * bi(i)),
                        })
                        .collect();
                    send(*b, reduce_to(gb, db.len()));
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => send(*x, g.to_vec()),
            Op::Exp(x) => send(*x, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(x) => {
                let xd = self.value(*x).data();
                send(*x, g.iter().zip(xd).map(|(g, x)| g / x).collect())
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                send(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let s: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - s);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::LogSoftmax { x, axis, mask } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let keep = |k: usize| mask.as_ref().map_or(true, |m| m[k]);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let s: f64 = (0..n).filter(|&k| keep(idx(k))).map(|k| g[idx(k)]).sum();
                        for k in 0..n {
                            if keep(idx(k)) {
                                dx[idx(k)] = g[idx(k)] - y[idx(k)].exp() * s;
                            }
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / n.max(1) as f64; n])
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[(o * n + k) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                send(*x, dx);
            }
            Op::SqErr(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let diff: Vec<f64> = da.iter().zip(db).map(|(x, y)| 2.0 * g[0] * (x - y)).collect();
                if wants(*b) {
                    send(*b, diff.iter().map(|v| -v).collect());
                }
                send(*a, diff);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if wants(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        send(v, dv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::SwapAxes01(x) => {
                let s = self.shape(*x);
                let (a, b) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut dx = vec![0.0; g.len()];
                for i in 0..a {
                    for j in 0..b {
                        let src = (j * a + i) * inner;
                        let dst = (i * b + j) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                send(*x, dx);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    send(*a, kernels::matmul_grad_lhs(g, tb.data(), m, k, n));
                }
                if wants(*b) {
                    send(*b, kernels::matmul_grad_rhs(ta.data(), g, m, k, n));
                }
            }
            Op::BatchMatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (gn, r, d) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let s = tb.shape()[1];
                let (ad, bd) = (ta.data(), tb.data());
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for gi in 0..gn {
                    for i in 0..r {
                        for j in 0..s {
                            let gv = g[(gi * r + i) * s + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let ao = (gi * r + i) * d;
                            let bo = (gi * s + j) * d;
                            for p in 0..d {
                                da[ao + p] += gv * bd[bo + p];
                                db[bo + p] += gv * ad[ao + p];
                            }
                        }
                    }
                }
                // `a` and `b` may be the same node; `send` accumulates.
                send(*a, da);
                send(*b, db);
            }
            Op::AddBias(x, b) => {
                let c = self.shape(*b)[0];
                if wants(*b) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*b, db);
                }
                send(*x, g.to_vec());
            }
            Op::Conv1d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv1d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    *geom,
                    wants(*x),
                );
                if wants(*x) {
                    send(*x, dx);
                }
                send(*w, dw);
                send(*b, db);
            }
            Op::WindowMean { x, window } => {
                let s = self.shape(*x);
                let (bn, l, d) = (s[0], s[1], s[2]);
                let m = l.div_ceil(*window);
                let mut dx = vec![0.0; bn * l * d];
                for bi in 0..bn {
                    for wi in 0..m {
                        let (st, e) = (wi * window, ((wi + 1) * window).min(l));
                        let inv = 1.0 / (e - st) as f64;
                        let grow = &g[(bi * m + wi) * d..(bi * m + wi + 1) * d];
                        for ti in st..e {
                            let drow = &mut dx[(bi * l + ti) * d..(bi * l + ti + 1) * d];
                            for (o, gv) in drow.iter_mut().zip(grow) {
                                *o = gv * inv;
                            }
                        }
                    }
                }
                send(*x, dx);
            }
            Op::L2Normalize { x, eps } => {
                let xd = self.value(*x).data();
                let c = *self.shape(*x).last().unwrap_or(&1);
                let mut dx = vec![0.0; xd.len()];
                for ((xr, yr), (gr, dr)) in xd
                    .chunks(c)
                    .zip(y.chunks(c))
                    .zip(g.chunks(c).zip(dx.chunks_mut(c)))
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n < *eps {
                        for (d, gv) in dr.iter_mut().zip(gr) {
                            *d = gv / eps;
                        }
                    } else {
                        let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = (gv - yv * yg) / n;
                        }
                    }
                }
                send(*x, dx);
            }
        }
        Ok(())
    }
}

fn accumulate_into(slot: &mut Option<Vec<f64>>, d: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, v)| *a += v),
        None => *slot = Some(d.to_vec()),
    }
}

/// Collapses a broadcast gradient back onto a scalar operand.
fn reduce_to(g: Vec<f64>, len: usize) -> Vec<f64> {
    if len == 1 && g.len() > 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}
