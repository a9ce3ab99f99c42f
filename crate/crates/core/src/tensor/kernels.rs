// Raw slice kernels behind the graph ops. Parallel loops split work into
// fixed-size chunks and reduce partial sums in chunk order, so results do not
// depend on the thread count.

use rayon::prelude::*;

const ROW_CHUNK: usize = 256;

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sum_partials(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(n * ROW_CHUNK)
        .enumerate()
        .for_each(|(chunk, rows)| {
            let row0 = chunk * ROW_CHUNK;
            for (r, orow) in rows.chunks_mut(n).enumerate() {
                let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
                for (p, &av) in arow.iter().enumerate() {
                    if av != 0.0 {
                        axpy(av, &b[p * n..(p + 1) * n], orow);
                    }
                }
            }
        });
    out
}

/// Gradient w.r.t. the left operand: `g (m×n) · bᵀ`.
pub(crate) fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    if k == 0 {
        return out;
    }
    out.par_chunks_mut(k * ROW_CHUNK)
        .enumerate()
        .for_each(|(chunk, rows)| {
            let row0 = chunk * ROW_CHUNK;
            for (r, orow) in rows.chunks_mut(k).enumerate() {
                let grow = &g[(row0 + r) * n..(row0 + r + 1) * n];
                for (p, o) in orow.iter_mut().enumerate() {
                    *o = dot(grow, &b[p * n..(p + 1) * n]);
                }
            }
        });
    out
}

/// Gradient w.r.t. the right operand: `aᵀ · g (m×n)`.
pub(crate) fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let chunks = m.div_ceil(ROW_CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut part = vec![0.0; k * n];
            let end = ((chunk + 1) * ROW_CHUNK).min(m);
            for i in chunk * ROW_CHUNK..end {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av != 0.0 {
                        axpy(av, grow, &mut part[p * n..(p + 1) * n]);
                    }
                }
            }
            part
        })
        .collect();
    sum_partials(partials, k * n)
}

/// Geometry of a causal dilated 1-D convolution over `(batch, len, channels)`
/// inputs with `(kernel, c_in, c_out)` weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub len: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Input time index read by tap `j` for output time `t`, if inside the series.
    #[inline]
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        let back = (self.kernel - 1 - j) * self.dilation;
        t.checked_sub(back)
    }
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], geom: ConvGeom) -> Vec<f64> {
    let ConvGeom {
        len,
        c_in,
        c_out,
        kernel,
        ..
    } = geom;
    let mut out = vec![0.0; geom.batch * len * c_out];
    out.par_chunks_mut(len * c_out)
        .enumerate()
        .for_each(|(b, ob)| {
            let xb = &x[b * len * c_in..(b + 1) * len * c_in];
            for t in 0..len {
                let orow = &mut ob[t * c_out..(t + 1) * c_out];
                orow.copy_from_slice(bias);
                for j in 0..kernel {
                    let Some(s) = geom.source(t, j) else { continue };
                    let xrow = &xb[s * c_in..(s + 1) * c_in];
                    let wj = &w[j * c_in * c_out..(j + 1) * c_in * c_out];
                    for (c, &xv) in xrow.iter().enumerate() {
                        axpy(xv, &wj[c * c_out..(c + 1) * c_out], orow);
                    }
                }
            }
        });
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    geom: ConvGeom,
    need_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ConvGeom {
        batch,
        len,
        c_in,
        c_out,
        kernel,
        ..
    } = geom;
    let wlen = kernel * c_in * c_out;
    let mut dx = vec![0.0; if need_input { batch * len * c_in } else { 0 }];

    if need_input {
        dx.par_chunks_mut(len * c_in)
            .enumerate()
            .for_each(|(b, dxb)| {
                let gb = &g[b * len * c_out..(b + 1) * len * c_out];
                for t in 0..len {
                    let grow = &gb[t * c_out..(t + 1) * c_out];
                    for j in 0..kernel {
                        let Some(s) = geom.source(t, j) else { continue };
                        let wj = &w[j * c_in * c_out..(j + 1) * c_in * c_out];
                        let dxrow = &mut dxb[s * c_in..(s + 1) * c_in];
                        for (c, d) in dxrow.iter_mut().enumerate() {
                            *d += dot(grow, &wj[c * c_out..(c + 1) * c_out]);
                        }
                    }
                }
            });
    }

    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut dw = vec![0.0; wlen];
            let mut db = vec![0.0; c_out];
            let xb = &x[b * len * c_in..(b + 1) * len * c_in];
            let gb = &g[b * len * c_out..(b + 1) * len * c_out];
            for t in 0..len {
                let grow = &gb[t * c_out..(t + 1) * c_out];
                for (d, &gv) in db.iter_mut().zip(grow) {
                    *d += gv;
                }
                for j in 0..kernel {
                    let Some(s) = geom.source(t, j) else { continue };
                    let xrow = &xb[s * c_in..(s + 1) * c_in];
                    let dwj = &mut dw[j * c_in * c_out..(j + 1) * c_in * c_out];
                    for (c, &xv) in xrow.iter().enumerate() {
                        if xv != 0.0 {
                            axpy(xv, grow, &mut dwj[c * c_out..(c + 1) * c_out]);
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = vec![0.0; wlen];
    let mut db = vec![0.0; c_out];
    for (pw, pb) in partials {
        for (o, v) in dw.iter_mut().zip(pw) {
            *o += v;
        }
        for (o, v) in db.iter_mut().zip(pb) {
            *o += v;
        }
    }
    (dx, dw, db)
}
