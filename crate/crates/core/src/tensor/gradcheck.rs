use super::{Graph, Tensor, Var};
use crate::error::{PlantsError, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences with step `eps`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic = g.grad(xv);

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(PlantsError::shape("grad_check", t.shape(), &[]));
    }
    Ok(t.data()[0])
}
