//! Soft contrastive losses weighted by input-space similarity, the
//! next-transition prediction loss, and their blends.
//!
//! Targets `P` are softmax rows of MXCorr similarities (constants on the
//! graph); predictions `Q` are softmax rows of pooled-embedding dot products.
//! Each contrastive term is the cross-entropy `−Σ_j p_j log q_j` over the
//! negatives `j ≠ i`, evaluated in the log domain.

use crate::error::{PlantsError, Result};
use crate::model::{BoundModel, Model};
use crate::similarity::SimilarityMatrix;
use crate::tensor::{Graph, Tensor, Var};

/// Probability clamp used by [`kl_identity`] before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Local versus global contrastive blend.
    pub alpha: f64,
    /// Contrastive versus next-transition blend.
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("lambda", lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PlantsError::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(LossWeights { alpha, lambda })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            lambda: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    /// Divides embedding dot products before the softmax.
    pub temperature: f64,
    /// L2-normalize pooled latent vectors before the dot products.
    pub normalize_embeddings: bool,
    /// Treat the next-window transition target as a constant.
    pub ntp_stop_gradient: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            temperature: 1.0,
            normalize_embeddings: false,
            ntp_stop_gradient: false,
        }
    }
}

/// Numerically stable softmax of a similarity row (negatives only).
pub fn soft_targets(row: &[f64]) -> Result<Vec<f64>> {
    if row.is_empty() {
        return Err(PlantsError::invalid("soft_targets: empty row"));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(PlantsError::NonFinite("similarity row".into()));
    }
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Cross-entropy decomposition `H(P, Q) = Σ p log(p/q) + H(P)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlTerms {
    pub cross_entropy: f64,
    pub kl: f64,
    pub entropy: f64,
}

/// Evaluates `H(P,Q)`, `Σ p log(p/q)` and `H(P)`. Probabilities below
/// [`PROB_CLAMP`] are raised to it inside the logarithms only, so a zero `p`
/// still contributes nothing.
pub fn kl_identity(p: &[f64], q: &[f64]) -> Result<KlTerms> {
    if p.len() != q.len() || p.is_empty() {
        return Err(PlantsError::shape("kl_identity", &[p.len()], &[q.len()]));
    }
    if p.iter().chain(q).any(|&v| !(0.0..=1.0 + 1e-9).contains(&v)) {
        return Err(PlantsError::invalid("kl_identity: entries must lie in [0, 1]"));
    }
    let ln = |v: f64| v.max(PROB_CLAMP).ln();
    let cross_entropy = -p.iter().zip(q).map(|(&a, &b)| a * ln(b)).sum::<f64>();
    let kl = p.iter().zip(q).map(|(&a, &b)| a * (ln(a) - ln(b))).sum::<f64>();
    let entropy = -p.iter().map(|&a| a * ln(a)).sum::<f64>();
    Ok(KlTerms {
        cross_entropy,
        kl,
        entropy,
    })
}

/// Row-wise target weights for an `n × n` similarity matrix, diagonal zero.
fn target_rows(sims: &SimilarityMatrix) -> Result<Vec<f64>> {
    let n = sims.size();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let p = soft_targets(&sims.row_without_diagonal(i))?;
        let mut it = p.into_iter();
        for j in (0..n).filter(|&j| j != i) {
            out[i * n + j] = it.next().unwrap();
        }
    }
    Ok(out)
}

fn offdiag_mask(groups: usize, n: usize) -> Vec<bool> {
    (0..groups * n * n).map(|k| (k / n) % n != k % n).collect()
}

/// `log Q` for a stack of embedding sets `(G, R, D)`: log-softmax of pairwise
/// dot products over `j ≠ i`. Shape `(G, R, R)`.
fn log_predictions(g: &mut Graph, emb: Var, opts: &LossOptions) -> Result<Var> {
    let s = g.shape(emb).to_vec();
    let e = if opts.normalize_embeddings {
        g.l2_normalize(emb, 1e-12)?
    } else {
        emb
    };
    let mut logits = g.batch_matmul_nt(e, e)?;
    if opts.temperature != 1.0 {
        if opts.temperature <= 0.0 {
            return Err(PlantsError::invalid("temperature must be positive"));
        }
        logits = g.scale(logits, 1.0 / opts.temperature);
    }
    g.masked_log_softmax(logits, 2, offdiag_mask(s[0], s[1]))
}

/// `−Σ W ⊙ log Q` with a constant weight tensor.
fn weighted_cross_entropy(g: &mut Graph, log_q: Var, weights: Vec<f64>) -> Result<Var> {
    let shape = g.shape(log_q).to_vec();
    let w = g.constant(Tensor::new(shape, weights)?);
    let prod = g.mul(w, log_q)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0))
}

/// Local instance-wise loss at one window: `u` is `(B, D)` pooled latent
/// vectors, `sims` the `B × B` local similarities. Returns the mean over `i`.
pub fn local_contrastive(
    g: &mut Graph,
    u: Var,
    sims: &SimilarityMatrix,
    opts: &LossOptions,
) -> Result<Var> {
    set_contrastive(g, u, sims, opts, "local_contrastive")
}

/// Global state-wise loss over the windows of one instance: `u` is `(M, D)`,
/// `sims` the `M × M` global similarities. Returns the mean over windows.
pub fn global_contrastive(
    g: &mut Graph,
    u: Var,
    sims: &SimilarityMatrix,
    opts: &LossOptions,
) -> Result<Var> {
    set_contrastive(g, u, sims, opts, "global_contrastive")
}

fn set_contrastive(
    g: &mut Graph,
    u: Var,
    sims: &SimilarityMatrix,
    opts: &LossOptions,
    op: &'static str,
) -> Result<Var> {
    let s = g.shape(u).to_vec();
    if s.len() != 2 || s[0] != sims.size() {
        return Err(PlantsError::shape(op, &s, &[sims.size(), sims.size()]));
    }
    if s[0] < 2 {
        return Err(PlantsError::invalid(format!("{op}: need at least 2 items, got {}", s[0])));
    }
    let n = s[0];
    let stacked = g.reshape(u, &[1, n, s[1]])?;
    let log_q = log_predictions(g, stacked, opts)?;
    let weights: Vec<f64> = target_rows(sims)?
        .into_iter()
        .map(|p| p / n as f64)
        .collect();
    weighted_cross_entropy(g, log_q, weights)
}

/// Per-(instance, window) blend `α·local + (1−α)·global`, averaged. Windows
/// with no global term (`None`) use the local term alone.
pub fn granularity_contrastive(alpha: f64, local: &[f64], global: &[Option<f64>]) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(PlantsError::invalid(format!("alpha = {alpha} outside [0, 1]")));
    }
    if local.len() != global.len() || local.is_empty() {
        return Err(PlantsError::shape("granularity_contrastive", &[local.len()], &[global.len()]));
    }
    let total: f64 = local
        .iter()
        .zip(global)
        .map(|(&l, g)| match g {
            Some(gv) => alpha * l + (1.0 - alpha) * gv,
            None => l,
        })
        .sum();
    Ok(total / local.len() as f64)
}

/// Mean over granularities of `λ·L_l + (1−λ)·L_t`. A granularity without an
/// NTP term contributes its contrastive loss alone.
pub fn total_loss(lambda: f64, per_granularity: &[(f64, Option<f64>)]) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PlantsError::invalid(format!("lambda = {lambda} outside [0, 1]")));
    }
    if per_granularity.is_empty() {
        return Err(PlantsError::invalid("total_loss: no granularities"));
    }
    let sum: f64 = per_granularity
        .iter()
        .map(|&(l, t)| match t {
            Some(t) => lambda * l + (1.0 - lambda) * t,
            None => l,
        })
        .sum();
    Ok(sum / per_granularity.len() as f64)
}

/// Graph-level contrastive terms for one granularity of a batch.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveTerms {
    /// `L_l^{(k)}` on the graph.
    pub blended: Var,
    /// Mean unweighted local term over all (i, m).
    pub local_mean: f64,
    /// Mean unweighted global term over the (i, m) that have one.
    pub global_mean: Option<f64>,
}

/// Batched local + global soft contrastive loss for one granularity.
///
/// * `u` — pooled latent windows `(B, M, D)`; only the first `usable` windows
///   enter the loss.
/// * `local_sims[m]` — `B × B` similarities at window `m < usable`.
/// * `global_sims[i]` — `usable × usable` similarities of instance `i`, or
///   `None` when it has fewer than two usable windows.
pub fn contrastive_terms(
    g: &mut Graph,
    u: Var,
    usable: usize,
    local_sims: &[SimilarityMatrix],
    global_sims: &[Option<&SimilarityMatrix>],
    alpha: f64,
    opts: &LossOptions,
) -> Result<ContrastiveTerms> {
    let s = g.shape(u).to_vec();
    if s.len() != 3 || usable == 0 || usable > s[1] {
        return Err(PlantsError::shape("contrastive_terms", &s, &[usable]));
    }
    let b = s[0];
    if b < 2 {
        return Err(PlantsError::invalid("local contrastive loss needs a batch of at least 2"));
    }
    if local_sims.len() != usable || global_sims.len() != b {
        return Err(PlantsError::shape(
            "contrastive_terms",
            &[local_sims.len(), global_sims.len()],
            &[usable, b],
        ));
    }
    let count = (b * usable) as f64;
    let has_global: Vec<bool> = global_sims
        .iter()
        .map(|s| s.is_some() && usable >= 2)
        .collect();
    let local_coef = |i: usize| if has_global[i] { alpha } else { 1.0 };
    let global_coef = |i: usize| if has_global[i] { 1.0 - alpha } else { 0.0 };

    let windows = g.slice(u, 1, 0, usable)?;

    // local: stack windows as groups, batch members as rows
    let by_window = g.swap_axes01(windows)?;
    let log_q_local = log_predictions(g, by_window, opts)?;
    let mut p_local = vec![0.0; usable * b * b];
    for (m, sims) in local_sims.iter().enumerate() {
        if sims.size() != b {
            return Err(PlantsError::shape("local similarity", &[sims.size()], &[b]));
        }
        p_local[m * b * b..(m + 1) * b * b].copy_from_slice(&target_rows(sims)?);
    }
    let lq = g.value(log_q_local).data();
    let local_mean = -p_local.iter().zip(lq).map(|(p, q)| p * q).sum::<f64>() / count;
    let w_local: Vec<f64> = p_local
        .iter()
        .enumerate()
        .map(|(k, p)| p * local_coef((k / b) % b) / count)
        .collect();
    let mut blended = weighted_cross_entropy(g, log_q_local, w_local)?;

    let mut global_mean = None;
    if has_global.iter().any(|&h| h) {
        let log_q_global = log_predictions(g, windows, opts)?;
        let mm = usable * usable;
        let mut p_global = vec![0.0; b * mm];
        for (i, sims) in global_sims.iter().enumerate() {
            if let (true, Some(sims)) = (has_global[i], sims) {
                if sims.size() != usable {
                    return Err(PlantsError::shape("global similarity", &[sims.size()], &[usable]));
                }
                p_global[i * mm..(i + 1) * mm].copy_from_slice(&target_rows(sims)?);
            }
        }
        let gq = g.value(log_q_global).data();
        let n_global = has_global.iter().filter(|&&h| h).count() * usable;
        global_mean =
            Some(-p_global.iter().zip(gq).map(|(p, q)| p * q).sum::<f64>() / n_global as f64);
        if alpha < 1.0 {
            let w_global: Vec<f64> = p_global
                .iter()
                .enumerate()
                .map(|(k, p)| p * global_coef(k / mm) / count)
                .collect();
            let gl = weighted_cross_entropy(g, log_q_global, w_global)?;
            blended = g.add(blended, gl)?;
        }
    }
    Ok(ContrastiveTerms {
        blended,
        local_mean,
        global_mean,
    })
}

/// Next-transition prediction loss for one granularity: the mean over
/// instances and consecutive usable windows of
/// `‖G(concat(u_m, v_m)) − v_{m+1}‖²`. `None` when fewer than two windows
/// are usable.
pub fn ntp_loss(
    g: &mut Graph,
    model: &Model,
    bound: &BoundModel,
    u: Var,
    v: Var,
    usable: usize,
    stop_gradient: bool,
) -> Result<Option<Var>> {
    let (su, sv) = (g.shape(u).to_vec(), g.shape(v).to_vec());
    if su.len() != 3 || sv.len() != 3 || su[..2] != sv[..2] || usable > su[1] {
        return Err(PlantsError::shape("ntp_loss", &su, &sv));
    }
    if usable < 2 {
        log::warn!("next-transition term skipped: only {usable} usable window(s)");
        return Ok(None);
    }
    let (b, dt) = (su[0], sv[2]);
    let pairs = b * (usable - 1);
    let uv = g.concat(&[u, v], 2)?;
    let cur = g.slice(uv, 1, 0, usable - 1)?;
    let cur = g.reshape(cur, &[pairs, su[2] + dt])?;
    let pred = model.head_graph(g, bound, cur)?;
    let next = g.slice(v, 1, 1, usable - 1)?;
    let mut next = g.reshape(next, &[pairs, dt])?;
    if stop_gradient {
        next = g.detach(next);
    }
    let se = g.sq_err(pred, next)?;
    Ok(Some(g.scale(se, 1.0 / pairs as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::SimilarityKind;

    fn sims(n: usize, vals: &[f64]) -> SimilarityMatrix {
        SimilarityMatrix::new(SimilarityKind::Local, n, vals.to_vec()).unwrap()
    }

    /// Scalar-loop reference for one soft contrastive term set.
    fn oracle(u: &[Vec<f64>], s: &SimilarityMatrix) -> f64 {
        let n = u.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..n {
            let zs: f64 = (0..n).filter(|&j| j != i).map(|j| s.get(i, j).exp()).sum();
            let zq: f64 = (0..n).filter(|&j| j != i).map(|j| dot(&u[i], &u[j]).exp()).sum();
            for j in (0..n).filter(|&j| j != i) {
                let p = s.get(i, j).exp() / zs;
                let q = dot(&u[i], &u[j]).exp() / zq;
                total -= p * q.ln();
            }
        }
        total / n as f64
    }

    fn eval_local(u: &[Vec<f64>], s: &SimilarityMatrix) -> f64 {
        let mut g = Graph::new();
        let d = u[0].len();
        let x = g.constant(Tensor::new(vec![u.len(), d], u.concat()).unwrap());
        let l = local_contrastive(&mut g, x, s, &LossOptions::default()).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn soft_target_examples() {
        let p = soft_targets(&[0.2, 0.2, 0.2]).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = soft_targets(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert!(soft_targets(&[]).is_err());
    }

    #[test]
    fn two_items_give_exactly_zero() {
        let s = sims(2, &[0.0, 0.4, -0.2, 0.0]);
        let v = eval_local(&[vec![1.0, 2.0], vec![-0.5, 0.3]], &s);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn three_item_example_matches_oracle() {
        let u = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let s = sims(3, &[0.0, 0.3, 0.9, 0.3, 0.0, -0.4, 0.8, 0.1, 0.0]);
        assert!((eval_local(&u, &s) - oracle(&u, &s)).abs() < 1e-9);
    }

    #[test]
    fn loss_bounded_below_by_target_entropy() {
        let u = vec![vec![0.2, -1.0], vec![0.4, 0.3], vec![-0.7, 0.9]];
        let s = sims(3, &[0.0, 0.3, 0.9, 0.3, 0.0, -0.4, 0.8, 0.1, 0.0]);
        let mut h = 0.0;
        for i in 0..3 {
            let p = soft_targets(&s.row_without_diagonal(i)).unwrap();
            h -= p.iter().map(|v| v * v.ln()).sum::<f64>();
        }
        assert!(eval_local(&u, &s) >= h / 3.0 - 1e-12);
    }

    #[test]
    fn row_shift_invariance() {
        let u = vec![vec![0.2, -1.0], vec![0.4, 0.3], vec![-0.7, 0.9], vec![0.1, 0.1]];
        let base = [0.0, 0.3, 0.9, 0.1, 0.3, 0.0, -0.4, 0.2, 0.8, 0.1, 0.0, 0.5, 0.2, 0.2, 0.2, 0.0];
        let mut shifted = base;
        for j in 0..4 {
            shifted[4 + j] += 0.75;
        }
        let a = eval_local(&u, &sims(4, &base));
        let b = eval_local(&u, &sims(4, &shifted));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn blends() {
        let local = [1.0, 3.0];
        let global = [Some(5.0), Some(7.0)];
        assert_eq!(granularity_contrastive(1.0, &local, &global).unwrap(), 2.0);
        assert_eq!(granularity_contrastive(0.0, &local, &global).unwrap(), 6.0);
        assert_eq!(
            granularity_contrastive(0.5, &[2.0, 2.0], &[Some(2.0), Some(2.0)]).unwrap(),
            2.0
        );
        assert_eq!(granularity_contrastive(0.0, &[4.0], &[None]).unwrap(), 4.0);
        assert!(granularity_contrastive(1.5, &local, &global).is_err());

        assert_eq!(total_loss(0.5, &[(2.0, Some(4.0))]).unwrap(), 3.0);
        assert_eq!(total_loss(1.0, &[(2.0, Some(4.0)), (4.0, Some(1.0))]).unwrap(), 3.0);
        assert_eq!(total_loss(0.3, &[(2.0, None)]).unwrap(), 2.0);
        assert!(total_loss(0.5, &[]).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.5, 0.3];
        let t = kl_identity(&p, &p).unwrap();
        assert!(t.kl.abs() < 1e-15);
        assert!((t.cross_entropy - t.entropy).abs() < 1e-15);
        let t = kl_identity(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4]).unwrap();
        assert!((t.cross_entropy - 4f64.ln()).abs() < 1e-15);
        assert!((t.cross_entropy - (t.kl + t.entropy)).abs() < 1e-12);
    }
}
