//! Downstream probes on frozen representations.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::data::TimeSeriesDataset;
use crate::error::{PlantsError, Result};
use crate::model::{pool_window, Model};
use crate::training::apply_normalization;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    /// Multinomial logistic regression.
    Linear,
    /// 5-nearest-neighbour vote under cosine distance.
    Knn,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProbeTask {
    Classification(ProbeKind),
    Forecast,
}

/// Named metrics from one probe run, with the matching baseline values.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub metrics: Vec<(String, f64)>,
    pub baselines: Vec<(String, f64)>,
    pub seed: u64,
}

impl ProbeReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    pub fn baseline(&self, name: &str) -> Option<f64> {
        self.baselines.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let task = match self.task {
            ProbeTask::Classification(ProbeKind::Linear) => "linear",
            ProbeTask::Classification(ProbeKind::Knn) => "knn",
            ProbeTask::Forecast => "forecast",
        };
        let mut s = String::from("task,metric,value,baseline,seed\n");
        for (name, v) in &self.metrics {
            let b = self.baseline(name).map_or_else(String::new, |b| format!("{b:.9}"));
            let _ = writeln!(s, "{task},{name},{v:.9},{b},{}", self.seed);
        }
        s
    }
}

// ---------------------------------------------------------------------------
// classification

const KNN_K: usize = 5;
const LR_STEPS: usize = 500;
const LR_RATE: f64 = 0.5;
const LR_L2: f64 = 1e-4;

fn check_rows(x: &[Vec<f64>], y: &[u32], what: &str) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(PlantsError::invalid(format!("{what}: {} rows, {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(PlantsError::invalid(format!("{what}: ragged feature rows")));
    }
    Ok(d)
}

/// Accuracy of a probe fit on `(train_x, train_y)` and scored on the test split.
pub fn classify_probe(
    train_x: &[Vec<f64>],
    train_y: &[u32],
    test_x: &[Vec<f64>],
    test_y: &[u32],
    kind: ProbeKind,
    seed: u64,
) -> Result<ProbeReport> {
    let d = check_rows(train_x, train_y, "probe train")?;
    if check_rows(test_x, test_y, "probe test")? != d {
        return Err(PlantsError::invalid("probe: train/test feature widths differ"));
    }
    let mut classes: Vec<u32> = train_y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(PlantsError::invalid("probe: training labels contain a single class"));
    }
    let pred = match kind {
        ProbeKind::Linear => logistic_predict(train_x, train_y, &classes, test_x),
        ProbeKind::Knn => knn_predict(train_x, train_y, test_x),
    };
    let hits = pred.iter().zip(test_y).filter(|(p, y)| p == y).count();
    let acc = hits as f64 / test_y.len() as f64;
    let majority_class = classes
        .iter()
        .copied()
        .max_by_key(|c| (train_y.iter().filter(|&&y| y == *c).count(), std::cmp::Reverse(*c)))
        .unwrap();
    let base = test_y.iter().filter(|&&y| y == majority_class).count() as f64 / test_y.len() as f64;
    Ok(ProbeReport {
        task: ProbeTask::Classification(kind),
        metrics: vec![("accuracy".into(), acc)],
        baselines: vec![("accuracy".into(), base)],
        seed,
    })
}

fn feature_scaler(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for r in x {
        for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd = sd.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

fn logistic_predict(train_x: &[Vec<f64>], train_y: &[u32], classes: &[u32], test_x: &[Vec<f64>]) -> Vec<u32> {
    let (mean, sd) = feature_scaler(train_x);
    let scale = |r: &Vec<f64>| -> Vec<f64> {
        let mut v: Vec<f64> = r.iter().zip(&mean).zip(&sd).map(|((x, m), s)| (x - m) / s).collect();
        v.push(1.0);
        v
    };
    let xs: Vec<Vec<f64>> = train_x.iter().map(scale).collect();
    let ys: Vec<usize> = train_y.iter().map(|y| classes.binary_search(y).unwrap()).collect();
    let (n, d1, k) = (xs.len(), xs[0].len(), classes.len());
    let mut w = vec![0.0; k * d1];
    let mut grad = vec![0.0; k * d1];
    let mut logits = vec![0.0; k];
    for _ in 0..LR_STEPS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, &y) in xs.iter().zip(&ys) {
            softmax_into(&w, x, &mut logits);
            for (c, p) in logits.iter().enumerate() {
                let delta = p - if c == y { 1.0 } else { 0.0 };
                for (g, xv) in grad[c * d1..(c + 1) * d1].iter_mut().zip(x) {
                    *g += delta * xv;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= LR_RATE * (gi / n as f64 + LR_L2 * *wi);
        }
    }
    test_x
        .iter()
        .map(|r| {
            softmax_into(&w, &scale(r), &mut logits);
            classes[argmax(&logits)]
        })
        .collect()
}

fn softmax_into(w: &[f64], x: &[f64], out: &mut [f64]) {
    let d1 = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        *o = w[c * d1..(c + 1) * d1].iter().zip(x).map(|(a, b)| a * b).sum();
    }
    let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

/// Majority vote of the `KNN_K` nearest training rows; ties go to the class
/// with the smaller summed distance, then the smaller label.
fn knn_predict(train_x: &[Vec<f64>], train_y: &[u32], test_x: &[Vec<f64>]) -> Vec<u32> {
    test_x
        .iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train_x.iter().enumerate().map(|(i, r)| (cosine_distance(q, r), i)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes: Vec<(u32, usize, f64)> = Vec::new();
            for &(dist, i) in d.iter().take(KNN_K) {
                match votes.iter_mut().find(|v| v.0 == train_y[i]) {
                    Some(v) => {
                        v.1 += 1;
                        v.2 += dist;
                    }
                    None => votes.push((train_y[i], 1, dist)),
                }
            }
            votes.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
            votes[0].0
        })
        .collect()
}

// ---------------------------------------------------------------------------
// pooled window representations

/// Encodes every instance (after the model's own standardization), pools
/// non-overlapping windows of `window` steps and labels each window with its
/// majority state. Windows with more than half padding are dropped.
pub fn pooled_windows(model: &Model, dataset: &TimeSeriesDataset, window: usize) -> Result<(Vec<Vec<f64>>, Vec<u32>)> {
    if window == 0 || window > dataset.len() {
        return Err(PlantsError::invalid(format!("probe window {window} for length {}", dataset.len())));
    }
    let data = match &model.normalization {
        Some(norm) => apply_normalization(dataset, norm),
        None => dataset.clone(),
    };
    let len = data.len();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..data.n() {
        let states = dataset
            .timestep_labels(i)
            .ok_or_else(|| PlantsError::invalid("probe needs per-timestep labels"))?;
        let repr = model.encode_full(data.instance(i), len)?;
        let d = repr.shape()[1];
        let mut start = 0;
        while start < len {
            let valid = window.min(len - start);
            if 2 * valid < window {
                break;
            }
            feats.push(pool_window(&repr.data()[start * d..(start + valid) * d], d, valid)?);
            labels.push(majority(&states[start..start + valid]));
            start += window;
        }
    }
    Ok((feats, labels))
}

fn majority(states: &[u32]) -> u32 {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for &s in states {
        match counts.iter_mut().find(|c| c.0 == s) {
            Some(c) => c.1 += 1,
            None => counts.push((s, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    counts[0].0
}

// ---------------------------------------------------------------------------
// forecasting

/// One series and its per-timestep representation.
#[derive(Clone, Copy, Debug)]
pub struct ForecastSeries<'a> {
    /// `len × dim`.
    pub repr: &'a [f64],
    pub dim: usize,
    /// `len × channels`.
    pub values: &'a [f64],
    pub channels: usize,
    pub len: usize,
}

pub const DEFAULT_HORIZONS: [usize; 3] = [8, 16, 32];
pub const DEFAULT_RIDGE: f64 = 1e-2;
const TRAIN_FRACTION: f64 = 0.8;

/// Ridge regression from `z_t` to the next `H` values, compared with the same
/// regression on the raw last `baseline_window` values. Pairs are split
/// chronologically inside each series: the first 80% fit, the rest score.
pub fn forecast_probe(
    series: &[ForecastSeries],
    horizons: &[usize],
    baseline_window: usize,
    ridge: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if series.is_empty() || horizons.is_empty() {
        return Err(PlantsError::invalid("forecast probe: nothing to evaluate"));
    }
    if baseline_window == 0 || !(ridge >= 0.0) {
        return Err(PlantsError::invalid("forecast probe: bad baseline window or ridge"));
    }
    for s in series {
        if s.values.len() != s.len * s.channels || s.repr.len() != s.len * s.dim {
            return Err(PlantsError::shape("forecast_probe", &[s.values.len(), s.repr.len()], &[s.len, s.channels, s.dim]));
        }
    }
    let mut metrics = Vec::new();
    let mut baselines = Vec::new();
    for &h in horizons {
        if h == 0 {
            return Err(PlantsError::invalid("forecast horizon must be at least 1"));
        }
        let rep = fit_and_score(series, h, baseline_window, ridge, |s, t| s.repr[t * s.dim..(t + 1) * s.dim].to_vec())?;
        let raw = fit_and_score(series, h, baseline_window, ridge, |s, t| {
            s.values[(t + 1 - baseline_window) * s.channels..(t + 1) * s.channels].to_vec()
        })?;
        metrics.push((format!("mse_h{h}"), rep.0));
        metrics.push((format!("mae_h{h}"), rep.1));
        baselines.push((format!("mse_h{h}"), raw.0));
        baselines.push((format!("mae_h{h}"), raw.1));
    }
    Ok(ProbeReport {
        task: ProbeTask::Forecast,
        metrics,
        baselines,
        seed,
    })
}

fn fit_and_score<F>(series: &[ForecastSeries], h: usize, w: usize, ridge: f64, feat: F) -> Result<(f64, f64)>
where
    F: Fn(&ForecastSeries, usize) -> Vec<f64>,
{
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for s in series {
        // t ranges over positions with a full raw window behind and H steps ahead.
        if s.len < w + h + 1 {
            return Err(PlantsError::invalid(format!(
                "forecast horizon {h} leaves no pairs in a series of length {}",
                s.len
            )));
        }
        let ts: Vec<usize> = (w - 1..s.len - h).collect();
        let cut = ((ts.len() as f64) * TRAIN_FRACTION).round() as usize;
        if cut == 0 || cut == ts.len() {
            return Err(PlantsError::invalid(format!("forecast horizon {h}: too few pairs to split")));
        }
        for (j, &t) in ts.iter().enumerate() {
            let x = feat(s, t);
            let y = s.values[(t + 1) * s.channels..(t + 1 + h) * s.channels].to_vec();
            let dst = if j < cut { &mut train } else { &mut test };
            dst.0.push(x);
            dst.1.push(y);
        }
    }
    let (coef, x_mean, y_mean) = ridge_fit(&train.0, &train.1, ridge)?;
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for (x, y) in test.0.iter().zip(&test.1) {
        let xc = DVector::from_iterator(x.len(), x.iter().zip(&x_mean).map(|(a, m)| a - m));
        let pred = coef.transpose() * xc;
        for (j, yv) in y.iter().enumerate() {
            let e = pred[j] + y_mean[j] - yv;
            se += e * e;
            ae += e.abs();
            count += 1;
        }
    }
    Ok((se / count as f64, ae / count as f64))
}

/// Closed-form ridge with an unpenalized intercept (features and targets are
/// centred). Returns `(D × T coefficients, feature means, target means)`.
fn ridge_fit(x: &[Vec<f64>], y: &[Vec<f64>], ridge: f64) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    let (n, d, t) = (x.len(), x[0].len(), y[0].len());
    let mean = |rows: &[Vec<f64>], k: usize| -> Vec<f64> {
        let mut m = vec![0.0; k];
        for r in rows {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v / n as f64;
            }
        }
        m
    };
    let (xm, ym) = (mean(x, d), mean(y, t));
    let xmat = DMatrix::from_fn(n, d, |i, j| x[i][j] - xm[j]);
    let ymat = DMatrix::from_fn(n, t, |i, j| y[i][j] - ym[j]);
    let mut gram = xmat.transpose() * &xmat;
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let rhs = xmat.transpose() * ymat;
    // Cholesky needs a strictly positive diagonal; an exactly singular system
    // (e.g. zero ridge on constant features) falls back to a pseudo-inverse.
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .pseudo_inverse(1e-12)
            .map_err(|e| PlantsError::NonFinite(format!("ridge solve: {e}")))?
            * rhs,
    };
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(PlantsError::NonFinite("ridge coefficients".into()));
    }
    Ok((coef, xm, ym))
}
