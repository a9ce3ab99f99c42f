//! Input-space similarity kernels.
//!
//! MXCorr: for each channel, the Pearson correlation between `x[τ..w)` and
//! `y[0..w−τ)` maximized over lags `τ ∈ [0, w−2]`, then averaged over channels.
//! Only non-negative lags are scanned, so `mxcorr(x, y)` and `mxcorr(y, x)`
//! can differ. Overlaps with zero variance contribute a correlation of 0.
//!
//! DTW is kept as the reference kernel for runtime comparisons.

use rayon::prelude::*;

use crate::error::{PlantsError, Result};
use crate::patching::PatchView;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    /// Batch × batch at a fixed window index.
    Local,
    /// Window × window within one instance.
    Global,
}

/// Square matrix of MXCorr scores. The diagonal is not a similarity between
/// distinct items; it is stored as 0 and ignored by the losses.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub kind: SimilarityKind,
    size: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(kind: SimilarityKind, size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(PlantsError::shape("similarity", &[size, size], &[values.len()]));
        }
        Ok(SimilarityMatrix { kind, size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Off-diagonal entries of row `i`, in column order.
    pub fn row_without_diagonal(&self, i: usize) -> Vec<f64> {
        (0..self.size)
            .filter(|&j| j != i)
            .map(|j| self.get(i, j))
            .collect()
    }
}

/// Pearson correlation of `x[lag..w)` against `y[0..w−lag)`.
pub fn ncc_at_lag(x: &[f64], y: &[f64], lag: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(PlantsError::shape("ncc_at_lag", &[x.len()], &[y.len()]));
    }
    let w = x.len();
    if w < 2 || lag > w - 2 {
        return Err(PlantsError::invalid(format!(
            "lag {lag} out of range [0, {}] for window {w}",
            w.saturating_sub(2)
        )));
    }
    let xs = &x[lag..];
    let ys = &y[..w - lag];
    if is_constant(xs) || is_constant(ys) {
        return Ok(0.0);
    }
    let (mx, my) = (mean(xs), mean(ys));
    let nx = centered_norm(xs, mx);
    let ny = centered_norm(ys, my);
    let dot: f64 = xs.iter().zip(ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(dot / (nx * ny))
}

fn is_constant(s: &[f64]) -> bool {
    s.iter().all(|&v| v == s[0])
}

fn mean(s: &[f64]) -> f64 {
    s.iter().sum::<f64>() / s.len() as f64
}

fn centered_norm(s: &[f64], m: f64) -> f64 {
    s.iter().map(|v| (v - m) * (v - m)).sum::<f64>().sqrt()
}

/// Per-channel overlap statistics of one `w × C` window, reused across every
/// pair the window takes part in.
#[derive(Clone, Debug)]
pub struct WindowStats {
    window: usize,
    /// Channel-major copy of the window.
    series: Vec<Vec<f64>>,
    /// Indexed by lag: statistics of `x[τ..w)`.
    suffix: Vec<Vec<SegStats>>,
    /// Indexed by overlap length: statistics of `y[0..n)`.
    prefix: Vec<Vec<SegStats>>,
}

#[derive(Clone, Copy, Debug, Default)]
struct SegStats {
    mean: f64,
    norm: f64,
    constant: bool,
}

fn seg_stats(s: &[f64]) -> SegStats {
    if is_constant(s) {
        return SegStats {
            mean: s[0],
            norm: 0.0,
            constant: true,
        };
    }
    let m = mean(s);
    SegStats {
        mean: m,
        norm: centered_norm(s, m),
        constant: false,
    }
}

impl WindowStats {
    /// `data` is a row-major `w × channels` window with `w ≥ 3`.
    pub fn new(data: &[f64], window: usize, channels: usize) -> Result<Self> {
        if window < 3 {
            return Err(PlantsError::invalid(format!(
                "mxcorr needs windows of at least 3 samples, got {window}"
            )));
        }
        if data.len() != window * channels || channels == 0 {
            return Err(PlantsError::shape("mxcorr", &[window, channels], &[data.len()]));
        }
        let series: Vec<Vec<f64>> = (0..channels)
            .map(|c| (0..window).map(|t| data[t * channels + c]).collect())
            .collect();
        let suffix = series
            .iter()
            .map(|s| (0..=window - 2).map(|lag| seg_stats(&s[lag..])).collect())
            .collect();
        let prefix = series
            .iter()
            .map(|s| {
                (0..=window)
                    .map(|n| if n < 2 { SegStats::default() } else { seg_stats(&s[..n]) })
                    .collect()
            })
            .collect();
        Ok(WindowStats {
            window,
            series,
            suffix,
            prefix,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn channels(&self) -> usize {
        self.series.len()
    }
}

/// MXCorr between two precomputed windows.
pub fn mxcorr_stats(x: &WindowStats, y: &WindowStats) -> Result<f64> {
    if x.window != y.window || x.channels() != y.channels() {
        return Err(PlantsError::shape(
            "mxcorr",
            &[x.window, x.channels()],
            &[y.window, y.channels()],
        ));
    }
    let w = x.window;
    let mut total = 0.0;
    for c in 0..x.channels() {
        let (xs, ys) = (&x.series[c], &y.series[c]);
        let mut best = f64::NEG_INFINITY;
        for lag in 0..=w - 2 {
            let n = w - lag;
            let sx = x.suffix[c][lag];
            let sy = y.prefix[c][n];
            let cc = if sx.constant || sy.constant {
                0.0
            } else {
                let dot: f64 = xs[lag..]
                    .iter()
                    .zip(&ys[..n])
                    .map(|(a, b)| (a - sx.mean) * (b - sy.mean))
                    .sum();
                dot / (sx.norm * sy.norm)
            };
            best = best.max(cc);
        }
        total += best;
    }
    Ok(total / x.channels() as f64)
}

/// MXCorr between two row-major `w × channels` windows.
pub fn mxcorr(x: &[f64], y: &[f64], window: usize, channels: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(PlantsError::shape("mxcorr", &[x.len()], &[y.len()]));
    }
    let sx = WindowStats::new(x, window, channels)?;
    let sy = WindowStats::new(y, window, channels)?;
    mxcorr_stats(&sx, &sy)
}

/// Full square matrix over a set of windows; entry `(i, j)` is
/// `mxcorr(items[i], items[j])`. Rows are filled in parallel.
pub fn mxcorr_matrix(stats: &[&WindowStats], kind: SimilarityKind) -> Result<SimilarityMatrix> {
    let n = stats.len();
    if let Some(first) = stats.first() {
        if let Some(bad) = stats
            .iter()
            .find(|s| s.window != first.window || s.channels() != first.channels())
        {
            return Err(PlantsError::shape(
                "mxcorr_matrix",
                &[first.window, first.channels()],
                &[bad.window, bad.channels()],
            ));
        }
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        mxcorr_stats(stats[i], stats[j]).expect("validated shapes")
                    }
                })
                .collect()
        })
        .collect();
    SimilarityMatrix::new(kind, n, rows.concat())
}

/// Local similarities across a batch at one window index. `windows` holds one
/// row-major `w × C` window per batch member.
pub fn mxcorr_local(windows: &[&[f64]], window: usize, channels: usize) -> Result<SimilarityMatrix> {
    if windows.len() < 2 {
        return Err(PlantsError::invalid(format!(
            "local similarity needs a batch of at least 2, got {}",
            windows.len()
        )));
    }
    let stats: Vec<WindowStats> = windows
        .iter()
        .map(|w| WindowStats::new(w, window, channels))
        .collect::<Result<_>>()?;
    let refs: Vec<&WindowStats> = stats.iter().collect();
    mxcorr_matrix(&refs, SimilarityKind::Local)
}

/// Global similarities between the usable windows of one instance.
pub fn mxcorr_global(view: &PatchView) -> Result<SimilarityMatrix> {
    let usable = view.usable_count();
    if usable < 2 {
        return Err(PlantsError::invalid(format!(
            "global similarity needs at least 2 usable windows, got {usable}"
        )));
    }
    let stats: Vec<WindowStats> = (0..usable)
        .map(|m| WindowStats::new(view.patch(m), view.window(), view.channels()))
        .collect::<Result<_>>()?;
    let refs: Vec<&WindowStats> = stats.iter().collect();
    mxcorr_matrix(&refs, SimilarityKind::Global)
}

/// Unconstrained DTW with L1 step cost between `len × channels` series.
pub fn dtw_distance(x: &[f64], y: &[f64], channels: usize) -> Result<f64> {
    if channels == 0 || x.is_empty() || y.is_empty() {
        return Err(PlantsError::invalid("dtw: empty input"));
    }
    if x.len() % channels != 0 || y.len() % channels != 0 {
        return Err(PlantsError::shape("dtw", &[x.len()], &[y.len(), channels]));
    }
    let (n, m) = (x.len() / channels, y.len() / channels);
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 0..n {
        let xi = &x[i * channels..(i + 1) * channels];
        cur[0] = f64::INFINITY;
        for j in 0..m {
            let yj = &y[j * channels..(j + 1) * channels];
            let cost: f64 = xi.iter().zip(yj).map(|(a, b)| (a - b).abs()).sum();
            cur[j + 1] = cost + prev[j].min(prev[j + 1]).min(cur[j]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Symmetric `N × N` DTW distance matrix over whole series.
pub fn dtw_matrix(series: &[&[f64]], channels: usize) -> Result<Vec<f64>> {
    let n = series.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| dtw_distance(series[i], series[j], channels))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; n * n];
    for (&(i, j), d) in pairs.iter().zip(dists) {
        out[i * n + j] = d;
        out[j * n + i] = d;
    }
    Ok(out)
}
