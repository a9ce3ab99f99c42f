//! Wall-clock comparison of the pairwise similarity structures used for soft
//! contrastive targets.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PlantsError, Result};
use crate::patching::segment;
use crate::similarity::{dtw_matrix, mxcorr_matrix, SimilarityKind, WindowStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKernel {
    /// Local matrices per window position plus a global matrix per instance,
    /// built on demand from raw windows.
    Mxcorr,
    /// Full `N × N` DTW distance matrix, built before training.
    Dtw,
}

impl BenchKernel {
    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::Mxcorr => "mxcorr",
            BenchKernel::Dtw => "dtw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub mean: f64,
    pub std: f64,
}

impl Timing {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Timing { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub kernel: BenchKernel,
    pub len: usize,
    pub n: usize,
    pub channels: usize,
    /// MXCorr window length; 0 for DTW.
    pub window: usize,
    pub threads: usize,
    pub repeats: usize,
    /// Seconds spent before training could start.
    pub precompute: Timing,
    /// Seconds spent building similarities during training.
    pub online: Timing,
    pub total: Timing,
}

/// Window length used by the MXCorr structure.
pub fn bench_window(len: usize) -> usize {
    (len / 8).max(3).min(len)
}

fn simulate(len: usize, n: usize, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut level = vec![0.0; channels];
            (0..len)
                .flat_map(|_| {
                    level.iter_mut().for_each(|l| *l += rng.gen_range(-1.0..1.0));
                    level.clone()
                })
                .collect()
        })
        .collect()
}

fn mxcorr_structure(series: &[Vec<f64>], len: usize, channels: usize) -> Result<usize> {
    let w = bench_window(len);
    let per_instance: Vec<Vec<WindowStats>> = series
        .iter()
        .map(|s| {
            let view = segment(s, len, channels, w)?;
            (0..view.usable_count())
                .map(|m| WindowStats::new(view.patch(m), w, channels))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let m = per_instance[0].len();
    let mut cells = 0;
    for pos in 0..m {
        let refs: Vec<&WindowStats> = per_instance.iter().map(|s| &s[pos]).collect();
        cells += mxcorr_matrix(&refs, SimilarityKind::Local)?.values().len();
    }
    if m >= 2 {
        for s in &per_instance {
            let refs: Vec<&WindowStats> = s.iter().collect();
            cells += mxcorr_matrix(&refs, SimilarityKind::Global)?.values().len();
        }
    }
    Ok(cells)
}

/// Times the full pairwise structure of `kernel` on simulated random walks,
/// `repeats` times.
pub fn bench_similarity(
    len: usize,
    n: usize,
    channels: usize,
    kernel: BenchKernel,
    repeats: usize,
    seed: u64,
) -> Result<BenchRecord> {
    if len == 0 || n < 2 || channels == 0 || repeats == 0 {
        return Err(PlantsError::invalid("bench sizes must be positive (N ≥ 2)"));
    }
    if kernel == BenchKernel::Mxcorr && len < 3 {
        return Err(PlantsError::invalid("mxcorr bench needs L ≥ 3"));
    }
    let series = simulate(len, n, channels, seed);
    let (mut pre, mut online, mut total) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..repeats {
        let t0 = Instant::now();
        let (p, o) = match kernel {
            BenchKernel::Mxcorr => {
                std::hint::black_box(mxcorr_structure(&series, len, channels)?);
                (0.0, t0.elapsed().as_secs_f64())
            }
            BenchKernel::Dtw => {
                let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
                std::hint::black_box(dtw_matrix(&refs, channels)?);
                (t0.elapsed().as_secs_f64(), 0.0)
            }
        };
        pre.push(p);
        online.push(o);
        total.push(p + o);
    }
    Ok(BenchRecord {
        kernel,
        len,
        n,
        channels,
        window: if kernel == BenchKernel::Mxcorr { bench_window(len) } else { 0 },
        threads: rayon::current_num_threads(),
        repeats,
        precompute: Timing::of(&pre),
        online: Timing::of(&online),
        total: Timing::of(&total),
    })
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(
        "kernel,L,N,C,window,threads,repeats,precompute_mean,precompute_std,online_mean,online_std,total_mean,total_std\n",
    );
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.kernel.name(),
            r.len,
            r.n,
            r.channels,
            r.window,
            r.threads,
            r.repeats,
            r.precompute.mean,
            r.precompute.std,
            r.online.mean,
            r.online.std,
            r.total.mean,
            r.total.std
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phases_by_kernel() {
        let m = bench_similarity(64, 20, 2, BenchKernel::Mxcorr, 2, 0).unwrap();
        assert_eq!(m.precompute.mean, 0.0);
        assert!(m.online.mean > 0.0);
        let d = bench_similarity(64, 20, 2, BenchKernel::Dtw, 2, 0).unwrap();
        assert!(d.precompute.mean > 0.0);
        assert_eq!(d.online.mean, 0.0);
        let csv = bench_csv(&[m, d]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("mxcorr,64,20,2,8,"));
    }

    #[test]
    fn structure_size() {
        let series = simulate(64, 10, 2, 1);
        // 8 windows of 8: 8 local 10×10 matrices and 10 global 8×8 matrices
        assert_eq!(mxcorr_structure(&series, 64, 2).unwrap(), 8 * 100 + 10 * 64);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(bench_similarity(64, 1, 2, BenchKernel::Dtw, 1, 0).is_err());
        assert!(bench_similarity(64, 4, 2, BenchKernel::Dtw, 0, 0).is_err());
    }
}
