//! Synthetic data with known latent states, downstream probes, anomaly
//! scoring, trajectory export and the similarity runtime benchmark.

mod anomaly;
mod bench;
mod pca;
mod probe;
mod synth;

pub use anomaly::{anomaly_score, anomaly_scores, auroc, difference, MASK_VALUE};
pub use bench::{bench_csv, bench_similarity, bench_window, BenchKernel, BenchRecord, Timing};
pub use pca::{trajectory_pca, Pca};
pub use probe::{
    classify_probe, forecast_probe, pooled_windows, ForecastSeries, ProbeKind, ProbeReport, ProbeTask,
    DEFAULT_HORIZONS, DEFAULT_RIDGE,
};
pub use synth::{gen_hmm_mts, HmmSpec, Regime};
