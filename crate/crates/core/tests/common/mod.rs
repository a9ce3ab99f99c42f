#![allow(dead_code)]

use plants_core::eval::{
    anomaly_scores, auroc, classify_probe, gen_hmm_mts, pooled_windows, HmmSpec, ProbeKind, Regime,
};
use plants_core::training::{train, Granularity, TrainOutcome, TrainingConfig};
use plants_core::TimeSeriesDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HMM_N: usize = 64;
pub const HMM_L: usize = 400;
pub const HMM_C: usize = 3;
pub const HMM_TEST_N: usize = 32;

pub struct StateRecovery {
    pub accuracy: f64,
    pub knn_accuracy: f64,
    pub outcome: TrainOutcome,
}

/// Trains on the four-state HMM task and probes pooled windows of the
/// generator's dwell length on held-out instances.
pub fn state_recovery(config: &TrainingConfig, seed: u64) -> StateRecovery {
    let spec = HmmSpec::four_state();
    let train_set = gen_hmm_mts(&spec, HMM_N, HMM_L, HMM_C, seed).unwrap();
    let test_set = gen_hmm_mts(&spec, HMM_TEST_N, HMM_L, HMM_C, seed + 10_000).unwrap();
    let cfg = TrainingConfig { seed, ..config.clone() };
    let outcome = train(&cfg, &train_set).unwrap();
    let (tx, ty) = pooled_windows(&outcome.model, &train_set, spec.dwell).unwrap();
    let (vx, vy) = pooled_windows(&outcome.model, &test_set, spec.dwell).unwrap();
    let lin = classify_probe(&tx, &ty, &vx, &vy, ProbeKind::Linear, seed).unwrap();
    let knn = classify_probe(&tx, &ty, &vx, &vy, ProbeKind::Knn, seed).unwrap();
    StateRecovery {
        accuracy: lin.metric("accuracy").unwrap(),
        knn_accuracy: knn.metric("accuracy").unwrap(),
        outcome,
    }
}

/// Smooth two-tone series with light noise.
pub fn smooth_series(n: usize, len: usize, seed: u64) -> TimeSeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::with_capacity(n * len);
    for _ in 0..n {
        let (p1, p2): (f64, f64) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
        for t in 0..len {
            let x = t as f64;
            v.push((x * std::f64::consts::TAU / 25.0 + p1).sin() + 0.5 * (x * std::f64::consts::TAU / 10.0 + p2).sin() + 0.05 * rng.gen_range(-1.0..1.0));
        }
    }
    TimeSeriesDataset::new(n, len, 1, v).unwrap()
}

pub struct AnomalyTrial {
    pub auroc: f64,
    pub spike_scores: Vec<f64>,
    pub clean_scores: Vec<f64>,
}

/// Trains briefly on clean smooth data, injects 10σ spikes into a held-out
/// series and compares masked-input scores at spike and clean positions.
pub fn anomaly_trial(seed: u64) -> AnomalyTrial {
    let (n, len) = (16, 200);
    let data = smooth_series(n, len, seed);
    let mut cfg = TrainingConfig::default();
    cfg.epochs = 5;
    cfg.hidden = 16;
    cfg.depth = 3;
    cfg.seed = seed;
    let model = train(&cfg, &data).unwrap().model;

    let test = smooth_series(1, len, seed + 500);
    let mut series = test.instance(0).to_vec();
    let mean = series.iter().sum::<f64>() / len as f64;
    let sd = (series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    let mut spikes: Vec<usize> = Vec::new();
    while spikes.len() < 6 {
        let t = rng.gen_range(20..len);
        if spikes.iter().all(|&s| s.abs_diff(t) > 3) {
            spikes.push(t);
        }
    }
    for &t in &spikes {
        series[t] += if rng.gen::<bool>() { 10.0 } else { -10.0 } * sd;
    }
    let positions: Vec<usize> = (0..len).collect();
    let scores = anomaly_scores(&model, &series, len, &positions).unwrap();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (t, s) in scores.into_iter().enumerate() {
        if spikes.contains(&t) {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    AnomalyTrial {
        auroc: auroc(&pos, &neg).unwrap(),
        spike_scores: pos,
        clean_scores: neg,
    }
}

/// Noise-free states cycling 0 → 1 → 2 → 3 every `dwell` steps.
pub fn cyclic_states(n: usize, len: usize, dwell: usize, seed: u64) -> TimeSeriesDataset {
    let mut spec = HmmSpec::four_state();
    spec.transition = (0..16).map(|k| if (k / 4 + 1) % 4 == k % 4 { 1.0 } else { 0.0 }).collect();
    spec.dwell = dwell;
    for row in &mut spec.regimes {
        for r in row.iter_mut() {
            *r = match *r {
                Regime::Sinusoid { period, amplitude, .. } => Regime::Sinusoid { period, amplitude, noise: 0.0 },
                Regime::Ar2 { .. } => Regime::Sinusoid { period: 5.0, amplitude: 0.5, noise: 0.0 },
            };
        }
    }
    spec.regimes[3] = vec![Regime::Sinusoid { period: 13.0, amplitude: 2.0, noise: 0.0 }];
    gen_hmm_mts(&spec, n, len, 2, seed).unwrap()
}

pub fn explicit(windows: &[usize]) -> Granularity {
    Granularity::Windows(windows.to_vec())
}
