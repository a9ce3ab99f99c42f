//! Hidden-Markov synthetic multivariate series with per-timestep state labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Labels, TimeSeriesDataset};
use crate::error::{PlantsError, Result};

/// Emission process of one channel while a state is active.
#[derive(Clone, Debug, PartialEq)]
pub enum Regime {
    /// `amplitude · sin(2πt/period + phase) + noise · ε`
    Sinusoid { period: f64, amplitude: f64, noise: f64 },
    /// `x_t = φ1 x_{t−1} + φ2 x_{t−2} + noise · ε`
    Ar2 { phi1: f64, phi2: f64, noise: f64 },
}

impl Regime {
    fn validate(&self) -> Result<()> {
        match *self {
            Regime::Sinusoid { period, amplitude, noise } => {
                if !(period > 0.0 && amplitude.is_finite() && noise >= 0.0 && noise.is_finite()) {
                    return Err(PlantsError::invalid(format!("bad sinusoid regime {self:?}")));
                }
            }
            Regime::Ar2 { phi1, phi2, noise } => {
                // stationarity triangle
                let stationary = phi1 + phi2 < 1.0 && phi2 - phi1 < 1.0 && phi2.abs() < 1.0;
                if !stationary || !(noise >= 0.0 && noise.is_finite()) {
                    return Err(PlantsError::invalid(format!("non-stationary AR(2) regime {self:?}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmmSpec {
    pub states: usize,
    /// Row-major `S × S`, rows sum to 1.
    pub transition: Vec<f64>,
    /// `S` rows of per-channel regimes; channel `c` uses `regimes[s][c % len]`.
    pub regimes: Vec<Vec<Regime>>,
    /// The state is resampled every `dwell` timesteps.
    pub dwell: usize,
}

impl HmmSpec {
    /// Four well-separated regimes (two tones, a resonant AR(2), a noisy
    /// AR(2)), dwell 50, stay probability 0.5.
    pub fn four_state() -> Self {
        let s = 4;
        let mut transition = vec![0.5 / 3.0; s * s];
        for i in 0..s {
            transition[i * s + i] = 0.5;
        }
        let per_channel = |f: &dyn Fn(f64) -> Regime| (0..3).map(|c| f(1.0 + 0.2 * c as f64)).collect();
        HmmSpec {
            states: s,
            transition,
            regimes: vec![
                per_channel(&|k| Regime::Sinusoid { period: 8.0 * k, amplitude: 1.0, noise: 0.2 }),
                per_channel(&|k| Regime::Sinusoid { period: 24.0 * k, amplitude: 1.0, noise: 0.2 }),
                per_channel(&|k| Regime::Ar2 { phi1: 1.6 / k, phi2: -0.8, noise: 0.3 }),
                per_channel(&|_| Regime::Ar2 { phi1: 0.2, phi2: 0.1, noise: 0.9 }),
            ],
            dwell: 50,
        }
    }

    /// Same regimes with a uniform transition matrix.
    pub fn uniform(states: usize, dwell: usize) -> Self {
        let base = Self::four_state();
        HmmSpec {
            states,
            transition: vec![1.0 / states as f64; states * states],
            regimes: (0..states).map(|i| base.regimes[i % 4].clone()).collect(),
            dwell,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.states;
        if s == 0 || self.transition.len() != s * s || self.regimes.len() != s {
            return Err(PlantsError::invalid(format!(
                "HMM spec: {s} states, {} transition entries, {} regime rows",
                self.transition.len(),
                self.regimes.len()
            )));
        }
        if self.dwell == 0 {
            return Err(PlantsError::invalid("dwell must be at least 1"));
        }
        for (i, row) in self.transition.chunks(s).enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(PlantsError::invalid(format!("transition row {i} is not stochastic")));
            }
        }
        for row in &self.regimes {
            if row.is_empty() {
                return Err(PlantsError::invalid("state with no regimes"));
            }
            row.iter().try_for_each(Regime::validate)?;
        }
        Ok(())
    }
}

fn sample_row(rng: &mut ChaCha8Rng, row: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // rounding: last state with positive mass
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `n` instances of length `len` with `channels` channels, labelled per
/// timestep with the active state.
pub fn gen_hmm_mts(spec: &HmmSpec, n: usize, len: usize, channels: usize, seed: u64) -> Result<TimeSeriesDataset> {
    spec.validate()?;
    if n == 0 || len == 0 || channels == 0 {
        return Err(PlantsError::invalid("gen_hmm_mts: sizes must be positive"));
    }
    let s = spec.states;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * len * channels);
    let mut labels = Vec::with_capacity(n * len);
    let uniform = vec![1.0 / s as f64; s];
    for _ in 0..n {
        let phases: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let mut hist = vec![[0.0f64; 2]; channels];
        let mut state = sample_row(&mut rng, &uniform);
        for t in 0..len {
            if t > 0 && t % spec.dwell == 0 {
                state = sample_row(&mut rng, &spec.transition[state * s..(state + 1) * s]);
            }
            labels.push(state as u32);
            let regimes = &spec.regimes[state];
            for c in 0..channels {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let x = match regimes[c % regimes.len()] {
                    Regime::Sinusoid { period, amplitude, noise } => {
                        amplitude * (std::f64::consts::TAU * t as f64 / period + phases[c]).sin() + noise * eps
                    }
                    Regime::Ar2 { phi1, phi2, noise } => phi1 * hist[c][0] + phi2 * hist[c][1] + noise * eps,
                };
                hist[c] = [x, hist[c][0]];
                values.push(x);
            }
        }
    }
    TimeSeriesDataset::new(n, len, channels, values)?.with_labels(Labels::PerTimestep(labels))
}
