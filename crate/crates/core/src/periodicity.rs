//! Dominant-period detection from the channel- and instance-averaged
//! amplitude spectrum, and the window sizes derived from it.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::TimeSeriesDataset;
use crate::error::{PlantsError, Result};

/// Frequencies whose amplitude falls below this fraction of the strongest
/// in-band amplitude are never selected.
pub const NOISE_FLOOR_RATIO: f64 = 1e-3;

/// Absolute floor, relative to `max(1, DC amplitude)`, under which a spectrum
/// is treated as carrying no periodic energy at all (e.g. constant input).
pub const ABSOLUTE_FLOOR: f64 = 1e-9;

pub const MIN_WINDOW: usize = 3;

/// Channel- and instance-averaged amplitude spectrum; bin `f` holds
/// `|DFT_f| / L` for `f ∈ [0, ⌊L/2⌋]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub amplitudes: Vec<f64>,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Period {
    /// Frequency index, `None` when the window was supplied explicitly.
    pub frequency: Option<usize>,
    pub amplitude: f64,
    pub window: usize,
}

/// Window sizes for multi-granularity patching, sorted descending and
/// without duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodSet {
    periods: Vec<Period>,
    len: usize,
}

impl PeriodSet {
    /// Explicit window list (fixed-window mode).
    pub fn from_windows(windows: &[usize], len: usize) -> Result<Self> {
        if windows.is_empty() {
            return Err(PlantsError::invalid("window list is empty"));
        }
        let mut ws = windows.to_vec();
        if let Some(&w) = ws.iter().find(|&&w| w < MIN_WINDOW || w > len) {
            return Err(PlantsError::invalid(format!(
                "window {w} outside [{MIN_WINDOW}, {len}]"
            )));
        }
        ws.sort_unstable_by(|a, b| b.cmp(a));
        ws.dedup();
        Ok(PeriodSet {
            periods: ws
                .into_iter()
                .map(|window| Period {
                    frequency: None,
                    amplitude: f64::NAN,
                    window,
                })
                .collect(),
            len,
        })
    }

    pub fn periods(&self) -> &[Period] {
        &self.periods
    }

    pub fn windows(&self) -> Vec<usize> {
        self.periods.iter().map(|p| p.window).collect()
    }

    pub fn k(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }

    pub fn series_len(&self) -> usize {
        self.len
    }
}

/// Amplitude spectrum averaged over every channel of every instance.
pub fn amplitude_spectrum(dataset: &TimeSeriesDataset) -> Result<Spectrum> {
    let (n, len, channels) = (dataset.n(), dataset.len(), dataset.channels());
    if len < 9 {
        return Err(PlantsError::SeriesTooShort { len });
    }
    if n == 0 || channels == 0 {
        return Err(PlantsError::invalid("empty dataset"));
    }
    dataset.check_finite()?;

    let fft = FftPlanner::<f64>::new().plan_fft_forward(len);
    let bins = len / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for i in 0..n {
        for c in 0..channels {
            for (t, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(dataset.value(i, t, c), 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (a, z) in acc.iter_mut().zip(&buf) {
                *a += z.norm();
            }
        }
    }
    let scale = 1.0 / (len as f64 * (n * channels) as f64);
    acc.iter_mut().for_each(|a| *a *= scale);
    Ok(Spectrum {
        amplitudes: acc,
        len,
    })
}

/// Suggested fixed window when no period can be detected.
pub fn fallback_window(len: usize) -> usize {
    ((len as f64) / 4.0).round().max(1.0) as usize
}

/// Top-`k` in-band frequencies mapped to windows `⌈L/f⌉`.
///
/// Only `f ∈ [1, ⌊L/3⌋]` is eligible; the DC bin is skipped. Ties in
/// amplitude go to the lower frequency.
pub fn top_k_periods(spectrum: &Spectrum, k: usize) -> Result<PeriodSet> {
    if k == 0 {
        return Err(PlantsError::invalid("K must be at least 1"));
    }
    let len = spectrum.len;
    let hi = (len / 3).min(spectrum.amplitudes.len().saturating_sub(1));
    let band = &spectrum.amplitudes;
    let max_amp = (1..=hi).map(|f| band[f]).fold(0.0f64, f64::max);
    let dc = band.first().copied().unwrap_or(0.0);
    let none = || PlantsError::NoPeriods {
        suggested_window: fallback_window(len),
    };
    if hi < 1 || max_amp <= ABSOLUTE_FLOOR * dc.max(1.0) {
        return Err(none());
    }
    let floor = NOISE_FLOOR_RATIO * max_amp;

    let mut cands: Vec<usize> = (1..=hi).filter(|&f| band[f] >= floor).collect();
    cands.sort_by(|&a, &b| band[b].total_cmp(&band[a]).then(a.cmp(&b)));
    cands.truncate(k);

    let mut periods: Vec<Period> = Vec::with_capacity(cands.len());
    for f in cands {
        let window = len.div_ceil(f);
        if window < MIN_WINDOW {
            continue;
        }
        // Candidates arrive strongest first, so the first frequency to claim a
        // window keeps it.
        if periods.iter().all(|p| p.window != window) {
            periods.push(Period {
                frequency: Some(f),
                amplitude: band[f],
                window,
            });
        }
    }
    if periods.is_empty() {
        return Err(none());
    }
    periods.sort_by(|a, b| b.window.cmp(&a.window));
    Ok(PeriodSet { periods, len })
}

/// Convenience: spectrum then top-`k`.
pub fn detect_periods(dataset: &TimeSeriesDataset, k: usize) -> Result<PeriodSet> {
    top_k_periods(&amplitude_spectrum(dataset)?, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn series(len: usize, f: impl Fn(usize) -> f64) -> TimeSeriesDataset {
        TimeSeriesDataset::new(1, len, 1, (0..len).map(f).collect()).unwrap()
    }

    /// Direct O(L²) DFT magnitude, scaled like the FFT path.
    fn dft_oracle(x: &[f64]) -> Vec<f64> {
        let l = x.len();
        (0..=l / 2)
            .map(|f| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (f * t) as f64 / l as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re * re + im * im).sqrt() / l as f64
            })
            .collect()
    }

    #[test]
    fn single_tone_peak() {
        let ds = series(100, |t| (2.0 * PI * 4.0 * t as f64 / 100.0).sin());
        let s = amplitude_spectrum(&ds).unwrap();
        let oracle = dft_oracle(ds.values());
        for (a, b) in s.amplitudes.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let argmax = (1..s.amplitudes.len())
            .max_by(|&a, &b| s.amplitudes[a].total_cmp(&s.amplitudes[b]))
            .unwrap();
        assert_eq!(argmax, 4);
        let p = top_k_periods(&s, 1).unwrap();
        assert_eq!(p.windows(), vec![25]);
    }

    #[test]
    fn constant_series_has_no_periods() {
        let ds = series(100, |_| 3.5);
        let s = amplitude_spectrum(&ds).unwrap();
        assert!(s.amplitudes[1..].iter().all(|&a| a < 1e-9));
        match top_k_periods(&s, 3) {
            Err(PlantsError::NoPeriods { suggested_window }) => assert_eq!(suggested_window, 25),
            other => panic!("expected fallback, got {other:?}"),
        }
    }

    #[test]
    fn two_tones_ranked_by_amplitude() {
        let ds = series(100, |t| {
            let t = t as f64;
            2.0 * (2.0 * PI * 4.0 * t / 100.0).sin() + (2.0 * PI * 10.0 * t / 100.0).sin()
        });
        let s = amplitude_spectrum(&ds).unwrap();
        let oracle = dft_oracle(ds.values());
        let a = &s.amplitudes;
        assert!(oracle[4] > oracle[10]);
        assert!(a[4] > a[10]);
        for f in 1..a.len() {
            if f != 4 && f != 10 {
                assert!(a[10] > a[f]);
            }
        }
        let p = top_k_periods(&s, 2).unwrap();
        assert_eq!(p.windows(), vec![25, 10]);
    }

    #[test]
    fn short_series_rejected() {
        let ds = series(8, |t| t as f64);
        assert!(matches!(
            amplitude_spectrum(&ds),
            Err(PlantsError::SeriesTooShort { len: 8 })
        ));
    }

    #[test]
    fn band_excludes_high_frequencies() {
        // Tone at f=45 > L/3 must not be selected; f=5 must.
        let ds = series(100, |t| {
            let t = t as f64;
            3.0 * (2.0 * PI * 45.0 * t / 100.0).sin() + 0.5 * (2.0 * PI * 5.0 * t / 100.0).sin()
        });
        let p = detect_periods(&ds, 3).unwrap();
        for period in p.periods() {
            assert!(period.frequency.unwrap() <= 33);
        }
        assert!(p.windows().contains(&20));
    }

    #[test]
    fn ties_prefer_lower_frequency() {
        let s = Spectrum {
            amplitudes: vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            len: 20,
        };
        let p = top_k_periods(&s, 1).unwrap();
        assert_eq!(p.periods()[0].frequency, Some(2));
    }

    #[test]
    fn explicit_windows_sorted_and_validated() {
        let p = PeriodSet::from_windows(&[20, 30, 20], 100).unwrap();
        assert_eq!(p.windows(), vec![30, 20]);
        assert!(PeriodSet::from_windows(&[2], 100).is_err());
        assert!(PeriodSet::from_windows(&[], 100).is_err());
    }
}
