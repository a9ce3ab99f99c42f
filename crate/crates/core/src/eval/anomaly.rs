//! Masked-reconstruction anomaly scores.

use crate::error::{PlantsError, Result};
use crate::model::Model;

/// Value written over a masked observation, in standardized units.
pub const MASK_VALUE: f64 = 0.0;

fn standardized(model: &Model, series: &[f64], channels: usize) -> Vec<f64> {
    match &model.normalization {
        Some(n) => series
            .chunks(channels)
            .flat_map(|row| row.iter().enumerate().map(|(c, v)| (v - n.mean[c]) / n.std[c]))
            .collect(),
        None => series.to_vec(),
    }
}

/// L1 distance at position `t` between the representations of `series` and
/// of the same series with every channel at `t` masked.
pub fn anomaly_score(model: &Model, series: &[f64], len: usize, t: usize) -> Result<f64> {
    Ok(anomaly_scores(model, series, len, &[t])?[0])
}

/// [`anomaly_score`] at several positions. The encoders are causal, so each
/// score only encodes the prefix ending at its position.
pub fn anomaly_scores(model: &Model, series: &[f64], len: usize, positions: &[usize]) -> Result<Vec<f64>> {
    let c = model.config().in_channels;
    if series.len() != len * c {
        return Err(PlantsError::shape("anomaly_score", &[series.len()], &[len, c]));
    }
    let x = standardized(model, series, c);
    positions
        .iter()
        .map(|&t| {
            if t >= len {
                return Err(PlantsError::invalid(format!("position {t} outside series of length {len}")));
            }
            let prefix = &x[..(t + 1) * c];
            let mut masked = prefix.to_vec();
            masked[t * c..].iter_mut().for_each(|v| *v = MASK_VALUE);
            let a = model.encode_full(prefix, t + 1)?;
            let b = model.encode_full(&masked, t + 1)?;
            let d = a.shape()[1];
            Ok(a.data()[t * d..]
                .iter()
                .zip(&b.data()[t * d..])
                .map(|(p, q)| (p - q).abs())
                .sum())
        })
        .collect()
}

/// Area under the ROC curve for `positive` scores ranked above `negative`
/// ones; ties count one half.
pub fn auroc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(PlantsError::invalid("auroc needs both classes"));
    }
    let mut neg = negative.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positive {
        let below = neg.partition_point(|&v| v < p);
        let not_above = neg.partition_point(|&v| v <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (positive.len() * negative.len()) as f64)
}

/// `d`-fold first differencing of a row-major `len × channels` series.
pub fn difference(series: &[f64], len: usize, channels: usize, d: usize) -> Result<Vec<f64>> {
    if series.len() != len * channels {
        return Err(PlantsError::shape("difference", &[series.len()], &[len, channels]));
    }
    if d >= len {
        return Err(PlantsError::invalid(format!("cannot difference {d} times a series of length {len}")));
    }
    let mut cur = series.to_vec();
    for _ in 0..d {
        cur = cur
            .windows(2 * channels)
            .step_by(channels)
            .flat_map(|w| (0..channels).map(move |c| w[channels + c] - w[c]))
            .collect();
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        let mut cfg = ModelConfig::new(2);
        cfg.hidden = 8;
        cfg.depth = 2;
        cfg.latent_dim = 4;
        cfg.transition_dim = 4;
        Model::new(cfg).unwrap()
    }

    #[test]
    fn masking_the_mask_value_scores_zero() {
        let m = model();
        let mut x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        x[10] = 0.0;
        x[11] = 0.0;
        assert_eq!(anomaly_score(&m, &x, 20, 5).unwrap(), 0.0);
        assert!(anomaly_score(&m, &x, 20, 6).unwrap() > 0.0);
    }

    #[test]
    fn scores_nonnegative_and_bounds_checked() {
        let m = model();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).cos() * 3.0).collect();
        let s = anomaly_scores(&m, &x, 20, &(0..20).collect::<Vec<_>>()).unwrap();
        assert!(s.iter().all(|&v| v >= 0.0));
        assert!(anomaly_score(&m, &x, 20, 20).is_err());
    }

    #[test]
    fn prefix_score_matches_full_encoding() {
        let m = model();
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.41).sin()).collect();
        let t = 17;
        let mut masked = x.clone();
        masked[2 * t] = 0.0;
        masked[2 * t + 1] = 0.0;
        let a = m.encode_full(&x, 30).unwrap();
        let b = m.encode_full(&masked, 30).unwrap();
        let d = a.shape()[1];
        let want: f64 = (0..d).map(|j| (a.at(&[t, j]) - b.at(&[t, j])).abs()).sum();
        assert!((anomaly_score(&m, &x, 30, t).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn auroc_values() {
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0], &[2.0]).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
        // brute-force pair count
        let p = [0.3, 0.9, 0.5, 0.5];
        let n = [0.1, 0.5, 0.7];
        let mut w = 0.0;
        for a in p {
            for b in n {
                w += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        assert_eq!(auroc(&p, &n).unwrap(), w / 12.0);
        assert!(auroc(&[], &n).is_err());
    }

    #[test]
    fn differencing() {
        let ramp: Vec<f64> = (0..10).map(|t| 2.0 * t as f64 + 1.0).collect();
        assert_eq!(difference(&ramp, 10, 1, 0).unwrap(), ramp);
        assert!(difference(&ramp, 10, 1, 1).unwrap().iter().all(|&v| v == 2.0));
        let sq: Vec<f64> = (0..10).flat_map(|t| [(t * t) as f64, -(t as f64)]).collect();
        let d2 = difference(&sq, 10, 2, 2).unwrap();
        assert_eq!(d2.len(), 16);
        assert!(d2.chunks(2).all(|r| r == [2.0, 0.0]));
        assert!(difference(&ramp, 10, 1, 10).is_err());
    }
}
