//! Non-overlapping, zero-padded segmentation of `L × C` series into windows.

use crate::error::{PlantsError, Result};
use crate::periodicity::PeriodSet;

/// Segmentation of one series at a single window length.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchView {
    window: usize,
    count: usize,
    pad_len: usize,
    channels: usize,
    /// `count × window × channels`, row-major.
    patches: Vec<f64>,
}

impl PatchView {
    pub fn window(&self) -> usize {
        self.window
    }

    /// Number of windows `⌈L/w⌉`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn pad_len(&self) -> usize {
        self.pad_len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn series_len(&self) -> usize {
        self.count * self.window - self.pad_len
    }

    pub fn patches(&self) -> &[f64] {
        &self.patches
    }

    /// Window `m` as a `w × C` row-major slice (padding included).
    pub fn patch(&self, m: usize) -> &[f64] {
        let stride = self.window * self.channels;
        &self.patches[m * stride..(m + 1) * stride]
    }

    /// Real (non-padded) timesteps in window `m`.
    pub fn valid_len(&self, m: usize) -> usize {
        if m + 1 == self.count {
            self.window - self.pad_len
        } else {
            self.window
        }
    }

    /// Windows made of more than 50% padding are excluded from the losses.
    pub fn is_masked(&self, m: usize) -> bool {
        2 * (self.window - self.valid_len(m)) > self.window
    }

    /// Leading windows that take part in the losses. Only the final window can
    /// carry padding, so usable windows always form a prefix.
    pub fn usable_count(&self) -> usize {
        (0..self.count).filter(|&m| !self.is_masked(m)).count()
    }

    /// Inverse of [`segment`]: concatenates windows and drops the padding.
    pub fn unsegment(&self) -> Vec<f64> {
        self.patches[..self.series_len() * self.channels].to_vec()
    }
}

/// Splits a row-major `len × channels` series into `⌈len/w⌉` windows,
/// appending zeros to fill the last one.
pub fn segment(series: &[f64], len: usize, channels: usize, window: usize) -> Result<PatchView> {
    if window == 0 {
        return Err(PlantsError::invalid("window length must be at least 1"));
    }
    if len == 0 || series.len() != len * channels {
        return Err(PlantsError::shape("segment", &[len, channels], &[series.len()]));
    }
    let count = len.div_ceil(window);
    let pad_len = count * window - len;
    let mut patches = Vec::with_capacity(count * window * channels);
    patches.extend_from_slice(series);
    patches.resize(count * window * channels, 0.0);
    Ok(PatchView {
        window,
        count,
        pad_len,
        channels,
        patches,
    })
}

/// One view per granularity, in `period_set` order.
pub fn multi_segment(
    series: &[f64],
    len: usize,
    channels: usize,
    period_set: &PeriodSet,
) -> Result<Vec<PatchView>> {
    if period_set.is_empty() {
        return Err(PlantsError::invalid("period set is empty"));
    }
    period_set
        .windows()
        .into_iter()
        .map(|w| segment(series, len, channels, w))
        .collect()
}
