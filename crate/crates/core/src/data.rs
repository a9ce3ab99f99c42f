//! Datasets and their on-disk formats.
//!
//! Binary layout (`PLTSDATA`), all integers little-endian:
//!
//! | bytes | field                                                  |
//! |-------|--------------------------------------------------------|
//! | 8     | magic `PLTSDATA`                                       |
//! | 8     | N (u64)                                                |
//! | 8     | L (u64)                                                |
//! | 8     | C (u64)                                                |
//! | 1     | dtype: 0 = f64, 1 = f32                                |
//! | 1     | labels: 0 = none, 1 = per instance, 2 = per timestep   |
//! | ...   | N·L·C values, row-major (instance, timestep, channel)  |
//! | ...   | label block as u32 (N or N·L entries)                  |
//!
//! CSV layout: one row per (instance, timestep) with columns
//! `instance,timestep,<C values>[,label]`. A header row is optional; when
//! present, a final column named `label` marks per-timestep labels.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{PlantsError, Result};

pub const DATA_MAGIC: &[u8; 8] = b"PLTSDATA";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    PerInstance(Vec<u32>),
    PerTimestep(Vec<u32>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

/// `N × L × C` real-valued array with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    n: usize,
    len: usize,
    channels: usize,
    values: Vec<f64>,
    labels: Option<Labels>,
}

impl TimeSeriesDataset {
    pub fn new(n: usize, len: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if n * len * channels != values.len() {
            return Err(PlantsError::shape(
                "dataset",
                &[n, len, channels],
                &[values.len()],
            ));
        }
        Ok(TimeSeriesDataset {
            n,
            len,
            channels,
            values,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Self> {
        let expected = match &labels {
            Labels::PerInstance(l) => (l.len(), self.n),
            Labels::PerTimestep(l) => (l.len(), self.n * self.len),
        };
        if expected.0 != expected.1 {
            return Err(PlantsError::invalid(format!(
                "label count {} does not match expected {}",
                expected.0, expected.1
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0 || self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    /// Row-major `L × C` slice of instance `i`.
    pub fn instance(&self, i: usize) -> &[f64] {
        let stride = self.len * self.channels;
        &self.values[i * stride..(i + 1) * stride]
    }

    pub fn value(&self, i: usize, t: usize, c: usize) -> f64 {
        self.values[(i * self.len + t) * self.channels + c]
    }

    /// Per-timestep labels of instance `i`, if present.
    pub fn timestep_labels(&self, i: usize) -> Option<&[u32]> {
        match &self.labels {
            Some(Labels::PerTimestep(l)) => Some(&l[i * self.len..(i + 1) * self.len]),
            _ => None,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            let per = self.len * self.channels;
            return Err(PlantsError::NonFinite(format!(
                "dataset at instance {}, timestep {}",
                pos / per,
                (pos % per) / self.channels
            )));
        }
        Ok(())
    }

    /// New dataset made of the listed instances, labels included.
    pub fn subset(&self, indices: &[usize]) -> TimeSeriesDataset {
        let mut values = Vec::with_capacity(indices.len() * self.len * self.channels);
        for &i in indices {
            values.extend_from_slice(self.instance(i));
        }
        let labels = self.labels.as_ref().map(|l| match l {
            Labels::PerInstance(v) => Labels::PerInstance(indices.iter().map(|&i| v[i]).collect()),
            Labels::PerTimestep(v) => Labels::PerTimestep(
                indices
                    .iter()
                    .flat_map(|&i| v[i * self.len..(i + 1) * self.len].iter().copied())
                    .collect(),
            ),
        });
        TimeSeriesDataset {
            n: indices.len(),
            len: self.len,
            channels: self.channels,
            values,
            labels,
        }
    }

    // ---- binary ----

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let width = if dtype == DType::F64 { 8 } else { 4 };
        let mut out = Vec::with_capacity(34 + self.values.len() * width);
        out.extend_from_slice(DATA_MAGIC);
        for d in [self.n, self.len, self.channels] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(match dtype {
            DType::F64 => 0,
            DType::F32 => 1,
        });
        out.push(match &self.labels {
            None => 0,
            Some(Labels::PerInstance(_)) => 1,
            Some(Labels::PerTimestep(_)) => 2,
        });
        for &v in &self.values {
            match dtype {
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        if let Some(Labels::PerInstance(l) | Labels::PerTimestep(l)) = &self.labels {
            for &v in l {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| PlantsError::Parse {
            line: 0,
            msg: msg.to_string(),
        };
        if bytes.len() < 34 || &bytes[..8] != DATA_MAGIC {
            return Err(bad("missing PLTSDATA header"));
        }
        let rd = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
        let (n, len, channels) = (rd(8), rd(16), rd(24));
        let width = match bytes[32] {
            0 => 8,
            1 => 4,
            _ => return Err(bad("unknown dtype flag")),
        };
        let label_kind = bytes[33];
        let count = n
            .checked_mul(len)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| bad("extents overflow"))?;
        let label_count = match label_kind {
            0 => 0,
            1 => n,
            2 => n * len,
            _ => return Err(bad("unknown label flag")),
        };
        let expected = 34 + count * width + label_count * 4;
        if bytes.len() != expected {
            return Err(bad(&format!(
                "payload size {} does not match header extents (expected {expected})",
                bytes.len()
            )));
        }
        let payload = &bytes[34..34 + count * width];
        let values: Vec<f64> = if width == 8 {
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        } else {
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        let lab: Vec<u32> = bytes[34 + count * width..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ds = TimeSeriesDataset::new(n, len, channels, values)?;
        match label_kind {
            1 => ds.with_labels(Labels::PerInstance(lab)),
            2 => ds.with_labels(Labels::PerTimestep(lab)),
            _ => Ok(ds),
        }
    }

    pub fn write_binary(&self, path: &Path, dtype: DType) -> Result<()> {
        fs::write(path, self.to_bytes(dtype))?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    // ---- csv ----

    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance,timestep");
        for c in 0..self.channels {
            s.push_str(&format!(",c{c}"));
        }
        let per_ts = matches!(self.labels, Some(Labels::PerTimestep(_)));
        if per_ts {
            s.push_str(",label");
        }
        s.push('\n');
        for i in 0..self.n {
            for t in 0..self.len {
                s.push_str(&format!("{i},{t}"));
                for c in 0..self.channels {
                    s.push_str(&format!(",{}", self.value(i, t, c)));
                }
                if let Some(Labels::PerTimestep(l)) = &self.labels {
                    s.push_str(&format!(",{}", l[i * self.len + t]));
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .peekable();

        let mut has_label = false;
        let mut width: Option<usize> = None;
        if let Some(&(_, first)) = rows.peek() {
            let head: Vec<&str> = first.split(',').map(str::trim).collect();
            if head[0].parse::<f64>().is_err() {
                has_label = head.last().is_some_and(|h| h.eq_ignore_ascii_case("label"));
                width = Some(head.len());
                rows.next();
            }
        }

        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut n = 0usize;
        let mut len: Option<usize> = None;
        let mut cur_inst: Option<usize> = None;
        let mut cur_t = 0usize;

        for (line, row) in rows {
            let err = |msg: String| PlantsError::Parse { line, msg };
            let fields: Vec<&str> = row.split(',').map(str::trim).collect();
            let w = *width.get_or_insert(fields.len());
            if fields.len() != w {
                return Err(err(format!("expected {w} columns, found {}", fields.len())));
            }
            let min = if has_label { 4 } else { 3 };
            if w < min {
                return Err(err(format!("need at least {min} columns")));
            }
            let inst: usize = fields[0]
                .parse()
                .map_err(|_| err(format!("bad instance id {:?}", fields[0])))?;
            let t: usize = fields[1]
                .parse()
                .map_err(|_| err(format!("bad timestep {:?}", fields[1])))?;
            if cur_inst != Some(inst) {
                if let Some(prev) = cur_inst {
                    if inst != prev + 1 {
                        return Err(err(format!("instance {inst} out of order after {prev}")));
                    }
                    match len {
                        None => len = Some(cur_t),
                        Some(l) if l != cur_t => {
                            return Err(err(format!(
                                "instance {prev} has {cur_t} timesteps, expected {l}"
                            )))
                        }
                        _ => {}
                    }
                } else if inst != 0 {
                    return Err(err("instance ids must start at 0".into()));
                }
                cur_inst = Some(inst);
                cur_t = 0;
                n += 1;
            }
            if t != cur_t {
                return Err(err(format!("expected timestep {cur_t}, found {t}")));
            }
            let value_cols = if has_label { w - 3 } else { w - 2 };
            for f in &fields[2..2 + value_cols] {
                let v: f64 = f.parse().map_err(|_| err(format!("bad value {f:?}")))?;
                values.push(v);
            }
            if has_label {
                let l: u32 = fields[w - 1]
                    .parse()
                    .map_err(|_| err(format!("bad label {:?}", fields[w - 1])))?;
                labels.push(l);
            }
            cur_t += 1;
        }
        if n == 0 {
            return Err(PlantsError::Parse {
                line: 0,
                msg: "no data rows".into(),
            });
        }
        let l = match len {
            Some(l) if l != cur_t => {
                return Err(PlantsError::Parse {
                    line: text.lines().count(),
                    msg: format!("last instance has {cur_t} timesteps, expected {l}"),
                })
            }
            _ => cur_t,
        };
        let channels = values.len() / (n * l);
        let ds = TimeSeriesDataset::new(n, l, channels, values)?;
        if has_label {
            ds.with_labels(Labels::PerTimestep(labels))
        } else {
            Ok(ds)
        }
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }

    /// Reads by extension: `.csv` as CSV, anything else as binary.
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Self::read_csv(path),
            _ => Self::read_binary(path),
        }
    }
}
