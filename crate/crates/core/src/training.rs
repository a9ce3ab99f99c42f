//! Mini-batch self-supervised training.
//!
//! Per run: standardize channels, detect periods once on the training split,
//! then per epoch shuffle, batch, encode, pool windows per granularity, look up
//! or compute MXCorr targets, evaluate the blended objective and take an Adam
//! step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TimeSeriesDataset;
use crate::error::{PlantsError, Result};
use crate::losses::{self, LossOptions, LossWeights};
use crate::model::{Model, ModelConfig, Normalization};
use crate::patching::{segment, PatchView};
use crate::periodicity::{self, PeriodSet};
use crate::similarity::{mxcorr_matrix, SimilarityKind, SimilarityMatrix, WindowStats};
use crate::tensor::{Graph, Tensor, Var};

// ---------------------------------------------------------------------------
// standardization

/// Per-channel zero-mean, unit-variance scaling. Channels with zero variance
/// keep std 1 (values are only centered).
pub fn standardize(dataset: &TimeSeriesDataset) -> (TimeSeriesDataset, Normalization) {
    let c = dataset.channels();
    let count = (dataset.n() * dataset.len()) as f64;
    let mut mean = vec![0.0; c];
    for row in dataset.values().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for row in dataset.values().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|s| {
            let sd = (s / count).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let norm = Normalization { mean, std };
    (apply_normalization(dataset, &norm), norm)
}

pub fn apply_normalization(dataset: &TimeSeriesDataset, norm: &Normalization) -> TimeSeriesDataset {
    let c = dataset.channels();
    let mut out = dataset.clone();
    for row in out.values_mut().chunks_mut(c) {
        for (ch, v) in row.iter_mut().enumerate() {
            *v = (*v - norm.mean[ch]) / norm.std[ch];
        }
    }
    out
}

pub fn destandardize(dataset: &TimeSeriesDataset, norm: &Normalization) -> TimeSeriesDataset {
    let c = dataset.channels();
    let mut out = dataset.clone();
    for row in out.values_mut().chunks_mut(c) {
        for (ch, v) in row.iter_mut().enumerate() {
            *v = *v * norm.std[ch] + norm.mean[ch];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// config

#[derive(Clone, Debug, PartialEq)]
pub enum Granularity {
    /// Detect the top-K periods from the spectrum.
    TopK(usize),
    /// Fixed window sizes.
    Windows(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub weights: LossWeights,
    pub granularity: Granularity,
    /// `None` means `min(128, N)`.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many epochs without relative improvement of
    /// `min_rel_improvement`; 0 disables early stopping.
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
    pub hidden: usize,
    pub depth: usize,
    pub kernel: usize,
    pub latent_dim: usize,
    pub transition_dim: usize,
    pub head_hidden: usize,
    pub options: LossOptions,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            weights: LossWeights::default(),
            granularity: Granularity::TopK(3),
            batch_size: None,
            lr: 1e-3,
            epochs: 50,
            patience: 10,
            min_rel_improvement: 1e-4,
            seed: 0,
            hidden: 32,
            depth: 4,
            kernel: 3,
            latent_dim: 16,
            transition_dim: 16,
            head_hidden: 32,
            options: LossOptions::default(),
        }
    }
}

/// Keys accepted by [`TrainingConfig::from_kv`], in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "alpha",
    "lambda",
    "k",
    "windows",
    "batch_size",
    "lr",
    "epochs",
    "patience",
    "min_rel_improvement",
    "seed",
    "hidden",
    "depth",
    "kernel",
    "latent_dim",
    "transition_dim",
    "head_hidden",
    "temperature",
    "normalize_embeddings",
    "ntp_stop_gradient",
];

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl TrainingConfig {
    /// Classification-style defaults (`α = 0.9`, `λ = 1`).
    pub fn classification() -> Self {
        TrainingConfig {
            weights: LossWeights {
                alpha: 0.9,
                lambda: 1.0,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.weights.alpha, self.weights.lambda)?;
        match &self.granularity {
            Granularity::TopK(0) => return Err(PlantsError::invalid("k must be at least 1")),
            Granularity::Windows(w) if w.is_empty() => {
                return Err(PlantsError::invalid("windows list is empty"))
            }
            _ => {}
        }
        if let Some(b) = self.batch_size {
            if b < 2 {
                return Err(PlantsError::invalid("batch_size must be at least 2"));
            }
        }
        if self.epochs == 0 {
            return Err(PlantsError::invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PlantsError::invalid("lr must be positive"));
        }
        if self.options.temperature <= 0.0 {
            return Err(PlantsError::invalid("temperature must be positive"));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| PlantsError::invalid(format!("bad value {v:?} for {key}")))
        }
        match key {
            "alpha" => self.weights.alpha = num(key, value)?,
            "lambda" => self.weights.lambda = num(key, value)?,
            "k" => self.granularity = Granularity::TopK(num(key, value)?),
            "windows" => {
                let ws = value
                    .trim_matches(|c| c == '[' || c == ']')
                    .split(',')
                    .map(|s| num::<usize>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.granularity = Granularity::Windows(ws);
            }
            "batch_size" => self.batch_size = Some(num(key, value)?),
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "min_rel_improvement" => self.min_rel_improvement = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "kernel" => self.kernel = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "transition_dim" => self.transition_dim = num(key, value)?,
            "head_hidden" => self.head_hidden = num(key, value)?,
            "temperature" => self.options.temperature = num(key, value)?,
            "normalize_embeddings" | "ntp_stop_gradient" => {
                let b = parse_bool(value)
                    .ok_or_else(|| PlantsError::invalid(format!("bad boolean {value:?} for {key}")))?;
                if key == "normalize_embeddings" {
                    self.options.normalize_embeddings = b;
                } else {
                    self.options.ntp_stop_gradient = b;
                }
            }
            _ => return Err(PlantsError::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file (`#` starts a comment). Setting both
    /// `k` and `windows` is an error.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainingConfig::default();
        let (mut saw_k, mut saw_windows) = (false, false);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| PlantsError::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let key = key.trim();
            saw_k |= key == "k";
            saw_windows |= key == "windows";
            cfg.set(key, value.trim()).map_err(|e| PlantsError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        if saw_k && saw_windows {
            return Err(PlantsError::invalid("set exactly one of k and windows"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every key so the file reproduces the run.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alpha = {}", self.weights.alpha);
        let _ = writeln!(s, "lambda = {}", self.weights.lambda);
        match &self.granularity {
            Granularity::TopK(k) => {
                let _ = writeln!(s, "k = {k}");
            }
            Granularity::Windows(w) => {
                let list: Vec<String> = w.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "windows = [{}]", list.join(","));
            }
        }
        if let Some(b) = self.batch_size {
            let _ = writeln!(s, "batch_size = {b}");
        }
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "min_rel_improvement = {}", self.min_rel_improvement);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "kernel = {}", self.kernel);
        let _ = writeln!(s, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(s, "transition_dim = {}", self.transition_dim);
        let _ = writeln!(s, "head_hidden = {}", self.head_hidden);
        let _ = writeln!(s, "temperature = {}", self.options.temperature);
        let _ = writeln!(s, "normalize_embeddings = {}", self.options.normalize_embeddings);
        let _ = writeln!(s, "ntp_stop_gradient = {}", self.options.ntp_stop_gradient);
        s
    }

    pub fn model_config(&self, in_channels: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            hidden: self.hidden,
            depth: self.depth,
            kernel: self.kernel,
            latent_dim: self.latent_dim,
            transition_dim: self.transition_dim,
            head_hidden: self.head_hidden,
            seed: self.seed,
        }
    }

    pub fn effective_batch_size(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(128).min(n)
    }
}

// ---------------------------------------------------------------------------
// optimizer

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(PlantsError::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(PlantsError::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// similarity cache

/// Per-run store of window statistics and global similarity matrices, keyed
/// by (granularity, instance). Global matrices depend only on raw inputs and
/// are computed at most once per key.
pub struct SimilarityCache {
    windows: Vec<usize>,
    stats: Vec<Vec<Option<Vec<WindowStats>>>>,
    global: Vec<Vec<Option<Option<SimilarityMatrix>>>>,
    pub global_computed: usize,
    pub global_hits: usize,
}

impl SimilarityCache {
    pub fn new(periods: &PeriodSet, n: usize) -> Self {
        let k = periods.k();
        SimilarityCache {
            windows: periods.windows(),
            stats: vec![vec![None; n]; k],
            global: vec![vec![None; n]; k],
            global_computed: 0,
            global_hits: 0,
        }
    }

    fn view(data: &TimeSeriesDataset, i: usize, w: usize) -> Result<PatchView> {
        segment(data.instance(i), data.len(), data.channels(), w)
    }

    /// Window statistics of the usable windows of instance `i`.
    pub fn stats(&mut self, data: &TimeSeriesDataset, k: usize, i: usize) -> Result<&[WindowStats]> {
        if self.stats[k][i].is_none() {
            let w = self.windows[k];
            let view = Self::view(data, i, w)?;
            let s = (0..view.usable_count())
                .map(|m| WindowStats::new(view.patch(m), w, data.channels()))
                .collect::<Result<Vec<_>>>()?;
            self.stats[k][i] = Some(s);
        }
        Ok(self.stats[k][i].as_deref().unwrap())
    }

    /// Global matrix of instance `i` at granularity `k`, or `None` with fewer
    /// than two usable windows.
    pub fn global(
        &mut self,
        data: &TimeSeriesDataset,
        k: usize,
        i: usize,
    ) -> Result<Option<&SimilarityMatrix>> {
        if self.global[k][i].is_some() {
            self.global_hits += 1;
        } else {
            let stats = self.stats(data, k, i)?;
            let m = if stats.len() >= 2 {
                let refs: Vec<&WindowStats> = stats.iter().collect();
                Some(mxcorr_matrix(&refs, SimilarityKind::Global)?)
            } else {
                None
            };
            self.global_computed += 1;
            self.global[k][i] = Some(m);
        }
        Ok(self.global[k][i].as_ref().unwrap().as_ref())
    }

    /// Local matrices for every usable window of the batch.
    pub fn local(&mut self, data: &TimeSeriesDataset, k: usize, batch: &[usize]) -> Result<Vec<SimilarityMatrix>> {
        for &i in batch {
            self.stats(data, k, i)?;
        }
        let usable = self.stats[k][batch[0]].as_ref().unwrap().len();
        (0..usable)
            .map(|m| {
                let refs: Vec<&WindowStats> = batch
                    .iter()
                    .map(|&i| &self.stats[k][i].as_ref().unwrap()[m])
                    .collect();
                mxcorr_matrix(&refs, SimilarityKind::Local)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// objective

/// Loss components of one granularity for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GranularityLoss {
    pub window: usize,
    pub local: f64,
    pub global: Option<f64>,
    pub ntp: Option<f64>,
    pub contrastive: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub granularities: Vec<GranularityLoss>,
}

/// Objective graph for one batch.
pub struct Objective {
    pub loss: Var,
    /// Parameter leaves, in [`Model::params`] order.
    pub params: Vec<Var>,
    pub logged: BatchLoss,
}

/// Builds the full objective for `batch` on `g` and returns the scalar loss
/// node plus its logged components. `data` must already be standardized.
pub fn build_objective(
    g: &mut Graph,
    model: &Model,
    data: &TimeSeriesDataset,
    batch: &[usize],
    periods: &PeriodSet,
    cache: &mut SimilarityCache,
    config: &TrainingConfig,
) -> Result<Objective> {
    let (len, c) = (data.len(), data.channels());
    if batch.len() < 2 {
        return Err(PlantsError::invalid("batch needs at least 2 instances"));
    }
    let LossWeights { alpha, lambda } = config.weights;
    let bound = model.bind(g, true);
    let mut xs = Vec::with_capacity(batch.len() * len * c);
    for &i in batch {
        xs.extend_from_slice(data.instance(i));
    }
    let x = g.constant(Tensor::new(vec![batch.len(), len, c], xs)?);
    let u_full = model.latent_graph(g, &bound, x)?;
    let v_full = if lambda < 1.0 {
        Some(model.transition_graph(g, &bound, x)?)
    } else {
        None
    };

    let mut terms = Vec::with_capacity(periods.k());
    let mut logged = Vec::with_capacity(periods.k());
    for (k, w) in periods.windows().into_iter().enumerate() {
        let u = g.window_mean(u_full, w)?;
        let usable = cache.stats(data, k, batch[0])?.len();
        if usable == 0 {
            return Err(PlantsError::invalid(format!("window {w} leaves no usable windows")));
        }
        let local_sims = cache.local(data, k, batch)?;
        let mut globals = Vec::with_capacity(batch.len());
        if alpha < 1.0 {
            for &i in batch {
                globals.push(cache.global(data, k, i)?.cloned());
            }
        } else {
            globals.resize(batch.len(), None);
        }
        let global_refs: Vec<Option<&SimilarityMatrix>> = globals.iter().map(|m| m.as_ref()).collect();
        let ct = losses::contrastive_terms(g, u, usable, &local_sims, &global_refs, alpha, &config.options)?;

        let ntp = match v_full {
            Some(v_full) => {
                let v = g.window_mean(v_full, w)?;
                losses::ntp_loss(g, model, &bound, u, v, usable, config.options.ntp_stop_gradient)?
            }
            None => None,
        };
        let term = match ntp {
            Some(t) => {
                let a = g.scale(ct.blended, lambda);
                let b = g.scale(t, 1.0 - lambda);
                g.add(a, b)?
            }
            None => ct.blended,
        };
        terms.push(term);
        logged.push(GranularityLoss {
            window: w,
            local: ct.local_mean,
            global: ct.global_mean,
            ntp: ntp.map(|t| g.value(t).data()[0]),
            contrastive: g.value(ct.blended).data()[0],
        });
    }
    let mut flat = Vec::with_capacity(terms.len());
    for &t in &terms {
        flat.push(g.reshape(t, &[1])?);
    }
    let stacked = g.concat(&flat, 0)?;
    let total = g.mean(stacked);
    let value = g.value(total).data()[0];
    if !value.is_finite() {
        return Err(PlantsError::NonFinite("training loss".into()));
    }
    Ok(Objective {
        loss: total,
        params: bound.vars().to_vec(),
        logged: BatchLoss {
            total: value,
            granularities: logged,
        },
    })
}

/// Objective value for one batch without updating anything.
pub fn evaluate_batch(
    model: &Model,
    data: &TimeSeriesDataset,
    batch: &[usize],
    periods: &PeriodSet,
    cache: &mut SimilarityCache,
    config: &TrainingConfig,
) -> Result<BatchLoss> {
    let mut g = Graph::new();
    Ok(build_objective(&mut g, model, data, batch, periods, cache, config)?.logged)
}

/// One forward/backward/Adam update on `batch`.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    data: &TimeSeriesDataset,
    batch: &[usize],
    periods: &PeriodSet,
    cache: &mut SimilarityCache,
    config: &TrainingConfig,
) -> Result<BatchLoss> {
    let mut g = Graph::new();
    let obj = build_objective(&mut g, model, data, batch, periods, cache, config)?;
    g.backward(obj.loss)?;
    let grads: Vec<Tensor> = obj.params.iter().map(|&v| g.grad(v)).collect();
    adam_step(model.params_mut(), &grads, adam, config.lr)?;
    Ok(obj.logged)
}

// ---------------------------------------------------------------------------
// loop

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub granularities: Vec<GranularityLoss>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub periods: PeriodSet,
    pub normalization: Normalization,
    pub log: Vec<EpochLog>,
    pub global_computed: usize,
    pub global_hits: usize,
}

/// Resolves the granularities for a standardized training split.
pub fn resolve_periods(config: &TrainingConfig, data: &TimeSeriesDataset) -> Result<PeriodSet> {
    match &config.granularity {
        Granularity::Windows(w) => PeriodSet::from_windows(w, data.len()),
        Granularity::TopK(k) => periodicity::detect_periods(data, *k),
    }
}

pub fn train(config: &TrainingConfig, dataset: &TimeSeriesDataset) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.check_finite()?;
    if dataset.n() < 2 {
        return Err(PlantsError::invalid("training needs at least 2 instances"));
    }
    let (data, normalization) = standardize(dataset);
    let periods = resolve_periods(config, &data)?;
    log::info!("granularities: {:?}", periods.windows());

    let mut model = Model::new(config.model_config(data.channels()))?;
    model.normalization = Some(normalization.clone());
    let mut adam = AdamState::new(model.params());
    let mut cache = SimilarityCache::new(&periods, data.n());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let bsz = config.effective_batch_size(data.n());
    let mut order: Vec<usize> = (0..data.n()).collect();

    let mut log = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums: Option<EpochLog> = None;
        let mut batches = 0usize;
        for batch in order.chunks(bsz) {
            if batch.len() < 2 {
                continue;
            }
            let bl = train_step(&mut model, &mut adam, &data, batch, &periods, &mut cache, config)?;
            accumulate(&mut sums, epoch, &bl);
            batches += 1;
        }
        let mut entry = sums.ok_or_else(|| PlantsError::invalid("no batch of size ≥ 2"))?;
        scale_log(&mut entry, batches as f64);
        log::info!("epoch {epoch}: loss {:.6}", entry.total);
        let total = entry.total;
        log.push(entry);

        if !best.is_finite() || total < best - config.min_rel_improvement * best.abs() {
            best = total;
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        periods,
        normalization,
        log,
        global_computed: cache.global_computed,
        global_hits: cache.global_hits,
    })
}

fn accumulate(sums: &mut Option<EpochLog>, epoch: usize, bl: &BatchLoss) {
    match sums {
        None => {
            *sums = Some(EpochLog {
                epoch,
                total: bl.total,
                granularities: bl.granularities.clone(),
            })
        }
        Some(s) => {
            s.total += bl.total;
            for (a, b) in s.granularities.iter_mut().zip(&bl.granularities) {
                a.local += b.local;
                a.contrastive += b.contrastive;
                a.global = a.global.zip(b.global).map(|(x, y)| x + y);
                a.ntp = a.ntp.zip(b.ntp).map(|(x, y)| x + y);
            }
        }
    }
}

fn scale_log(e: &mut EpochLog, n: f64) {
    e.total /= n;
    for g in &mut e.granularities {
        g.local /= n;
        g.contrastive /= n;
        g.global = g.global.map(|v| v / n);
        g.ntp = g.ntp.map(|v| v / n);
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "skipped".to_string(), |x| format!("{x:.9}"))
}

/// CSV with one row per (epoch, granularity) plus an `all` row per epoch.
pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,granularity,window,local,global,ntp,contrastive,total\n");
    for e in log {
        for (k, g) in e.granularities.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{:.9},{},{},{:.9},",
                e.epoch,
                k,
                g.window,
                g.local,
                fmt_opt(g.global),
                fmt_opt(g.ntp),
                g.contrastive
            );
        }
        let _ = writeln!(s, "{},all,,,,,,{:.9}", e.epoch, e.total);
    }
    s
}

pub fn periods_csv(periods: &PeriodSet) -> String {
    let mut s = String::from("frequency,amplitude,window\n");
    for p in periods.periods() {
        let f = p.frequency.map_or_else(|| "explicit".to_string(), |f| f.to_string());
        let a = if p.amplitude.is_nan() {
            String::new()
        } else {
            format!("{:.9}", p.amplitude)
        };
        let _ = writeln!(s, "{f},{a},{}", p.window);
    }
    s
}

/// Files written by [`train_to_dir`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub periods: PathBuf,
    pub config: PathBuf,
    pub manifest: PathBuf,
}

pub fn train_to_dir(config: &TrainingConfig, dataset: &TimeSeriesDataset, out_dir: &Path) -> Result<(RunArtifacts, TrainOutcome)> {
    let outcome = train(config, dataset)?;
    fs::create_dir_all(out_dir)?;
    let art = RunArtifacts {
        checkpoint: out_dir.join("model.plants"),
        loss_log: out_dir.join("loss.csv"),
        periods: out_dir.join("periods.csv"),
        config: out_dir.join("config.txt"),
        manifest: out_dir.join("manifest.txt"),
    };
    outcome.model.save(&art.checkpoint)?;
    fs::write(&art.loss_log, loss_csv(&outcome.log))?;
    fs::write(&art.periods, periods_csv(&outcome.periods))?;
    fs::write(&art.config, config.to_kv())?;
    let mut m = String::new();
    let _ = writeln!(m, "checkpoint = {}", art.checkpoint.display());
    let _ = writeln!(m, "loss_log = {}", art.loss_log.display());
    let _ = writeln!(m, "periods = {}", art.periods.display());
    let _ = writeln!(m, "config = {}", art.config.display());
    let _ = writeln!(m, "instances = {}", dataset.n());
    let _ = writeln!(m, "length = {}", dataset.len());
    let _ = writeln!(m, "channels = {}", dataset.channels());
    let _ = writeln!(m, "windows = {:?}", outcome.periods.windows());
    let _ = writeln!(m, "epochs_run = {}", outcome.log.len());
    let _ = writeln!(
        m,
        "final_loss = {}",
        outcome.log.last().map_or(f64::NAN, |e| e.total)
    );
    let _ = writeln!(m, "channel_mean = {:?}", outcome.normalization.mean);
    let _ = writeln!(m, "channel_std = {:?}", outcome.normalization.std);
    fs::write(&art.manifest, m)?;
    Ok((art, outcome))
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub lambda: f64,
    pub metric: f64,
    /// Percentage change relative to the best (lowest) cell.
    pub rel_change: f64,
}

/// Trains once per `(α, λ)` grid cell and reports each cell's metric as a
/// relative change against the best cell. Lower metric is better.
pub fn sweep<F>(
    base: &TrainingConfig,
    dataset: &TimeSeriesDataset,
    alphas: &[f64],
    lambdas: &[f64],
    metric: F,
) -> Result<Vec<SweepCell>>
where
    F: Fn(&TrainOutcome) -> Result<f64>,
{
    let mut cells = Vec::with_capacity(alphas.len() * lambdas.len());
    for &alpha in alphas {
        for &lambda in lambdas {
            let cfg = TrainingConfig {
                weights: LossWeights::new(alpha, lambda)?,
                ..base.clone()
            };
            let out = train(&cfg, dataset)?;
            cells.push(SweepCell {
                alpha,
                lambda,
                metric: metric(&out)?,
                rel_change: 0.0,
            });
        }
    }
    let best = cells.iter().map(|c| c.metric).fold(f64::INFINITY, f64::min);
    for c in &mut cells {
        c.rel_change = if best.abs() > 0.0 {
            100.0 * (c.metric - best) / best.abs()
        } else {
            0.0
        };
    }
    Ok(cells)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("alpha,lambda,metric,rel_change_pct\n");
    for c in cells {
        let _ = writeln!(s, "{},{},{:.9},{:.4}", c.alpha, c.lambda, c.metric, c.rel_change);
    }
    s
}
