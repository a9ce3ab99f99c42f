use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use plants_core::data::DType;
use plants_core::eval::{
    anomaly_scores, bench_csv, bench_similarity, classify_probe, forecast_probe, gen_hmm_mts, pooled_windows,
    trajectory_pca, BenchKernel, ForecastSeries, HmmSpec, ProbeKind,
};
use plants_core::model::{instance_vector, Model};
use plants_core::periodicity::detect_periods;
use plants_core::training::{
    apply_normalization, periods_csv, standardize, sweep, sweep_csv, train_to_dir, TrainingConfig,
};
use plants_core::{Labels, TimeSeriesDataset};

use crate::{
    AnomalyArgs, BenchArgs, Cli, CliError, CliResult, Command, EncodeArgs, KernelArg, PeriodsArgs, ProbeArgs,
    ProbeKindArg, SweepArgs, SynthArgs, TrainArgs, TrainOverrides, TrajArgs,
};

pub(crate) fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => train(a, cli.seed),
        Command::Encode(a) => encode(a),
        Command::Periods(a) => periods(a),
        Command::Probe(a) => probe(a, cli.seed.unwrap_or(0)),
        Command::Anomaly(a) => anomaly(a),
        Command::Bench(a) => bench(a, cli.seed.unwrap_or(0)),
        Command::Synth(a) => synth(a, cli.seed.unwrap_or(0)),
        Command::Traj(a) => traj(a),
        Command::Sweep(a) => run_sweep(a, cli.seed),
    }
}

/// Loads a dataset; every failure here, including non-finite values, is a
/// data error.
fn load(path: &Path) -> CliResult<TimeSeriesDataset> {
    let ds = TimeSeriesDataset::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    ds.check_finite()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(ds)
}

fn load_model(path: &Path) -> CliResult<Model> {
    Model::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn check_channels(model: &Model, ds: &TimeSeriesDataset) -> CliResult<()> {
    let want = model.config().in_channels;
    if ds.channels() != want {
        return Err(CliError::data(format!(
            "dataset has {} channels, checkpoint expects {want}",
            ds.channels()
        )));
    }
    Ok(())
}

fn normalized(model: &Model, ds: &TimeSeriesDataset) -> TimeSeriesDataset {
    match &model.normalization {
        Some(n) => apply_normalization(ds, n),
        None => ds.clone(),
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("bad {what} entry {v:?}")))
        })
        .collect()
}

fn build_config(o: &TrainOverrides, seed: Option<u64>) -> CliResult<TrainingConfig> {
    let mut text = match &o.config {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut extra: Vec<(String, String)> = Vec::new();
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        extra.push((k.trim().to_string(), v.trim().to_string()));
    }
    let flags: [(&str, Option<String>); 8] = [
        ("alpha", o.alpha.map(|v| v.to_string())),
        ("lambda", o.lambda.map(|v| v.to_string())),
        ("k", o.k.map(|v| v.to_string())),
        ("windows", o.windows.clone()),
        ("epochs", o.epochs.map(|v| v.to_string())),
        ("lr", o.lr.map(|v| v.to_string())),
        ("batch_size", o.batch_size.map(|v| v.to_string())),
        ("seed", seed.map(|v| v.to_string())),
    ];
    extra.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    // A flag choosing k or windows replaces the file's choice of either.
    let overrides_granularity = extra.iter().any(|(k, _)| k == "k" || k == "windows");
    if overrides_granularity {
        text = text
            .lines()
            .filter(|l| {
                let key = l.split('#').next().unwrap_or("").split('=').next().unwrap_or("").trim();
                key != "k" && key != "windows"
            })
            .collect::<Vec<_>>()
            .join("\n");
    }
    let mut cfg = TrainingConfig::from_kv(&text).map_err(|e| CliError::usage(format!("config: {e}")))?;
    for (k, v) in &extra {
        cfg.set(k, v).map_err(|e| CliError::usage(format!("{k}: {e}")))?;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

fn train(a: &TrainArgs, seed: Option<u64>) -> CliResult<()> {
    let cfg = build_config(&a.overrides, seed)?;
    let ds = load(&a.data)?;
    let (art, out) = train_to_dir(&cfg, &ds, &a.out)?;
    let last = out.log.last().map_or(f64::NAN, |e| e.total);
    println!("windows: {:?}", out.periods.windows());
    println!("epochs: {}", out.log.len());
    println!("final loss: {last:.6}");
    println!("checkpoint: {}", art.checkpoint.display());
    println!("loss log: {}", art.loss_log.display());
    println!("manifest: {}", art.manifest.display());
    Ok(())
}

fn encode(a: &EncodeArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let ds = load(&a.data)?;
    check_channels(&model, &ds)?;
    let z = normalized(&model, &ds);
    let (n, len) = (z.n(), z.len());
    let d = model.config().repr_dim();
    let mut full = Vec::with_capacity(n * len * d);
    let mut inst = Vec::with_capacity(n * d);
    for i in 0..n {
        let r = model.encode_full(z.instance(i), len)?;
        inst.extend(instance_vector(&r)?);
        full.extend_from_slice(r.data());
    }
    let full = TimeSeriesDataset::new(n, len, d, full)?;
    let inst = TimeSeriesDataset::new(n, 1, d, inst)?;
    let inst_path = a.out.with_extension("inst");
    full.write_binary(&a.out, DType::F64)?;
    inst.write_binary(&inst_path, DType::F64)?;
    eprintln!(
        "encoded {n} x {len} -> D = {d}; wrote {} and {}",
        a.out.display(),
        inst_path.display()
    );
    Ok(())
}

fn periods(a: &PeriodsArgs) -> CliResult<()> {
    let ds = load(&a.data)?;
    let (z, _) = standardize(&ds);
    let ps = detect_periods(&z, a.k)?;
    print!("{}", periods_csv(&ps));
    Ok(())
}

fn probe(a: &ProbeArgs, seed: u64) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let train_set = load(&a.train)?;
    check_channels(&model, &train_set)?;
    let report = match a.kind {
        ProbeKindArg::Forecast => {
            let horizons: Vec<usize> = parse_list("horizon", &a.horizons)?;
            let z = normalized(&model, &train_set);
            let d = model.config().repr_dim();
            let reprs = (0..z.n())
                .map(|i| model.encode_full(z.instance(i), z.len()))
                .collect::<Result<Vec<_>, _>>()?;
            let series: Vec<ForecastSeries> = reprs
                .iter()
                .enumerate()
                .map(|(i, r)| ForecastSeries {
                    repr: r.data(),
                    dim: d,
                    values: z.instance(i),
                    channels: z.channels(),
                    len: z.len(),
                })
                .collect();
            forecast_probe(&series, &horizons, a.baseline_window, a.ridge, seed)?
        }
        kind => {
            let test_path = a
                .test
                .as_ref()
                .ok_or_else(|| CliError::usage("classification probes need --test"))?;
            let test_set = load(test_path)?;
            check_channels(&model, &test_set)?;
            let (tx, ty) = pooled_windows(&model, &train_set, a.window)?;
            let (vx, vy) = pooled_windows(&model, &test_set, a.window)?;
            let kind = if kind == ProbeKindArg::Knn { ProbeKind::Knn } else { ProbeKind::Linear };
            classify_probe(&tx, &ty, &vx, &vy, kind, seed)?
        }
    };
    emit(a.out.as_deref(), &report.to_csv())?;
    for (name, v) in &report.metrics {
        let base = report.baseline(name).map_or_else(String::new, |b| format!(" (baseline {b:.4})"));
        eprintln!("{name}: {v:.4}{base}");
    }
    Ok(())
}

fn anomaly(a: &AnomalyArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let ds = load(&a.data)?;
    check_channels(&model, &ds)?;
    let which: Vec<usize> = match a.instance {
        Some(i) if i >= ds.n() => {
            return Err(CliError::usage(format!("instance {i} out of range (N = {})", ds.n())));
        }
        Some(i) => vec![i],
        None => (0..ds.n()).collect(),
    };
    let positions: Vec<usize> = (0..ds.len()).collect();
    let mut s = String::from("instance,t,score\n");
    for i in which {
        for (t, v) in anomaly_scores(&model, ds.instance(i), ds.len(), &positions)?.iter().enumerate() {
            let _ = writeln!(s, "{i},{t},{v:.9}");
        }
    }
    emit(a.out.as_deref(), &s)
}

fn bench(a: &BenchArgs, seed: u64) -> CliResult<()> {
    let kernels = match a.kernel {
        KernelArg::Mxcorr => vec![BenchKernel::Mxcorr],
        KernelArg::Dtw => vec![BenchKernel::Dtw],
        KernelArg::Both => vec![BenchKernel::Mxcorr, BenchKernel::Dtw],
    };
    let records = kernels
        .into_iter()
        .map(|k| bench_similarity(a.len, a.n, a.channels, k, a.repeats, seed))
        .collect::<Result<Vec<_>, _>>()?;
    emit(a.out.as_deref(), &bench_csv(&records))?;
    for r in &records {
        eprintln!(
            "{}: precompute {:.3}s, online {:.3}s, total {:.3} ± {:.3}s ({} thread(s))",
            r.kernel.name(),
            r.precompute.mean,
            r.online.mean,
            r.total.mean,
            r.total.std,
            r.threads
        );
    }
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> CliResult<()> {
    let mut spec = HmmSpec::four_state();
    spec.dwell = a.dwell;
    let ds = gen_hmm_mts(&spec, a.n, a.len, a.channels, seed)?;
    let is_csv = a
        .out
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        ds.write_csv(&a.out)?;
    } else {
        ds.write_binary(&a.out, DType::F64)?;
    }
    eprintln!("wrote {} x {} x {} to {}", a.n, a.len, a.channels, a.out.display());
    Ok(())
}

fn traj(a: &TrajArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let ds = load(&a.data)?;
    check_channels(&model, &ds)?;
    if a.instance >= ds.n() {
        return Err(CliError::usage(format!("instance {} out of range (N = {})", a.instance, ds.n())));
    }
    let z = normalized(&model, &ds);
    let r = model.encode_full(z.instance(a.instance), z.len())?;
    let pca = trajectory_pca(r.data(), r.shape()[0], r.shape()[1], 3)?;
    let labels = ds.timestep_labels(a.instance);
    let k = pca.k();
    let mut s = String::from("t,pc1,pc2,pc3,state_label\n");
    for t in 0..pca.rows {
        let _ = write!(s, "{t}");
        for c in 0..3 {
            if c < k {
                let _ = write!(s, ",{:.9}", pca.projection[t * k + c]);
            } else {
                s.push(',');
            }
        }
        match labels {
            Some(l) => {
                let _ = writeln!(s, ",{}", l[t]);
            }
            None => s.push_str(",\n"),
        }
    }
    emit(a.out.as_deref(), &s)?;
    let ratios: Vec<String> = pca.explained.iter().map(|r| format!("{r:.4}")).collect();
    eprintln!("explained variance: {}", ratios.join(", "));
    Ok(())
}

fn run_sweep(a: &SweepArgs, seed: Option<u64>) -> CliResult<()> {
    let base = build_config(&a.overrides, seed)?;
    let ds = load(&a.data)?;
    if !matches!(ds.labels(), Some(Labels::PerTimestep(_))) {
        return Err(CliError::data("sweep needs per-timestep labels"));
    }
    let alphas: Vec<f64> = parse_list("alpha", &a.alphas)?;
    let lambdas: Vec<f64> = parse_list("lambda", &a.lambdas)?;
    let cut = (ds.n() * 3) / 4;
    if cut < 2 || cut == ds.n() {
        return Err(CliError::data("sweep needs at least 3 instances"));
    }
    let fit: Vec<usize> = (0..cut).collect();
    let held: Vec<usize> = (cut..ds.n()).collect();
    let (fit, held) = (ds.subset(&fit), ds.subset(&held));
    let cells = sweep(&base, &fit, &alphas, &lambdas, |out| {
        let (tx, ty) = pooled_windows(&out.model, &fit, a.window)?;
        let (vx, vy) = pooled_windows(&out.model, &held, a.window)?;
        let r = classify_probe(&tx, &ty, &vx, &vy, ProbeKind::Linear, base.seed)?;
        Ok(1.0 - r.metric("accuracy").unwrap_or(0.0))
    })?;
    emit(a.out.as_deref(), &sweep_csv(&cells))?;
    eprintln!("metric: probe error rate (1 - accuracy); rel_change_pct against the best cell");
    Ok(())
}
