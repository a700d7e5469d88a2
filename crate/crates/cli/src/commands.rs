use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Axis};
use nnn_core::attribution::{attribute as attribute_with, mix_error, pause_simulation, Method, UnrollConfig};
use nnn_core::config::{Precision, RunConfig};
use nnn_core::io::save_nnt;
use nnn_core::metrics::{evaluate, predict_levels};
use nnn_core::pipeline::{fit, make_split, model_input};
use nnn_core::probe::{landscape, write_landscape_csv, Probe};
use nnn_core::sim::{simulate as run_sim, GroundTruth, SimConfig, REPORTED};
use nnn_core::train::{l1_sweep, SweepSpec, TrainReport};
use nnn_core::{MediaTensor, Nnn, NnnError, Result, Scalar};
use serde::Serialize;

use crate::rundir::{dataset_ref, io_at, load_dataset, load_run, run_precision, Loaded, RunDir};
use crate::{ConfigArgs, MethodArg, Variance};

macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn csv_err(e: csv::Error) -> NnnError {
    NnnError::Format(e.to_string())
}

fn to_csv<S: Serialize>(rows: impl IntoIterator<Item = S>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| NnnError::Format(e.to_string()))
}

pub fn build_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            if !p.is_file() {
                return Err(io_at(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| NnnError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    let env_seed = std::env::var("NNN_SEED").ok();
    if let Some(s) = env_seed {
        let seed = s.trim().parse().map_err(|_| NnnError::Config(format!("NNN_SEED `{s}` is not an integer")))?;
        cfg.set_seed(seed);
    }
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn simulate(out: &Path, variance: Variance, seed: u64, geos: Option<usize>, weeks: Option<usize>, dim: Option<usize>) -> Result<PathBuf> {
    let seed = match std::env::var("NNN_SEED") {
        Ok(s) => s.trim().parse().map_err(|_| NnnError::Config(format!("NNN_SEED `{s}` is not an integer")))?,
        Err(_) => seed,
    };
    let mut sc = match variance {
        Variance::High => SimConfig::high_variance(seed),
        Variance::Low => SimConfig::low_variance(seed),
    };
    sc.geos = geos.unwrap_or(sc.geos);
    sc.weeks = weeks.unwrap_or(sc.weeks);
    sc.dim = dim.unwrap_or(sc.dim);
    let sim = run_sim(&sc)?;
    let mut dir = RunDir::create(out, "simulate")?;
    let data = dir.file("dataset.nnt");
    save_nnt(&sim.tensor, &data)?;
    dir.manifest.artifacts.push("dataset.nnt".into());
    dir.manifest.dataset = Some(dataset_ref(&data)?);
    dir.write_json("truth.json", &sim.truth(0..sc.weeks))?;
    dir.write_json("sim_config.json", &sc)?;
    dir.finish()
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    phase: usize,
    lr: f64,
    grad_norm: f64,
    total: f64,
    sales: f64,
    search: f64,
    l1: f64,
}

#[derive(Serialize)]
struct NationalRow {
    week: usize,
    time_index: i64,
    split: &'static str,
    predicted: f64,
    actual: f64,
}

fn write_trace(dir: &mut RunDir, report: &TrainReport) -> Result<()> {
    let rows = report.trace.iter().map(|r| TraceRow {
        step: r.step,
        phase: r.phase,
        lr: r.lr,
        grad_norm: r.grad_norm,
        total: r.loss.total,
        sales: r.loss.sales,
        search: r.loss.search,
        l1: r.loss.l1,
    });
    dir.write("loss_trace.csv", to_csv(rows)?)?;
    Ok(())
}

fn write_national<T: Scalar>(dir: &mut RunDir, model: &Nnn<T>, x: &MediaTensor<T>, train_end: usize, test_start: usize) -> Result<()> {
    let pred = predict_levels(model, x)?.sum_axis(Axis(0));
    let actual = x.target_values().mapv(|v| v.f64()).sum_axis(Axis(0));
    let rows = (0..x.weeks()).map(|t| NationalRow {
        week: t,
        time_index: x.time_index()[t],
        split: if t <= train_end {
            "train"
        } else if t >= test_start {
            "test"
        } else {
            "gap"
        },
        predicted: pred[t],
        actual: actual[t],
    });
    dir.write("national_predictions.csv", to_csv(rows)?)?;
    Ok(())
}

pub fn train(out: &Path, dataset: &Path, args: &ConfigArgs) -> Result<PathBuf> {
    let cfg = build_config(args)?;
    with_precision!(cfg.precision, train_as(out, dataset, &cfg))
}

fn test_start(split: &nnn_core::tensor::Split, weeks: usize) -> usize {
    split.test.weeks().first().copied().unwrap_or(weeks)
}

fn train_as<T: Scalar>(out: &Path, dataset: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let ds = dataset_ref(dataset)?;
    let x = model_input(&load_dataset::<T>(dataset)?, cfg);
    let fitted = fit(&x, cfg)?;
    let mut dir = RunDir::create(out, "train")?;
    dir.manifest.dataset = Some(ds);
    dir.record_config(cfg)?;
    dir.record_checkpoint(&fitted.model)?;
    dir.write_json("metrics.json", &fitted.metrics)?;
    write_trace(&mut dir, &fitted.report)?;
    let ts = test_start(&fitted.split, x.weeks());
    write_national(&mut dir, &fitted.model, &x, fitted.split.train_end(), ts)?;
    dir.finish()
}

pub fn sweep(out: &Path, dataset: &Path, args: &ConfigArgs, lambdas: &[f64], workers: Option<usize>, truth: Option<&Path>) -> Result<PathBuf> {
    let mut cfg = build_config(args)?;
    if !lambdas.is_empty() {
        cfg.sweep.lambdas = lambdas.to_vec();
    }
    if let Some(w) = workers {
        cfg.sweep.workers = w;
    }
    cfg.validate()?;
    let truth = truth.map(read_truth).transpose()?;
    with_precision!(cfg.precision, sweep_as(out, dataset, &cfg, truth.as_ref()))
}

fn read_truth(p: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(p).map_err(|e| io_at(p, e))?;
    serde_json::from_str(&text).map_err(|e| NnnError::Format(format!("{}: {e}", p.display())))
}

fn reported_channels<T: Scalar>(x: &MediaTensor<T>, names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        REPORTED.iter().map(|n| x.channel_index(n)).collect()
    } else {
        names.iter().map(|n| x.channel_index(n)).collect()
    }
}

fn sweep_as<T: Scalar>(out: &Path, dataset: &Path, cfg: &RunConfig, truth: Option<&GroundTruth>) -> Result<PathBuf> {
    let ds = dataset_ref(dataset)?;
    let x = model_input(&load_dataset::<T>(dataset)?, cfg);
    let sp = make_split(x.weeks(), x.geos(), cfg)?;
    let spec = SweepSpec {
        lambdas: &cfg.sweep.lambdas,
        model: &cfg.model,
        train: &cfg.train,
        phases: &cfg.phases,
        workers: cfg.sweep.workers,
    };
    let end = sp.train_end() + 1;
    let (report, models) = l1_sweep(&x, &sp, &spec, |m| match truth {
        None => Ok(None),
        Some(t) => {
            let chans = t.channels.iter().map(|n| x.channel_index(n)).collect::<Result<Vec<_>>>()?;
            let r = attribute_with(m, &x, &chans, Method::ZeroOut, &cfg.unroll, end)?;
            let reference = nnn_core::sim::mix_percent(&t.direct_sales_in(0..end));
            Ok(Some(mix_error(&r.mix, &reference)))
        }
    })?;
    let mut dir = RunDir::create(out, "sweep")?;
    dir.manifest.dataset = Some(ds);
    let best = &models[report.best];
    let mut best_cfg = cfg.clone();
    best_cfg.model.l1 = report.rows[report.best].l1;
    dir.record_config(&best_cfg)?;
    dir.record_checkpoint(best)?;
    dir.write_json("sweep.json", &report)?;
    dir.write_json("metrics.json", &report.rows[report.best].metrics)?;
    #[derive(Serialize)]
    struct Row {
        l1: f64,
        val_mape: Option<f64>,
        val_r2: Option<f64>,
        test_mape: Option<f64>,
        test_r2: Option<f64>,
        sparsity: f64,
        attribution_error: Option<f64>,
    }
    let rows = report.rows.iter().map(|r| Row {
        l1: r.l1,
        val_mape: r.metrics.val.map(|s| s.mape()),
        val_r2: r.metrics.val.map(|s| s.r2()),
        test_mape: r.metrics.test.map(|s| s.mape()),
        test_r2: r.metrics.test.map(|s| s.r2()),
        sparsity: r.metrics.sparsity,
        attribution_error: r.attribution_error,
    });
    dir.write("sweep.csv", to_csv(rows)?)?;
    let ts = test_start(&sp, x.weeks());
    write_national(&mut dir, best, &x, sp.train_end(), ts)?;
    dir.finish()
}

fn derived(out: &Path, command: &str, run: &Loaded<impl Scalar>) -> Result<RunDir> {
    let mut dir = RunDir::create(out, command)?;
    dir.manifest.source_run = Some(run.dir.canonicalize().map_err(|e| io_at(&run.dir, e))?);
    dir.manifest.dataset = run.manifest.dataset.clone();
    dir.record_config(&run.cfg)?;
    Ok(dir)
}

pub fn eval(out: &Path, run: &Path) -> Result<PathBuf> {
    with_precision!(run_precision(run)?, eval_as(out, run))
}

fn eval_as<T: Scalar>(out: &Path, run: &Path) -> Result<PathBuf> {
    let r = load_run::<T>(run)?;
    let metrics = evaluate(&r.model, &r.x, &r.split)?;
    let mut dir = derived(out, "eval", &r)?;
    dir.write_json("metrics.json", &metrics)?;
    let ts = test_start(&r.split, r.x.weeks());
    write_national(&mut dir, &r.model, &r.x, r.split.train_end(), ts)?;
    dir.finish()
}

pub fn attribute(out: &Path, run: &Path, method: MethodArg, channels: &[String], period_end: Option<usize>, truth: Option<&Path>) -> Result<PathBuf> {
    let truth = truth.map(read_truth).transpose()?;
    with_precision!(run_precision(run)?, attribute_as(out, run, method, channels, period_end, truth.as_ref()))
}

#[derive(Serialize)]
struct AttributionOut {
    report: nnn_core::attribution::AttributionReport,
    period_end: usize,
    direct_mix: Option<Vec<f64>>,
    total_mix: Option<Vec<f64>>,
    error_vs_direct: Option<f64>,
}

fn attribute_as<T: Scalar>(out: &Path, run: &Path, method: MethodArg, channels: &[String], period_end: Option<usize>, truth: Option<&GroundTruth>) -> Result<PathBuf> {
    let r = load_run::<T>(run)?;
    let chans = reported_channels(&r.x, channels)?;
    let end = period_end.unwrap_or(r.split.train_end() + 1);
    let method = match method {
        MethodArg::ZeroOut => Method::ZeroOut,
        MethodArg::Ar => Method::ArUnroll,
    };
    let unroll: UnrollConfig = r.cfg.unroll.clone();
    let report = attribute_with(&r.model, &r.x, &chans, method, &unroll, end)?;
    let (direct_mix, total_mix) = match truth {
        Some(t) if t.channels == report.channels => (
            Some(nnn_core::sim::mix_percent(&t.direct_sales_in(0..end))),
            Some(nnn_core::sim::mix_percent(&t.total_sales_in(0..end))),
        ),
        Some(_) => return Err(NnnError::Config("truth channels differ from the attributed channels".into())),
        None => (None, None),
    };
    let error_vs_direct = direct_mix.as_ref().map(|d| mix_error(&report.mix, d));
    let mut dir = derived(out, "attribute", &r)?;
    dir.write_json(
        "attribution.json",
        &AttributionOut {
            report,
            period_end: end,
            direct_mix,
            total_mix,
            error_vs_direct,
        },
    )?;
    dir.finish()
}

pub fn pause(out: &Path, run: &Path, channel: &str, start: usize, len: usize) -> Result<PathBuf> {
    with_precision!(run_precision(run)?, pause_as(out, run, channel, start, len))
}

fn pause_as<T: Scalar>(out: &Path, run: &Path, channel: &str, start: usize, len: usize) -> Result<PathBuf> {
    let r = load_run::<T>(run)?;
    let c = r.x.channel_index(channel)?;
    let rep = pause_simulation(&r.model, &r.x, c, start, len)?;
    #[derive(Serialize)]
    struct Row {
        week: usize,
        time_index: i64,
        baseline: f64,
        standard: f64,
        ar_baseline: f64,
        ar: f64,
    }
    let rows: Vec<Row> = (0..len)
        .map(|k| Row {
            week: start + k,
            time_index: rep.weeks[k],
            baseline: rep.baseline[k],
            standard: rep.standard[k],
            ar_baseline: rep.ar_baseline[k],
            ar: rep.ar[k],
        })
        .collect();
    let mut dir = derived(out, "pause", &r)?;
    dir.write("pause.csv", to_csv(rows)?)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        #[serde(flatten)]
        report: &'a nnn_core::attribution::PauseReport,
        standard_drop: f64,
        ar_drop: f64,
    }
    dir.write_json(
        "pause.json",
        &Summary {
            report: &rep,
            standard_drop: rep.standard_drop(),
            ar_drop: rep.ar_drop(),
        },
    )?;
    dir.finish()
}

/// `label,v0,v1,...` rows.
fn read_embeddings(path: &Path) -> Result<Vec<(String, Array1<f64>)>> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_at(path, io),
            k => NnnError::Format(format!("{k:?}")),
        })?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let label = rec.get(0).unwrap_or_default().to_string();
        let v = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>().map_err(|_| NnnError::Format(format!("{}: `{s}` is not a number", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        if label == "label" && v.is_empty() {
            continue;
        }
        rows.push((label, Array1::from(v)));
    }
    Ok(rows)
}

pub fn probe(out: &Path, run: &Path, channel: Option<&str>, embeddings: Option<&Path>, truth: Option<&Path>) -> Result<PathBuf> {
    let truth = truth.map(read_truth).transpose()?;
    let embeddings = embeddings.map(read_embeddings).transpose()?;
    with_precision!(run_precision(run)?, probe_as(out, run, channel, embeddings, truth.as_ref()))
}

fn probe_as<T: Scalar>(out: &Path, run: &Path, channel: Option<&str>, embeddings: Option<Vec<(String, Array1<f64>)>>, truth: Option<&GroundTruth>) -> Result<PathBuf> {
    let r = load_run::<T>(run)?;
    let mut pc = r.cfg.probe.clone();
    if let Some(c) = channel {
        pc.target = c.to_string();
    }
    let probe = Probe::new(&r.x, &pc, &r.split.train)?;
    let mut named: Vec<(String, Array1<f64>)> = embeddings.unwrap_or_default();
    if let Some(t) = truth {
        named.push(("best".into(), Array1::from(t.e_best.clone())));
        named.push(("worst".into(), Array1::from(t.e_worst.clone())));
    }
    if named.is_empty() {
        return Err(NnnError::Empty("nothing to probe: pass --embeddings or --truth".into()));
    }
    #[derive(Serialize)]
    struct Row {
        label: String,
        score: f64,
    }
    let rows = named
        .iter()
        .map(|(l, v)| Ok(Row { label: l.clone(), score: probe.score(&r.model, v.view())? }))
        .collect::<Result<Vec<_>>>()?;
    let mut dir = derived(out, "probe", &r)?;
    dir.write("scores.csv", to_csv(rows)?)?;
    let find = |l: &str| named.iter().rev().find(|(n, _)| n == l).map(|(_, v)| v.clone());
    if let (Some(b), Some(w)) = (find("best"), find("worst")) {
        let pts = landscape(&r.model, &probe, b.view(), w.view(), &pc)?;
        let mut buf = Vec::new();
        write_landscape_csv(&pts, &mut buf)?;
        dir.write("landscape.csv", buf)?;
    }
    dir.finish()
}

pub fn inspect_attention(out: &Path, run: &Path, weeks: Option<usize>) -> Result<PathBuf> {
    with_precision!(run_precision(run)?, inspect_as(out, run, weeks))
}

fn inspect_as<T: Scalar>(out: &Path, run: &Path, weeks: Option<usize>) -> Result<PathBuf> {
    let r = load_run::<T>(run)?;
    let weeks = weeks.unwrap_or(r.x.weeks());
    let names: Vec<String> = r.x.channels().iter().map(|c| c.name.clone()).collect();
    #[derive(Serialize)]
    struct ChannelRow<'a> {
        layer: usize,
        to: &'a str,
        from: &'a str,
        weight: f64,
    }
    #[derive(Serialize)]
    struct LagRow<'a> {
        layer: usize,
        channel: &'a str,
        lag: usize,
        weight: f64,
    }
    let mut chan_rows = Vec::new();
    let mut lag_rows = Vec::new();
    for (li, layer) in r.model.arch.layers.iter().enumerate() {
        let cw = layer.attention.channel_weights_for(&r.model.params);
        for ((i, j), w) in cw.indexed_iter() {
            chan_rows.push(ChannelRow {
                layer: li,
                to: &names[i],
                from: &names[j],
                weight: w.f64(),
            });
        }
        // Weights seen by the last week, by lag.
        let tw = layer.attention.time_weights_for(&r.model.params, weeks);
        let last = weeks - 1;
        for (c, name) in names.iter().enumerate() {
            let row = tw.slice(s![last, c, ..]);
            for lag in 0..weeks {
                let w = row[last - lag].f64();
                if w != 0.0 {
                    lag_rows.push(LagRow {
                        layer: li,
                        channel: name,
                        lag,
                        weight: w,
                    });
                }
            }
        }
    }
    let mut dir = derived(out, "inspect-attention", &r)?;
    dir.write("channel_weights.csv", to_csv(chan_rows)?)?;
    dir.write("temporal_weights.csv", to_csv(lag_rows)?)?;
    dir.finish()
}
