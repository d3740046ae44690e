//! Command-line front end: `train`, `eval`, `predict` and `inspect-spectrum`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, NormStats, SeriesTable};
use crate::error::{Error, Result};
use crate::filterbank::{self, FilterMode};
use crate::moge::{rank_order, AdaMoGe};
use crate::ndmath::Tensor;
use crate::training::{self, EvalReport, FitStatus, EVAL_BATCH};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_FILE: &str = "eval.json";
pub const REPORTS_CSV: &str = "reports.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const FORECAST_FILE: &str = "forecast.csv";
pub const SPECTRUM_FILE: &str = "spectrum.csv";

const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Parser)]
#[command(name = "adamoge", version, about = "Adaptive Gaussian mixture-of-experts forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Config file; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// `key=value` applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "K=V")]
    pub overrides: Vec<String>,
    /// Shorthand for `--override train.seed=N`.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Checkpoint file; defaults to `model.ckpt` in the output directory.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Load a checkpoint whose config fingerprint differs.
    #[arg(long)]
    pub allow_fingerprint_mismatch: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, test once, and write checkpoint and reports.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Search the `train.grid.*` lists and keep the best validation run.
        #[arg(long)]
        grid: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Forecast `H` rows starting at row `--origin` of a CSV.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Input CSV; defaults to `data.path`.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        /// First forecast row (0-based data row); needs `L` rows before it.
        #[arg(long)]
        origin: usize,
    },
    /// Dump spectral summary, filter bank and gate decision for one window.
    InspectSpectrum {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Input CSV; defaults to `data.path`.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        /// First row (0-based data row) of the lookback window.
        #[arg(long)]
        origin: usize,
    },
}

/// Config file plus overrides, `--seed` and `--out`.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, grid } => {
            let report = cmd_train(&resolve_config(&common)?, grid)?;
            println!("{}", report.to_json()?);
        }
        Command::Eval { common, model } => {
            let cfg = resolve_config(&common)?;
            let report = cmd_eval(&cfg, &checkpoint_path(&cfg, &model), model.allow_fingerprint_mismatch)?;
            println!("{}", report.to_json()?);
        }
        Command::Predict {
            common,
            model,
            input,
            origin,
        } => {
            let cfg = resolve_config(&common)?;
            let input = input.unwrap_or_else(|| cfg.data_path.clone());
            let path = cmd_predict(
                &cfg,
                &checkpoint_path(&cfg, &model),
                &input,
                origin,
                model.allow_fingerprint_mismatch,
            )?;
            println!("{}", path.display());
        }
        Command::InspectSpectrum {
            common,
            model,
            input,
            origin,
        } => {
            let cfg = resolve_config(&common)?;
            let input = input.unwrap_or_else(|| cfg.data_path.clone());
            let path = cmd_inspect_spectrum(
                &cfg,
                &checkpoint_path(&cfg, &model),
                &input,
                origin,
                model.allow_fingerprint_mismatch,
            )?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, model: &ModelArgs) -> PathBuf {
    model
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains per `cfg` and writes checkpoint, config and reports to `cfg.output_dir`.
///
/// A diverged run still writes its best parameters, then returns a numeric error.
pub fn cmd_train(cfg: &RunConfig, grid: bool) -> Result<EvalReport> {
    let raw = data::load_csv(&cfg.data_path)?;
    let prepared = cfg.prepare(&raw)?;
    let v = prepared.variables();
    let (final_cfg, outcome, ranked) = if grid {
        let g = training::grid_search(&prepared, &cfg.train, |e, d, f| {
            cfg.with_grid_point(e, d, f).layer_config(v)
        })?;
        let best = &g.ranked[0];
        let chosen = cfg.with_grid_point(best.e_max, best.depth, best.feature_dim);
        (chosen, g.winner, Some(g.ranked))
    } else {
        let model = AdaMoGe::new(cfg.layer_config(v)?, cfg.train.seed)?;
        (cfg.clone(), training::fit(model, &prepared, &cfg.train)?, None)
    };

    let out = &cfg.output_dir;
    create_dir(out)?;
    let model = &outcome.train.model;
    Checkpoint::from_model(model, &prepared.stats, final_cfg.fingerprint_bytes()).save(out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(CONFIG_FILE), &final_cfg.to_text())?;
    write_rows(&out.join(HISTORY_FILE), &outcome.train.history)?;
    if let Some(ranked) = &ranked {
        write_rows(&out.join(GRID_FILE), ranked)?;
    }
    let report = EvalReport {
        dataset: final_cfg.dataset_name(),
        horizon: final_cfg.horizon,
        mse: outcome.test.mse,
        mae: outcome.test.mae,
        params: model.parameter_count(),
        seconds: outcome.seconds,
        fingerprint: final_cfg.fingerprint(),
    };
    write_file(&out.join(REPORT_FILE), &report.to_json()?)?;
    report.append_csv(&out.join(REPORTS_CSV))?;
    info!(
        "{}: test mse {:.6}, mae {:.6} ({:?}, {} epochs)",
        report.dataset,
        report.mse,
        report.mae,
        outcome.train.status,
        outcome.train.history.len()
    );
    if outcome.train.status == FitStatus::Diverged {
        return Err(Error::Numeric {
            name: "training".into(),
            detail: "loss or gradients became non-finite; best parameters were saved".into(),
        });
    }
    Ok(report)
}

/// Model and normalization statistics from a checkpoint written for `cfg`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path, allow_mismatch: bool) -> Result<(AdaMoGe, NormStats)> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_fingerprint(&cfg.fingerprint_bytes(), allow_mismatch)?;
    let stats = ck.norm_stats()?;
    let mut model = AdaMoGe::new(cfg.layer_config(stats.variables())?, cfg.train.seed)?;
    ck.restore(&mut model)?;
    Ok((model, stats))
}

/// Test-split metrics of a checkpoint; writes `eval.json` and appends the CSV row.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, allow_mismatch: bool) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    let (model, stats) = load_model(cfg, checkpoint, allow_mismatch)?;
    let raw = data::load_csv(&cfg.data_path)?;
    let prepared = cfg.prepare(&raw)?;
    if prepared.stats != stats {
        warn!("training-split statistics differ from the checkpoint's; using the dataset's own");
    }
    let metrics = training::evaluate(&model, prepared.test_windows(EVAL_BATCH)?)?;
    let report = EvalReport {
        dataset: cfg.dataset_name(),
        horizon: cfg.horizon,
        mse: metrics.mse,
        mae: metrics.mae,
        params: model.parameter_count(),
        seconds: start.elapsed().as_secs_f64(),
        fingerprint: cfg.fingerprint(),
    };
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join(EVAL_FILE), &report.to_json()?)?;
    report.append_csv(&cfg.output_dir.join(REPORTS_CSV))?;
    Ok(report)
}

/// Normalized `(1, L, V)` window of rows `start..start + L`.
fn window(table: &SeriesTable, stats: &NormStats, start: usize, lookback: usize) -> Result<Tensor> {
    let v = table.variables();
    if stats.variables() != v {
        return Err(Error::Data(format!(
            "input has {v} variables, checkpoint was trained on {}",
            stats.variables()
        )));
    }
    let data = table.values.data()[start * v..(start + lookback) * v].to_vec();
    stats.normalize(&Tensor::new(vec![1, lookback, v], data)?)
}

/// `(H, V)` forecast in original units for rows `origin..origin + H`.
pub fn forecast_at(model: &AdaMoGe, stats: &NormStats, table: &SeriesTable, origin: usize) -> Result<Tensor> {
    let c = &model.config;
    if origin < c.lookback || origin > table.rows() {
        return Err(Error::Data(format!(
            "origin {origin} needs {} rows of history within a {}-row table",
            c.lookback,
            table.rows()
        )));
    }
    let x = window(table, stats, origin - c.lookback, c.lookback)?;
    let y = stats.denormalize(&model.forecast(&x)?)?;
    y.reshape(vec![c.horizon, c.variables])
}

/// Writes `forecast.csv`: the lookback rows followed by the `H` forecast rows.
pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    origin: usize,
    allow_mismatch: bool,
) -> Result<PathBuf> {
    let (model, stats) = load_model(cfg, checkpoint, allow_mismatch)?;
    let table = data::load_csv(input)?;
    let forecast = forecast_at(&model, &stats, &table, origin)?;
    let (l, h) = (model.config.lookback, model.config.horizon);
    let ts = &table.timestamps;
    let step = ts[origin - 1] - ts[origin - 2];
    let stamp = |t: usize| {
        ts.get(t)
            .copied()
            .unwrap_or_else(|| ts[origin - 1] + step * (t + 1 - origin) as i32)
            .format(TIME_FORMAT)
            .to_string()
    };

    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(FORECAST_FILE);
    let mut w = csv_writer(&path)?;
    let mut header = vec!["section".to_string(), "row".into(), "timestamp".into()];
    header.extend(table.names.iter().cloned());
    w.write_record(&header).map_err(csv_err(&path))?;
    let mut emit = |section: &str, t: usize, vals: &[f64]| -> Result<()> {
        let mut rec = vec![section.to_string(), t.to_string(), stamp(t)];
        rec.extend(vals.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err(&path))
    };
    for t in origin - l..origin {
        emit("lookback", t, table.row(t))?;
    }
    let v = model.config.variables;
    for s in 0..h {
        emit("forecast", origin + s, &forecast.data()[s * v..(s + 1) * v])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// One line of the spectrum diagnostics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumRow {
    pub block: usize,
    pub section: &'static str,
    pub index: usize,
    pub subindex: usize,
    pub value: f64,
}

/// Spectral summary, filter bank and gate decision for a `(1, L, V)` normalized window.
///
/// Sections: `mu` (per bin), `intensity` (per variable), `filter_f1`,
/// `filter_f2`, `filter_sigma`, `response` (expert, bin), `gate_prob`,
/// `weight`, `k_hat`, `k` and `selected` (rank, expert id).
pub fn inspect_rows(model: &AdaMoGe, window: &Tensor) -> Result<Vec<SpectrumRow>> {
    let (b, _, _) = window.dims3()?;
    if b != 1 {
        return Err(Error::invalid(format!("inspect expects one window, got {b}")));
    }
    let (_, traces) = model.forecast_traced(window)?;
    let c = &model.config;
    let bins = c.bins();
    let mut rows = Vec::new();
    for (d, tr) in traces.iter().enumerate() {
        let mut push = |section, index, subindex, value| {
            rows.push(SpectrumRow {
                block: d,
                section,
                index,
                subindex,
                value,
            })
        };
        if let Some(mu) = &tr.mu {
            mu.data().iter().enumerate().for_each(|(f, &x)| push("mu", f, 0, x));
        }
        if let Some(en) = &tr.intensity {
            en.data().iter().enumerate().for_each(|(v, &x)| push("intensity", v, 0, x));
        }
        let bank = model.bank(d);
        for e in 0..c.e_max {
            let (f1, f2) = tr.cutoffs[e];
            push("filter_f1", e, 0, f1);
            push("filter_f2", e, 0, f2);
            let curve = match (&tr.sigma, c.bandwidth.mode) {
                (Some(sigma), mode) if mode != FilterMode::Rect => {
                    let s = sigma.data()[e];
                    push("filter_sigma", e, 0, s);
                    let h = filterbank::response(&bank.filters[e], s, bins)?;
                    if mode == FilterMode::AbsDog {
                        h.into_iter().map(f64::abs).collect()
                    } else {
                        h
                    }
                }
                _ => filterbank::rect_response(e, c.e_max, bins),
            };
            curve.iter().enumerate().for_each(|(f, &x)| push("response", e, f, x));
        }
        let probs = tr.probs.data();
        probs.iter().enumerate().for_each(|(e, &x)| push("gate_prob", e, 0, x));
        let weights = tr.weights.data();
        weights.iter().enumerate().for_each(|(e, &x)| push("weight", e, 0, x));
        push("k_hat", 0, 0, tr.k_hat[0]);
        push("k", 0, 0, tr.k[0] as f64);
        for (r, e) in rank_order(probs).into_iter().take(tr.k[0]).enumerate() {
            push("selected", r, 0, e as f64);
        }
    }
    Ok(rows)
}

/// Writes `spectrum.csv` for the window starting at row `origin`.
pub fn cmd_inspect_spectrum(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    origin: usize,
    allow_mismatch: bool,
) -> Result<PathBuf> {
    let (model, stats) = load_model(cfg, checkpoint, allow_mismatch)?;
    let table = data::load_csv(input)?;
    let l = model.config.lookback;
    if origin + l > table.rows() {
        return Err(Error::Data(format!(
            "window at row {origin} needs {l} rows, table has {}",
            table.rows()
        )));
    }
    let rows = inspect_rows(&model, &window(&table, &stats, origin, l)?)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(SPECTRUM_FILE);
    write_rows(&path, &rows)?;
    Ok(path)
}
