//! Objective, metrics, optimizer, epoch loop and grid runner.

use std::cell::Cell;
use std::f64::consts::PI;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, DatasetKind, NormStats, SeriesTable, SplitSpec};
use crate::error::{Error, Result};
use crate::moge::{AdaMoGe, LayerConfig};
use crate::ndmath::{ParameterStore, Tape, Tensor};

/// Batch size used for validation and test passes.
/// Batch size for validation and test passes.
pub const EVAL_BATCH: usize = 128;

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// `min + (base - min)·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore, base_lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            base_lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of every trainable parameter; zeroes gradients.
pub fn adam_step(store: &mut ParameterStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match the parameter store"));
    }
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::Numeric {
            name: p.name.clone(),
            detail: "non-finite gradient".into(),
        });
    }
    state.step += 1;
    let (b1, b2) = state.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if p.trainable {
            let vals = p.value.data_mut();
            for (((x, g), mi), vi) in vals
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + state.eps);
            }
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub patience: usize,
    pub seed: u64,
    pub grid_e_max: Vec<usize>,
    pub grid_depth: Vec<usize>,
    pub grid_feature_dim: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            base_lr: 1e-3,
            min_lr: 1e-5,
            patience: 5,
            seed: 2024,
            grid_e_max: (5..=10).collect(),
            grid_depth: (1..=4).collect(),
            grid_feature_dim: vec![8, 16, 32],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return bad("learning rates must satisfy 0 <= train.min_lr <= train.base_lr, base_lr > 0");
        }
        if self.grid_e_max.is_empty() || self.grid_depth.is_empty() || self.grid_feature_dim.is_empty() {
            return bad("grid lists must be nonempty");
        }
        if self.grid_e_max.iter().chain(&self.grid_depth).chain(&self.grid_feature_dim).any(|&v| v == 0) {
            return bad("grid entries must be positive");
        }
        Ok(())
    }

    /// Every `(e_max, depth, feature_dim)` combination in grid order.
    pub fn grid(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &e in &self.grid_e_max {
            for &d in &self.grid_depth {
                for &f in &self.grid_feature_dim {
                    out.push((e, d, f));
                }
            }
        }
        out
    }
}

/// Normalized series with its split, statistics and a test-read counter.
#[derive(Debug)]
pub struct PreparedData {
    pub name: String,
    pub table: SeriesTable,
    pub split: SplitSpec,
    pub stats: NormStats,
    pub lookback: usize,
    pub horizon: usize,
    test_reads: Cell<usize>,
}

impl PreparedData {
    /// Splits `raw`, fits statistics on the training rows and normalizes.
    pub fn new(
        name: impl Into<String>,
        raw: &SeriesTable,
        kind: DatasetKind,
        lookback: usize,
        horizon: usize,
    ) -> Result<Self> {
        let split = data::make_split(raw.rows(), kind, lookback, horizon)?;
        Self::with_split(name, raw, split, lookback, horizon)
    }

    /// Like [`PreparedData::new`] with a precomputed split.
    pub fn with_split(
        name: impl Into<String>,
        raw: &SeriesTable,
        split: SplitSpec,
        lookback: usize,
        horizon: usize,
    ) -> Result<Self> {
        let stats = data::fit_norm(raw, split.train.clone())?;
        let table = data::apply_norm(raw, &stats)?;
        Ok(PreparedData {
            name: name.into(),
            table,
            split,
            stats,
            lookback,
            horizon,
            test_reads: Cell::new(0),
        })
    }

    pub fn variables(&self) -> usize {
        self.table.variables()
    }

    /// How many times test windows have been requested.
    pub fn test_reads(&self) -> usize {
        self.test_reads.get()
    }

    fn windows(&self, range: std::ops::Range<usize>, batch: usize, seed: Option<u64>) -> Result<data::WindowStream<'_>> {
        data::make_windows(&self.table, range, self.lookback, self.horizon, batch, seed)
    }

    pub fn train_windows(&self, batch: usize, seed: u64) -> Result<data::WindowStream<'_>> {
        self.windows(self.split.train.clone(), batch, Some(seed))
    }

    pub fn val_windows(&self, batch: usize) -> Result<data::WindowStream<'_>> {
        self.windows(self.split.val.clone(), batch, None)
    }

    pub fn test_windows(&self, batch: usize) -> Result<data::WindowStream<'_>> {
        self.test_reads.set(self.test_reads.get() + 1);
        self.windows(self.split.test.clone(), batch, None)
    }
}

/// Mean squared and absolute error over a window stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

pub fn evaluate(model: &AdaMoGe, windows: data::WindowStream<'_>) -> Result<Metrics> {
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for batch in windows {
        let pred = model.forecast(&batch.x)?;
        check_pair(&pred, &batch.y)?;
        for (p, t) in pred.data().iter().zip(batch.y.data()) {
            se += (p - t).powi(2);
            ae += (p - t).abs();
        }
        n += pred.len();
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Completed,
    EarlyStopped,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

/// Result of training without touching the test split.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation MSE.
    pub model: AdaMoGe,
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub history: Vec<EpochLog>,
    pub status: FitStatus,
    pub seconds: f64,
}

/// Shuffle seed of one epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Trains on the training split, selecting parameters on validation MSE.
pub fn train(mut model: AdaMoGe, data: &PreparedData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let batches = data.train_windows(cfg.batch_size, 0)?.batches();
    let total_steps = cfg.epochs * batches;
    let mut opt = OptimizerState::new(&model.store, cfg.base_lr);
    let mut best = model.store.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::new();
    let mut status = FitStatus::Completed;
    let mut bad = 0;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut loss_n = 0;
        for batch in data.train_windows(cfg.batch_size, epoch_seed(cfg.seed, epoch))? {
            let lr = cosine_lr(step, total_steps, cfg.base_lr, cfg.min_lr);
            step += 1;
            let mut tape = Tape::new();
            let x = tape.constant(batch.x);
            let (y, _) = model.forward_on(&model.store, &mut tape, x)?;
            let loss = tape.mse(y, &batch.y)?;
            let value = tape.real(loss)?.data()[0];
            if !value.is_finite() {
                warn!("epoch {epoch}: non-finite training loss; keeping the best parameters");
                status = FitStatus::Diverged;
                break 'epochs;
            }
            let grads = tape.backward(loss)?;
            tape.accumulate_into(&grads, &mut model.store)?;
            if let Err(e) = adam_step(&mut model.store, &mut opt, lr) {
                warn!("epoch {epoch}: {e}; keeping the best parameters");
                status = FitStatus::Diverged;
                break 'epochs;
            }
            loss_sum += value;
            loss_n += 1;
        }
        let val = evaluate(&model, data.val_windows(EVAL_BATCH)?)?.mse;
        let train_loss = loss_sum / loss_n as f64;
        info!("epoch {epoch}: train {train_loss:.6}, val {val:.6}");
        history.push(EpochLog {
            epoch,
            train_loss,
            val_mse: val,
        });
        if !val.is_finite() {
            status = FitStatus::Diverged;
            break;
        }
        if val < best_val {
            best_val = val;
            best = model.store.clone();
            best_epoch = Some(epoch);
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                status = FitStatus::EarlyStopped;
                break;
            }
        }
    }
    model.store = best;
    model.store.zero_grad();
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_mse: best_val,
        history,
        status,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trained model plus its test metrics.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub train: TrainOutcome,
    pub test: Metrics,
    pub seconds: f64,
}

/// [`train`], then a single pass over the test split.
pub fn fit(model: AdaMoGe, data: &PreparedData, cfg: &TrainConfig) -> Result<FitOutcome> {
    let start = Instant::now();
    let trained = train(model, data, cfg)?;
    let test = evaluate(&trained.model, data.test_windows(EVAL_BATCH)?)?;
    Ok(FitOutcome {
        train: trained,
        test,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One grid point's validation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub e_max: usize,
    pub depth: usize,
    pub feature_dim: usize,
    pub val_mse: f64,
    pub params: usize,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// Sorted by validation MSE; ties keep grid order.
    pub ranked: Vec<GridRun>,
    pub winner: FitOutcome,
}

/// Trains every grid point, ranks on validation MSE and tests the winner.
pub fn grid_search<F>(data: &PreparedData, cfg: &TrainConfig, layer_for: F) -> Result<GridOutcome>
where
    F: Fn(usize, usize, usize) -> Result<LayerConfig>,
{
    cfg.validate()?;
    let start = Instant::now();
    let mut runs = Vec::new();
    let mut best: Option<(f64, TrainOutcome)> = None;
    for (e, d, f) in cfg.grid() {
        let model = AdaMoGe::new(layer_for(e, d, f)?, cfg.seed)?;
        let params = model.parameter_count();
        let out = train(model, data, cfg)?;
        info!("grid e_max={e} depth={d} feature_dim={f}: val {:.6}", out.best_val_mse);
        runs.push(GridRun {
            e_max: e,
            depth: d,
            feature_dim: f,
            val_mse: out.best_val_mse,
            params,
        });
        if best.as_ref().is_none_or(|(v, _)| out.best_val_mse < *v) {
            best = Some((out.best_val_mse, out));
        }
    }
    let (_, trained) = best.expect("nonempty grid");
    let test = evaluate(&trained.model, data.test_windows(EVAL_BATCH)?)?;
    let mut ranked = runs;
    ranked.sort_by(|a, b| a.val_mse.total_cmp(&b.val_mse));
    Ok(GridOutcome {
        ranked,
        winner: FitOutcome {
            train: trained,
            test,
            seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Test-split summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub params: usize,
    pub seconds: f64,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("malformed report: {e}")))
    }

    /// Appends one CSV row, writing the header first if `path` is new.
    pub fn append_csv(&self, path: &std::path::Path) -> Result<()> {
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        w.serialize(self)
            .and_then(|_| w.flush().map_err(csv::Error::from))
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// SHA-256 over every field except wall-clock time.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dataset.as_bytes());
        h.update(self.horizon.to_le_bytes());
        h.update(self.mse.to_bits().to_le_bytes());
        h.update(self.mae.to_bits().to_le_bytes());
        h.update(self.params.to_le_bytes());
        h.update(self.fingerprint.as_bytes());
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metric_examples() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        assert_eq!((mse(&t, &t).unwrap(), mae(&t, &t).unwrap()), (0.0, 0.0));
        let p = t.map(|v| v + 2.0);
        assert_eq!((mse(&p, &t).unwrap(), mae(&p, &t).unwrap()), (4.0, 2.0));
        assert!(mse(&t, &Tensor::zeros(&[3, 2])).is_err());

        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..60).map(|_| r.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..60).map(|_| r.gen_range(-3.0..3.0)).collect();
        let (mut s, mut m) = (0.0, 0.0);
        for i in 0..60 {
            s += (a[i] - b[i]) * (a[i] - b[i]);
            m += (a[i] - b[i]).abs();
        }
        let (ta, tb) = (Tensor::new(vec![3, 4, 5], a).unwrap(), Tensor::new(vec![3, 4, 5], b).unwrap());
        assert!((mse(&ta, &tb).unwrap() - s / 60.0).abs() < 1e-12);
        assert!((mae(&ta, &tb).unwrap() - m / 60.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 1e-3, 1e-5);
            assert!(lr <= last);
            last = lr;
        }
    }

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("theta", Tensor::scalar(v), true).unwrap();
        s
    }

    #[test]
    fn adam_examples() {
        let mut s = scalar_store(0.7);
        let mut st = OptimizerState::new(&s, 0.1);
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!((s.value(s.id("theta").unwrap()).data()[0], st.step), (0.7, 1));

        let mut s = scalar_store(1.0);
        let mut st = OptimizerState::new(&s, 0.1);
        s.by_name_mut("theta").unwrap().grad.fill(1.0);
        adam_step(&mut s, &mut st, 0.1).unwrap();
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.by_name("theta").unwrap().value.data()[0] - want).abs() < 1e-15);
        assert_eq!(s.by_name("theta").unwrap().grad.data()[0], 0.0);

        s.by_name_mut("theta").unwrap().grad.fill(f64::NAN);
        let err = adam_step(&mut s, &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = scalar_store(1.0);
        let mut st = OptimizerState::new(&s, 0.05);
        // Independent scalar recursion.
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for k in 1..=200 {
            let g = 2.0 * s.by_name("theta").unwrap().value.data()[0];
            s.by_name_mut("theta").unwrap().grad.fill(g);
            adam_step(&mut s, &mut st, 0.05).unwrap();
            let go = 2.0 * th;
            m = 0.9 * m + 0.1 * go;
            v = 0.999 * v + 0.001 * go * go;
            th -= 0.05 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        let got = s.by_name("theta").unwrap().value.data()[0];
        assert!(got.abs() < 1e-2, "{got}");
        assert!((got - th).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut s = scalar_store(1.0);
        s.set_trainable("theta", false);
        let mut st = OptimizerState::new(&s, 0.1);
        s.by_name_mut("theta").unwrap().grad.fill(1.0);
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.by_name("theta").unwrap().value.data()[0], 1.0);
    }

    pub(crate) fn sine_table(rows: usize, seed: u64) -> SeriesTable {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let base = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let mut values = Vec::with_capacity(rows * 2);
        for t in 0..rows {
            let ph = 2.0 * PI * 3.0 * t as f64 / 32.0;
            values.push(ph.sin() + 0.05 * r.gen_range(-1.0..1.0));
            values.push((ph + 1.0).cos() + 0.05 * r.gen_range(-1.0..1.0));
        }
        SeriesTable {
            timestamps: (0..rows).map(|i| base + chrono::Duration::hours(i as i64)).collect(),
            values: Tensor::new(vec![rows, 2], values).unwrap(),
            names: vec!["a".into(), "b".into()],
        }
    }

    fn small_setup() -> (PreparedData, LayerConfig, TrainConfig) {
        let data = PreparedData::new("sine", &sine_table(400, 1), DatasetKind::Ratio, 32, 16).unwrap();
        let mut layer = LayerConfig::new(32, 16, 2, 3);
        layer.feature_dim = 4;
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            base_lr: 3e-3,
            ..TrainConfig::default()
        };
        (data, layer, cfg)
    }

    #[test]
    fn fit_reads_test_split_once_after_selection() {
        let (data, layer, cfg) = small_setup();
        let model = AdaMoGe::new(layer, 0).unwrap();
        let trained = train(model.clone(), &data, &cfg).unwrap();
        assert_eq!(data.test_reads(), 0);
        assert_eq!(trained.history.len(), 3);
        let out = fit(model, &data, &cfg).unwrap();
        assert_eq!(data.test_reads(), 1);
        assert!(out.test.mse.is_finite() && out.test.mse >= 0.0);
    }

    #[test]
    fn fit_is_deterministic() {
        let (data, layer, cfg) = small_setup();
        let a = fit(AdaMoGe::new(layer.clone(), 5).unwrap(), &data, &cfg).unwrap();
        let b = fit(AdaMoGe::new(layer, 5).unwrap(), &data, &cfg).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.history, b.train.history);
    }

    #[test]
    fn zero_patience_stops_after_first_miss() {
        let (data, layer, mut cfg) = small_setup();
        cfg.patience = 0;
        cfg.epochs = 20;
        let out = train(AdaMoGe::new(layer, 0).unwrap(), &data, &cfg).unwrap();
        let vals: Vec<f64> = out.history.iter().map(|e| e.val_mse).collect();
        let improved = |i: usize| vals[..i].iter().all(|&v| vals[i] < v);
        let n = vals.len();
        assert!((0..n - 1).all(improved));
        if out.status == FitStatus::EarlyStopped {
            assert!(!improved(n - 1));
        } else {
            assert_eq!(n, 20);
        }
    }

    #[test]
    fn divergence_keeps_finite_parameters() {
        let (data, layer, mut cfg) = small_setup();
        cfg.base_lr = 1e300;
        cfg.min_lr = 1e300;
        let out = train(AdaMoGe::new(layer, 0).unwrap(), &data, &cfg).unwrap();
        assert!(out.model.store.iter().all(|p| p.value.all_finite()));
        assert_eq!(out.status, FitStatus::Diverged);
    }

    #[test]
    fn training_loss_decreases_on_fixed_batch() {
        let (data, layer, _) = small_setup();
        let batch = data.train_windows(16, 0).unwrap().next().unwrap();
        let mut failures = 0;
        for seed in 0..5 {
            let mut model = AdaMoGe::new(layer.clone(), seed).unwrap();
            let mut opt = OptimizerState::new(&model.store, 1e-3);
            let mut losses = Vec::new();
            for _ in 0..50 {
                let mut tape = Tape::new();
                let x = tape.constant(batch.x.clone());
                let (y, _) = model.forward_on(&model.store, &mut tape, x).unwrap();
                let l = tape.mse(y, &batch.y).unwrap();
                losses.push(tape.real(l).unwrap().data()[0]);
                let g = tape.backward(l).unwrap();
                tape.accumulate_into(&g, &mut model.store).unwrap();
                adam_step(&mut model.store, &mut opt, 1e-3).unwrap();
            }
            if losses[49] >= losses[0] {
                failures += 1;
            }
        }
        assert!(failures <= 1);
    }

    #[test]
    fn grid_enumeration_and_single_point() {
        assert_eq!(TrainConfig::default().grid().len(), 72);
        let (data, layer, mut cfg) = small_setup();
        cfg.grid_e_max = vec![3];
        cfg.grid_depth = vec![1];
        cfg.grid_feature_dim = vec![4];
        let g = grid_search(&data, &cfg, |_, _, _| Ok(layer.clone())).unwrap();
        let f = fit(AdaMoGe::new(layer, cfg.seed).unwrap(), &data, &cfg).unwrap();
        assert_eq!(g.ranked.len(), 1);
        assert_eq!(g.winner.test, f.test);
    }

    #[test]
    fn report_serialization_and_digest() {
        let r = EvalReport {
            dataset: "x".into(),
            horizon: 96,
            mse: 0.25,
            mae: 0.4,
            params: 10,
            seconds: 1.5,
            fingerprint: "ab".into(),
        };
        let json = r.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["dataset", "horizon", "mse", "mae", "params", "seconds", "fingerprint"] {
            assert!(keys.contains(&k));
        }
        assert_eq!(EvalReport::from_json(&json).unwrap(), r);
        let slower = EvalReport { seconds: 9.0, ..r.clone() };
        assert_eq!(r.digest(), slower.digest());
        let worse = EvalReport { mse: 0.3, ..r.clone() };
        assert_ne!(r.digest(), worse.digest());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        r.append_csv(&p).unwrap();
        r.append_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("dataset,horizon,mse,mae,params,seconds,fingerprint"));
    }
}
