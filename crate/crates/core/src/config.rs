//! Flat `key = value` run configuration with dotted section keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys are rejected. Values spelled `auto` are resolved
//! from other settings when the model is built.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{self, DatasetKind, SeriesTable};
use crate::error::{Error, Result};
use crate::filterbank::{nyquist, BandwidthSettings, FilterMode};
use crate::moge::{GateFeatures, GateMode, LayerConfig};
use crate::ndmath::fft::half_bins;
use crate::training::{PreparedData, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateModeSetting {
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub data_kind: DatasetKind,
    /// Report label; the file stem when unset.
    pub data_name: Option<String>,
    pub lookback: usize,
    pub horizon: usize,
    /// Explicit `[train_end, val_end, test_end]` row boundaries.
    pub split: Option<[usize; 3]>,
    pub e_max: usize,
    pub depth: usize,
    pub feature_dim: usize,
    pub filter_mode: FilterMode,
    pub sigma0: Option<f64>,
    pub alpha: f64,
    pub sigma_min: f64,
    pub sigma_max: Option<f64>,
    pub gate_mode: GateModeSetting,
    pub fixed_k: Option<usize>,
    pub gate_features: GateFeatures,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_path: PathBuf::from("data/ETTh1.csv"),
            data_kind: DatasetKind::EttHourly,
            data_name: None,
            lookback: 96,
            horizon: 96,
            split: None,
            e_max: 7,
            depth: 1,
            feature_dim: 16,
            filter_mode: FilterMode::Dog,
            sigma0: None,
            alpha: 1.0,
            sigma_min: 0.5,
            sigma_max: None,
            gate_mode: GateModeSetting::Adaptive,
            fixed_k: None,
            gate_features: GateFeatures::Dual,
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "data.path",
    "data.kind",
    "data.name",
    "data.lookback",
    "data.horizon",
    "data.split",
    "model.e_max",
    "model.depth",
    "model.feature_dim",
    "model.filter.mode",
    "model.sigma0",
    "model.alpha",
    "model.sigma_min",
    "model.sigma_max",
    "model.gate.mode",
    "model.gate.fixed_k",
    "model.gate.features",
    "train.epochs",
    "train.batch_size",
    "train.base_lr",
    "train.min_lr",
    "train.patience",
    "train.seed",
    "train.grid.e_max",
    "train.grid.depth",
    "train.grid.feature_dim",
    "output.dir",
];

/// Keys left out of the fingerprint because they only locate files.
const UNHASHED: &[&str] = &["data.path", "output.dir"];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_auto<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn auto<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), T::to_string)
}

impl RunConfig {
    /// Defaults overlaid with `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not `key=value`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.path" => self.data_path = PathBuf::from(v),
            "data.kind" => self.data_kind = v.parse()?,
            "data.name" => self.data_name = (v != "auto").then(|| v.to_string()),
            "data.lookback" => self.lookback = parse_num(key, v)?,
            "data.horizon" => self.horizon = parse_num(key, v)?,
            "data.split" => {
                self.split = if v == "auto" {
                    None
                } else {
                    let b = parse_list(key, v)?;
                    let arr: [usize; 3] = b.try_into().map_err(|_| {
                        Error::Config(format!("`{key}` needs three row boundaries"))
                    })?;
                    Some(arr)
                }
            }
            "model.e_max" => self.e_max = parse_num(key, v)?,
            "model.depth" => self.depth = parse_num(key, v)?,
            "model.feature_dim" => self.feature_dim = parse_num(key, v)?,
            "model.filter.mode" => self.filter_mode = v.parse()?,
            "model.sigma0" => self.sigma0 = parse_auto(key, v)?,
            "model.alpha" => self.alpha = parse_num(key, v)?,
            "model.sigma_min" => self.sigma_min = parse_num(key, v)?,
            "model.sigma_max" => self.sigma_max = parse_auto(key, v)?,
            "model.gate.mode" => {
                self.gate_mode = match v {
                    "adaptive" => GateModeSetting::Adaptive,
                    "fixed" => GateModeSetting::Fixed,
                    _ => return Err(Error::Config(format!("`{key}`: expected adaptive or fixed, got `{v}`"))),
                }
            }
            "model.gate.fixed_k" => self.fixed_k = parse_auto(key, v)?,
            "model.gate.features" => self.gate_features = v.parse()?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.base_lr" => self.train.base_lr = parse_num(key, v)?,
            "train.min_lr" => self.train.min_lr = parse_num(key, v)?,
            "train.patience" => self.train.patience = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.grid.e_max" => self.train.grid_e_max = parse_list(key, v)?,
            "train.grid.depth" => self.train.grid_depth = parse_list(key, v)?,
            "train.grid.feature_dim" => self.train.grid_feature_dim = parse_list(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical value of every key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let values = vec![
            self.data_path.display().to_string(),
            self.data_kind.to_string(),
            auto(&self.data_name),
            self.lookback.to_string(),
            self.horizon.to_string(),
            self.split.map_or_else(|| "auto".into(), |s| join(&s)),
            self.e_max.to_string(),
            self.depth.to_string(),
            self.feature_dim.to_string(),
            self.filter_mode.to_string(),
            self.sigma0.map_or_else(|| "auto".into(), |v| format!("{v:?}")),
            format!("{:?}", self.alpha),
            format!("{:?}", self.sigma_min),
            self.sigma_max.map_or_else(|| "auto".into(), |v| format!("{v:?}")),
            match self.gate_mode {
                GateModeSetting::Adaptive => "adaptive".into(),
                GateModeSetting::Fixed => "fixed".into(),
            },
            auto(&self.fixed_k),
            self.gate_features.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            format!("{:?}", t.base_lr),
            format!("{:?}", t.min_lr),
            t.patience.to_string(),
            t.seed.to_string(),
            join(&t.grid_e_max),
            join(&t.grid_depth),
            join(&t.grid_feature_dim),
            self.output_dir.display().to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Config text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical entries, excluding file locations.
    pub fn fingerprint_bytes(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !UNHASHED.contains(&k) {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().into()
    }

    pub fn fingerprint(&self) -> String {
        crate::training::hex(&self.fingerprint_bytes())
    }

    pub fn dataset_name(&self) -> String {
        self.data_name.clone().unwrap_or_else(|| {
            self.data_path
                .file_stem()
                .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
        })
    }

    /// Expert count used by the fixed gate.
    pub fn resolved_fixed_k(&self) -> usize {
        self.fixed_k
            .unwrap_or_else(|| ((self.e_max as f64 + 1.0) / 2.0).round() as usize)
    }

    /// Layer configuration for a dataset with `variables` columns.
    pub fn layer_config(&self, variables: usize) -> Result<LayerConfig> {
        if self.lookback < 2 {
            return Err(Error::Config(format!("data.lookback must be at least 2, got {}", self.lookback)));
        }
        if self.e_max == 0 {
            return Err(Error::Config("model.e_max must be positive".into()));
        }
        let nyq = nyquist(half_bins(self.lookback));
        let bandwidth = BandwidthSettings {
            mode: self.filter_mode,
            sigma0: self.sigma0.unwrap_or(nyq / (2.0 * self.e_max as f64)),
            alpha: self.alpha,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max.unwrap_or(nyq / 2.0),
        };
        let layer = LayerConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            variables,
            e_max: self.e_max,
            depth: self.depth,
            feature_dim: self.feature_dim,
            bandwidth,
            gate_mode: match self.gate_mode {
                GateModeSetting::Adaptive => GateMode::Adaptive,
                GateModeSetting::Fixed => GateMode::Fixed(self.resolved_fixed_k()),
            },
            gate_features: self.gate_features,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Splits and normalizes `raw` per the data settings.
    pub fn prepare(&self, raw: &SeriesTable) -> Result<PreparedData> {
        let split = match self.split {
            Some(bounds) => data::split_at(raw.rows(), bounds, self.lookback, self.horizon)?,
            None => data::make_split(raw.rows(), self.data_kind, self.lookback, self.horizon)?,
        };
        PreparedData::with_split(self.dataset_name(), raw, split, self.lookback, self.horizon)
    }

    /// Copy with the three grid dimensions replaced.
    pub fn with_grid_point(&self, e_max: usize, depth: usize, feature_dim: usize) -> Self {
        RunConfig {
            e_max,
            depth,
            feature_dim,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.horizon < 2 {
            return Err(Error::Config(format!("data.horizon must be at least 2, got {}", self.horizon)));
        }
        self.layer_config(1).map(|_| ())
    }
}
