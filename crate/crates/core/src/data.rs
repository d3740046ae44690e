//! CSV ingestion, chronological splits, z-scoring and sliding windows.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ndmath::Tensor;

/// Floor applied to zero-variance columns.
pub const STD_FLOOR: f64 = 1e-8;

/// Hourly ETT split boundaries: 12 months train, 4 validation, 4 test.
pub const ETT_HOURLY_BOUNDS: [usize; 3] = [12 * 30 * 24, 16 * 30 * 24, 20 * 30 * 24];

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Vec<NaiveDateTime>,
    /// `(T, V)`.
    pub values: Tensor,
    pub names: Vec<String>,
}

impl SeriesTable {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn variables(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let v = self.variables();
        &self.values.data()[t * v..(t + 1) * v]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    EttHourly,
    EttMinute,
    /// 7:1:2 chronological ratio split.
    Ratio,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ett-hourly" => Ok(DatasetKind::EttHourly),
            "ett-minute" => Ok(DatasetKind::EttMinute),
            "ratio" => Ok(DatasetKind::Ratio),
            other => Err(Error::Config(format!(
                "unknown dataset kind `{other}` (expected ett-hourly, ett-minute or ratio)"
            ))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::EttHourly => "ett-hourly",
            DatasetKind::EttMinute => "ett-minute",
            DatasetKind::Ratio => "ratio",
        })
    }
}

/// Half-open row ranges. Validation and test ranges start `L` rows early so
/// their first target row follows the previous split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `(B, L, V)`.
    pub x: Tensor,
    /// `(B, H, V)`.
    pub y: Tensor,
    /// Row index of each window's first lookback step.
    pub origins: Vec<usize>,
}

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y/%m/%d %H:%M:%S",
    "%Y/%m/%d %H:%M",
];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// Reads a header-first CSV whose first column is a timestamp.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesTable> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            path: path.into(),
            row: 1,
            column: "header".into(),
            detail: "need a timestamp column and at least one variable".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let vars = names.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // Row 1 is the header.
        let row = i + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let parse_err = |column: usize, detail: String| Error::Parse {
            path: path.into(),
            row,
            column: headers
                .get(column.saturating_sub(1))
                .map_or_else(|| format!("#{column}"), |h| format!("{h} (#{column})")),
            detail,
        };
        if rec.len() != vars + 1 {
            return Err(parse_err(rec.len(), format!("expected {} fields, found {}", vars + 1, rec.len())));
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| parse_err(1, format!("unparseable timestamp `{}`", &rec[0])))?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(parse_err(1, format!("timestamp {ts} does not increase")));
            }
        }
        timestamps.push(ts);
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(j + 1, format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(j + 1, format!("non-finite value `{cell}`")));
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    Ok(SeriesTable {
        values: Tensor::new(vec![timestamps.len(), vars], values)?,
        timestamps,
        names,
    })
}

fn other_row(kind: &csv::ErrorKind) -> usize {
    match kind {
        csv::ErrorKind::UnequalLengths { pos: Some(p), .. } => p.line() as usize,
        csv::ErrorKind::Utf8 { pos: Some(p), .. } => p.line() as usize,
        _ => 0,
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.into(),
            source,
        },
        other => Error::Parse {
            path: path.into(),
            row: other_row(&other),
            column: "?".into(),
            detail: format!("{other:?}"),
        },
    }
}

/// Chronological split of `rows` rows for lookback `L` and horizon `H`.
pub fn make_split(rows: usize, kind: DatasetKind, lookback: usize, horizon: usize) -> Result<SplitSpec> {
    let (train_end, val_end, test_end) = match kind {
        DatasetKind::EttHourly => (ETT_HOURLY_BOUNDS[0], ETT_HOURLY_BOUNDS[1], ETT_HOURLY_BOUNDS[2]),
        DatasetKind::EttMinute => (
            4 * ETT_HOURLY_BOUNDS[0],
            4 * ETT_HOURLY_BOUNDS[1],
            4 * ETT_HOURLY_BOUNDS[2],
        ),
        DatasetKind::Ratio => {
            let train = rows * 7 / 10;
            let test = rows * 2 / 10;
            (train, rows - test, rows)
        }
    };
    if test_end > rows {
        return Err(Error::Data(format!(
            "{kind} split needs {test_end} rows, table has {rows}"
        )));
    }
    split_at(rows, [train_end, val_end, test_end], lookback, horizon)
}

/// Split with explicit `[train_end, val_end, test_end]` boundaries.
pub fn split_at(rows: usize, bounds: [usize; 3], lookback: usize, horizon: usize) -> Result<SplitSpec> {
    let [train_end, val_end, test_end] = bounds;
    if test_end > rows || !(train_end <= val_end && val_end <= test_end) {
        return Err(Error::Data(format!(
            "split boundaries {bounds:?} invalid for {rows} rows"
        )));
    }
    let need = lookback + horizon;
    if train_end < need || val_end < train_end + horizon || test_end < val_end + horizon || lookback > train_end {
        return Err(Error::Data(format!(
            "{rows} rows are too few for lookback {lookback} and horizon {horizon}"
        )));
    }
    Ok(SplitSpec {
        train: 0..train_end,
        val: train_end - lookback..val_end,
        test: val_end - lookback..test_end,
    })
}

/// Per-variable mean and population std over `train` rows.
pub fn fit_norm(table: &SeriesTable, train: Range<usize>) -> Result<NormStats> {
    if train.is_empty() || train.end > table.rows() {
        return Err(Error::invalid(format!(
            "train range {train:?} invalid for {} rows",
            table.rows()
        )));
    }
    let v = table.variables();
    let n = train.len() as f64;
    let mut mean = vec![0.0; v];
    for t in train.clone() {
        for (m, x) in mean.iter_mut().zip(table.row(t)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; v];
    for t in train {
        for ((s, x), m) in var.iter_mut().zip(table.row(t)).zip(&mean) {
            *s += (x - m).powi(2);
        }
    }
    let std = var
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let sd = (s / n).sqrt();
            if sd < STD_FLOOR {
                let name = table.names.get(j).map(String::as_str).unwrap_or("?");
                warn!("column `{name}` has zero variance on the training rows; std floored at {STD_FLOOR}");
                STD_FLOOR
            } else {
                sd
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn variables(&self) -> usize {
        self.mean.len()
    }

    /// Applies `(x - mean) / std` along the last axis.
    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        self.affine(t, |x, m, s| (x - m) / s)
    }

    pub fn denormalize(&self, t: &Tensor) -> Result<Tensor> {
        self.affine(t, |x, m, s| x * s + m)
    }

    fn affine(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let v = self.variables();
        if t.last_dim() != v {
            return Err(Error::invalid(format!(
                "tensor has {} variables, statistics have {v}",
                t.last_dim()
            )));
        }
        let mut out = t.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            let j = i % v;
            *x = f(*x, self.mean[j], self.std[j]);
        }
        Ok(out)
    }
}

pub fn apply_norm(table: &SeriesTable, stats: &NormStats) -> Result<SeriesTable> {
    Ok(SeriesTable {
        timestamps: table.timestamps.clone(),
        values: stats.normalize(&table.values)?,
        names: table.names.clone(),
    })
}

pub fn denormalize(t: &Tensor, stats: &NormStats) -> Result<Tensor> {
    stats.denormalize(t)
}

/// Sum of unit-amplitude sinusoids plus Gaussian noise.
///
/// Tone `k` completes `bins[k]` cycles every `period` rows and each variable
/// draws its own phases. Noise variance is set so the ratio of signal power
/// to noise power is `snr_db` decibels.
pub fn synthetic_tones(
    rows: usize,
    variables: usize,
    period: usize,
    bins: &[usize],
    snr_db: f64,
    seed: u64,
) -> Result<SeriesTable> {
    if rows == 0 || variables == 0 || period == 0 || bins.is_empty() {
        return Err(Error::invalid("synthetic_tones needs rows, variables, period and tones"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal_power = 0.5 * bins.len() as f64;
    let noise_sd = (signal_power / 10f64.powf(snr_db / 10.0)).sqrt();
    let phases: Vec<Vec<f64>> = (0..variables)
        .map(|_| bins.iter().map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect())
        .collect();
    let mut values = Vec::with_capacity(rows * variables);
    for t in 0..rows {
        for ph in &phases {
            let clean: f64 = bins
                .iter()
                .zip(ph)
                .map(|(&k, &p)| (std::f64::consts::TAU * (k * t) as f64 / period as f64 + p).sin())
                .sum();
            let noise: f64 = rng.sample(StandardNormal);
            values.push(clean + noise_sd * noise);
        }
    }
    let base = NaiveDate::from_ymd_opt(2016, 7, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    Ok(SeriesTable {
        timestamps: (0..rows).map(|i| base + chrono::Duration::hours(i as i64)).collect(),
        values: Tensor::new(vec![rows, variables], values)?,
        names: (0..variables).map(|i| format!("x{i}")).collect(),
    })
}

/// Writes a table in the format read by [`load_csv`].
pub fn write_csv(table: &SeriesTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["date".to_string()];
    header.extend(table.names.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for t in 0..table.rows() {
        let mut rec = vec![table.timestamps[t].format("%Y-%m-%d %H:%M:%S").to_string()];
        rec.extend(table.row(t).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Number of windows in a range of `len` rows.
pub fn window_count(len: usize, lookback: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(lookback + horizon)
}

/// Batches of `(lookback, horizon)` windows whose rows lie in `range`.
///
/// Ascending origins when `shuffle_seed` is `None`; otherwise a permutation
/// drawn from the seed. The final batch may be short.
pub fn make_windows<'a>(
    table: &'a SeriesTable,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<WindowStream<'a>> {
    if range.end > table.rows() {
        return Err(Error::invalid(format!(
            "range {range:?} exceeds {} rows",
            table.rows()
        )));
    }
    if batch_size == 0 || lookback == 0 || horizon == 0 {
        return Err(Error::invalid("batch size, lookback and horizon must be positive"));
    }
    let count = window_count(range.len(), lookback, horizon);
    if count == 0 {
        return Err(Error::Data(format!(
            "range of {} rows holds no window of {lookback} + {horizon}",
            range.len()
        )));
    }
    let mut origins: Vec<usize> = (range.start..range.start + count).collect();
    if let Some(seed) = shuffle_seed {
        origins.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(WindowStream {
        table,
        origins,
        lookback,
        horizon,
        batch_size,
        next: 0,
    })
}

#[derive(Debug, Clone)]
pub struct WindowStream<'a> {
    table: &'a SeriesTable,
    origins: Vec<usize>,
    lookback: usize,
    horizon: usize,
    batch_size: usize,
    next: usize,
}

impl WindowStream<'_> {
    pub fn windows(&self) -> usize {
        self.origins.len()
    }

    pub fn batches(&self) -> usize {
        self.origins.len().div_ceil(self.batch_size)
    }
}

impl Iterator for WindowStream<'_> {
    type Item = WindowBatch;

    fn next(&mut self) -> Option<WindowBatch> {
        if self.next >= self.origins.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.origins.len());
        let origins = self.origins[self.next..end].to_vec();
        self.next = end;
        let v = self.table.variables();
        let (l, h) = (self.lookback, self.horizon);
        let data = self.table.values.data();
        let mut x = Vec::with_capacity(origins.len() * l * v);
        let mut y = Vec::with_capacity(origins.len() * h * v);
        for &o in &origins {
            x.extend_from_slice(&data[o * v..(o + l) * v]);
            y.extend_from_slice(&data[(o + l) * v..(o + l + h) * v]);
        }
        let b = origins.len();
        Some(WindowBatch {
            x: Tensor::new(vec![b, l, v], x).expect("window shape"),
            y: Tensor::new(vec![b, h, v], y).expect("target shape"),
            origins,
        })
    }
}
