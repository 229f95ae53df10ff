//! Synthetic regimes, CSV ingestion and chronological windowing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv file is empty")]
    EmptyFile,
    #[error("row {row}: expected {expected} fields, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {column}: `{value}` is not a number")]
    NonNumeric {
        row: usize,
        column: usize,
        value: String,
    },
    #[error("row {row}, column {column}: missing value")]
    MissingValue { row: usize, column: usize },
    #[error("{split} split has {len} steps, need at least {needed}")]
    SplitTooShort {
        split: &'static str,
        len: usize,
        needed: usize,
    },
    #[error("invalid regime spec: {0}")]
    InvalidSpec(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    LinearSine,
    Multifreq,
    ThresholdAr,
    RegimeSwitching,
    LagRecovery,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 5] = [
        RegimeKind::LinearSine,
        RegimeKind::Multifreq,
        RegimeKind::ThresholdAr,
        RegimeKind::RegimeSwitching,
        RegimeKind::LagRecovery,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeKind::LinearSine => "linear_sine",
            RegimeKind::Multifreq => "multifreq",
            RegimeKind::ThresholdAr => "threshold_ar",
            RegimeKind::RegimeSwitching => "regime_switching",
            RegimeKind::LagRecovery => "lag_recovery",
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            RegimeKind::ThresholdAr => 1.0,
            RegimeKind::LagRecovery => 0.1,
            _ => 0.05,
        }
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegimeKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        RegimeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DataError::InvalidSpec(format!("unknown regime `{s}`")))
    }
}

/// Steps simulated and discarded before an autoregressive series is kept.
pub const BURN_IN: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub kind: RegimeKind,
    pub length: usize,
    pub noise_std: f64,
    pub switch_period: usize,
    pub seed: u64,
}

impl RegimeSpec {
    /// Default length 10,000, the regime's default noise, switching every 500.
    pub fn new(kind: RegimeKind, seed: u64) -> Self {
        Self {
            kind,
            length: 10_000,
            noise_std: kind.default_noise(),
            switch_period: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.switch_period == 0 {
            return Err(DataError::InvalidSpec(
                "switch_period must be positive".into(),
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(DataError::InvalidSpec(
                "noise_std must be finite and non-negative".into(),
            ));
        }
        if self.length == 0 {
            return Err(DataError::InvalidSpec("length must be positive".into()));
        }
        Ok(())
    }
}

/// Triangular wave `(2/pi) asin(sin theta)`: period `2 pi`, peak 1 at `pi/2`.
pub fn tri(theta: f64) -> f64 {
    std::f64::consts::FRAC_2_PI * theta.sin().asin()
}

pub fn linear_sine_at(t: f64) -> f64 {
    (2.0 * std::f64::consts::PI * 0.02 * t).sin()
}

pub fn multifreq_at(t: f64) -> f64 {
    let tau = 2.0 * std::f64::consts::PI;
    (tau * 0.05 * t).sin() + 0.8 * tri(tau * 0.02 * t) + 0.5 * (tau * 0.13 * t).sin()
}

/// One threshold-AR step from `x(t-1)`, `x(t-2)`.
pub fn threshold_ar_step(x1: f64, x2: f64, eps: f64) -> f64 {
    if x1 > 0.0 {
        0.6 * x1 - 0.3 * x2 + eps
    } else {
        -0.4 * x1 + 0.5 * x2 + eps
    }
}

/// Threshold-AR trajectory from `x(0) = x0`, `x(1) = x1`, with `noise[t]`
/// added at step `t` (entries 0 and 1 unused).
pub fn threshold_ar_trajectory(x0: f64, x1: f64, noise: &[f64]) -> Vec<f64> {
    let mut x = vec![x0, x1];
    for &e in noise.iter().skip(2) {
        let n = x.len();
        x.push(threshold_ar_step(x[n - 1], x[n - 2], e));
    }
    x
}

/// True lags (in steps before the forecast origin) of the lag-recovery
/// process.
pub const LAG_RECOVERY_LAGS: [usize; 2] = [3, 12];

/// Univariate series for `spec`.
pub fn generate_series(spec: &RegimeSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = numerics::substream(spec.seed, "data");
    let sd = spec.noise_std;
    let mut eps = move || sd * rng.sample::<f64, _>(StandardNormal);
    let n = spec.length;
    let out = match spec.kind {
        RegimeKind::LinearSine => (0..n).map(|t| linear_sine_at(t as f64) + eps()).collect(),
        RegimeKind::Multifreq => (0..n).map(|t| multifreq_at(t as f64) + eps()).collect(),
        RegimeKind::RegimeSwitching => (0..n)
            .map(|t| {
                let base = if (t / spec.switch_period) % 2 == 0 {
                    linear_sine_at(t as f64)
                } else {
                    multifreq_at(t as f64)
                };
                base + eps()
            })
            .collect(),
        RegimeKind::ThresholdAr => {
            let mut x = vec![0.0; 2];
            for _ in 0..BURN_IN + n {
                let k = x.len();
                let v = threshold_ar_step(x[k - 1], x[k - 2], eps());
                x.push(v);
            }
            x.split_off(x.len() - n)
        }
        RegimeKind::LagRecovery => {
            let mut x = vec![0.0; 12];
            for _ in 0..BURN_IN + n {
                let k = x.len();
                let v = 0.6 * x[k - 3] + 0.25 * x[k - 12] + eps();
                x.push(v);
            }
            x.split_off(x.len() - n)
        }
    };
    Ok(out)
}

/// Chronological split fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p > 0.0)) || ((parts.iter().sum::<f64>() - 1.0).abs() > 1e-9) {
            return Err(DataError::InvalidSpec(format!(
                "split ratios must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// A multichannel series with chronological split boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    /// Time-major `[T * C]` values.
    pub values: Vec<f64>,
    pub channels: usize,
    pub names: Vec<String>,
    /// `[0, train_end)`, `[train_end, val_end)`, `[val_end, T)`.
    pub train_end: usize,
    pub val_end: usize,
}

impl SeriesDataset {
    pub fn new(
        values: Vec<f64>,
        channels: usize,
        names: Vec<String>,
        ratios: SplitRatios,
    ) -> Result<Self> {
        ratios.validate()?;
        if channels == 0
            || values.is_empty()
            || values.len() % channels != 0
            || names.len() != channels
        {
            return Err(DataError::InvalidSpec(format!(
                "{} values do not form {channels} named channels",
                values.len()
            )));
        }
        let t = values.len() / channels;
        let train_end = (t as f64 * ratios.train).floor() as usize;
        let val_end = (t as f64 * (ratios.train + ratios.val)).floor() as usize;
        Ok(Self {
            values,
            channels,
            names,
            train_end,
            val_end,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    pub fn split_range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end, self.val_end),
            Split::Test => (self.val_end, self.len()),
        }
    }

    /// Write a header of channel names followed by one row per step.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for t in 0..self.len() {
            w.write_record(
                self.values[t * self.channels..(t + 1) * self.channels]
                    .iter()
                    .map(|v| v.to_string()),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Generate a univariate dataset with the default 70/10/20 split.
pub fn generate_regime(spec: &RegimeSpec) -> Result<SeriesDataset> {
    let values = generate_series(spec)?;
    SeriesDataset::new(
        values,
        1,
        vec![spec.kind.to_string()],
        SplitRatios::default(),
    )
}

fn parse_cell(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

/// Read numeric columns from a CSV file.
///
/// A first row containing any non-numeric cell is a header. A first column
/// whose first data cell is non-numeric is treated as a timestamp and
/// skipped. Rows are 1-based in errors, counting the header.
pub fn load_csv(path: impl AsRef<Path>, ratios: SplitRatios) -> Result<SeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut records = Vec::new();
    for r in reader.records() {
        records.push(r?);
    }
    let records: Vec<_> = records
        .into_iter()
        .filter(|r| !(r.len() == 1 && r[0].is_empty()))
        .collect();
    if records.is_empty() {
        return Err(DataError::EmptyFile);
    }
    let width = records[0].len();
    let header = records[0].iter().any(|c| parse_cell(c).is_none());
    let first_data = usize::from(header);
    if records.len() <= first_data {
        return Err(DataError::EmptyFile);
    }
    let skip_first = width > 1
        && !records[first_data][0].is_empty()
        && parse_cell(&records[first_data][0]).is_none();
    let start_col = usize::from(skip_first);
    let channels = width - start_col;
    let names = if header {
        records[0]
            .iter()
            .skip(start_col)
            .map(str::to_string)
            .collect()
    } else {
        (0..channels).map(|c| format!("x{c}")).collect()
    };
    let mut values = Vec::with_capacity((records.len() - first_data) * channels);
    for (i, rec) in records.iter().enumerate().skip(first_data) {
        let row = i + 1;
        if rec.len() != width {
            return Err(DataError::Ragged {
                row,
                expected: width,
                found: rec.len(),
            });
        }
        for (column, cell) in rec.iter().enumerate().skip(start_col) {
            if cell.is_empty() {
                return Err(DataError::MissingValue {
                    row,
                    column: column + 1,
                });
            }
            let v = parse_cell(cell).ok_or_else(|| DataError::NonNumeric {
                row,
                column: column + 1,
                value: cell.to_string(),
            })?;
            values.push(v);
        }
    }
    SeriesDataset::new(values, channels, names, ratios)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Materialized windows of one split.
///
/// `x` is `[windows * C, L]` and `y` is `[windows * C, H]`, rows ordered
/// window-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Windows {
    pub x: Tensor,
    pub y: Tensor,
    /// Series index of each window's first input step.
    pub starts: Vec<usize>,
    pub channels: usize,
}

impl Windows {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.x.dims2().1
    }

    pub fn horizon(&self) -> usize {
        self.y.dims2().1
    }

    /// Inputs and targets of the given windows.
    pub fn batch(&self, windows: &[usize]) -> (Tensor, Tensor) {
        let c = self.channels;
        let gather = |t: &Tensor| {
            let w = t.dims2().1;
            let mut data = Vec::with_capacity(windows.len() * c * w);
            for &i in windows {
                data.extend_from_slice(&t.data()[i * c * w..(i + 1) * c * w]);
            }
            Tensor::matrix(windows.len() * c, w, data).expect("consistent rows")
        };
        (gather(&self.x), gather(&self.y))
    }

    /// The first `n` windows (all if fewer).
    pub fn head(&self, n: usize) -> Windows {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, windows: &[usize]) -> Windows {
        let (x, y) = self.batch(windows);
        Windows {
            x,
            y,
            starts: windows.iter().map(|&i| self.starts[i]).collect(),
            channels: self.channels,
        }
    }
}

/// Stride-1 windows of every split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitWindows {
    pub train: Windows,
    pub val: Windows,
    pub test: Windows,
}

impl SplitWindows {
    pub fn get(&self, split: Split) -> &Windows {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Windows of input length `l` and horizon `h` lying entirely inside one
/// split.
pub fn split_windows(ds: &SeriesDataset, split: Split, l: usize, h: usize) -> Result<Windows> {
    let (lo, hi) = ds.split_range(split);
    let needed = l + h;
    if hi - lo < needed {
        return Err(DataError::SplitTooShort {
            split: split.as_str(),
            len: hi - lo,
            needed,
        });
    }
    let c = ds.channels;
    let starts: Vec<usize> = (lo..=hi - needed).collect();
    let mut x = Vec::with_capacity(starts.len() * c * l);
    let mut y = Vec::with_capacity(starts.len() * c * h);
    for &s in &starts {
        for ch in 0..c {
            x.extend((s..s + l).map(|t| ds.value(t, ch)));
            y.extend((s + l..s + l + h).map(|t| ds.value(t, ch)));
        }
    }
    let rows = starts.len() * c;
    Ok(Windows {
        x: Tensor::matrix(rows, l, x)?,
        y: Tensor::matrix(rows, h, y)?,
        starts,
        channels: c,
    })
}

pub fn window_split(ds: &SeriesDataset, l: usize, h: usize) -> Result<SplitWindows> {
    Ok(SplitWindows {
        train: split_windows(ds, Split::Train, l, h)?,
        val: split_windows(ds, Split::Val, l, h)?,
        test: split_windows(ds, Split::Test, l, h)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use std::io::Write;

    fn noiseless(kind: RegimeKind, length: usize) -> RegimeSpec {
        RegimeSpec {
            noise_std: 0.0,
            length,
            ..RegimeSpec::new(kind, 1)
        }
    }

    #[test]
    fn linear_sine_has_period_fifty() {
        let x = generate_series(&noiseless(RegimeKind::LinearSine, 120)).unwrap();
        assert!(x[50].abs() < 1e-12);
        assert!((x[12] - x[62]).abs() < 1e-12);
    }

    #[test]
    fn triangle_wave_convention() {
        assert_eq!(tri(0.0), 0.0);
        assert!((tri(std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-12);
        assert!((tri(-std::f64::consts::FRAC_PI_2) + 1.0).abs() < 1e-12);
        assert!((tri(std::f64::consts::FRAC_PI_4) - 0.5).abs() < 1e-12);
        assert!((tri(1.0) - tri(1.0 + 2.0 * std::f64::consts::PI)).abs() < 1e-12);
    }

    #[test]
    fn threshold_ar_hand_trajectory() {
        let x = threshold_ar_trajectory(1.0, 1.0, &[0.0; 20]);
        assert!((x[2] - 0.3).abs() < 1e-15);
        // hand iteration of the two branches
        let mut h = vec![1.0f64, 1.0];
        for t in 2..20 {
            let (a, b) = (h[t - 1], h[t - 2]);
            h.push(if a > 0.0 {
                0.6 * a - 0.3 * b
            } else {
                -0.4 * a + 0.5 * b
            });
        }
        assert_eq!(x, h);
        assert!((x[3] - (0.6 * 0.3 - 0.3)).abs() < 1e-15);
        assert!((x[4] - (-0.4 * -0.12 + 0.5 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        for kind in RegimeKind::ALL {
            let a = generate_series(&RegimeSpec::new(kind, 42)).unwrap();
            let b = generate_series(&RegimeSpec::new(kind, 42)).unwrap();
            let c = generate_series(&RegimeSpec::new(kind, 43)).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
            assert_eq!(a.len(), 10_000);
            assert!(a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn switching_blocks_match_pure_generators() {
        let spec = RegimeSpec {
            length: 2000,
            ..RegimeSpec::new(RegimeKind::RegimeSwitching, 9)
        };
        let sw = generate_series(&spec).unwrap();
        let lin = generate_series(&RegimeSpec {
            kind: RegimeKind::LinearSine,
            noise_std: 0.05,
            ..spec.clone()
        })
        .unwrap();
        let mf = generate_series(&RegimeSpec {
            kind: RegimeKind::Multifreq,
            noise_std: 0.05,
            ..spec.clone()
        })
        .unwrap();
        assert_eq!(&sw[..500], &lin[..500]);
        assert_eq!(&sw[500..1000], &mf[500..1000]);
        assert_eq!(&sw[1000..1500], &lin[1000..1500]);
        assert_eq!(&sw[1500..], &mf[1500..]);
    }

    #[test]
    fn lag_recovery_follows_its_recursion() {
        let spec = RegimeSpec::new(RegimeKind::LagRecovery, 5);
        let x = generate_series(&spec).unwrap();
        let resid: Vec<f64> = (12..x.len())
            .map(|t| x[t] - 0.6 * x[t - 3] - 0.25 * x[t - 12])
            .collect();
        let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.005, "{sd}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = RegimeSpec {
            switch_period: 0,
            ..RegimeSpec::new(RegimeKind::RegimeSwitching, 1)
        };
        assert!(matches!(
            generate_series(&bad),
            Err(DataError::InvalidSpec(_))
        ));
        assert!("sawtooth".parse::<RegimeKind>().is_err());
        assert_eq!(
            "threshold_ar".parse::<RegimeKind>().unwrap(),
            RegimeKind::ThresholdAr
        );
    }

    #[test]
    fn window_counts_and_alignment() {
        let ds = SeriesDataset::new(
            (0..100).map(f64::from).collect(),
            1,
            vec!["a".into()],
            SplitRatios::default(),
        )
        .unwrap();
        assert_eq!((ds.train_end, ds.val_end), (70, 80));
        let w = split_windows(&ds, Split::Val, 6, 4).unwrap();
        assert_eq!(w.len(), 1);
        let w = split_windows(&ds, Split::Test, 6, 5).unwrap();
        assert_eq!(w.len(), 10);
        assert_eq!(w.y.get2(0, 0), w.x.get2(0, 5) + 1.0);
        assert!(matches!(
            split_windows(&ds, Split::Val, 8, 4),
            Err(DataError::SplitTooShort {
                split: "val",
                len: 10,
                needed: 12
            })
        ));
        let all = window_split(&ds, 6, 4).unwrap();
        assert_eq!(all.train.len(), 70 - 10 + 1);
    }

    #[test]
    fn multichannel_rows_are_window_major() {
        let values: Vec<f64> = (0..60).map(f64::from).collect();
        let ds = SeriesDataset::new(
            values,
            3,
            vec!["a".into(), "b".into(), "c".into()],
            SplitRatios::default(),
        )
        .unwrap();
        let w = split_windows(&ds, Split::Train, 3, 2).unwrap();
        assert_eq!(w.x.shape(), &[w.len() * 3, 3]);
        // window 1, channel 2
        assert_eq!(&w.x.data()[(3 + 2) * 3..(3 + 2) * 3 + 3], &[5.0, 8.0, 11.0]);
        let (bx, by) = w.batch(&[1]);
        assert_eq!(bx.get2(2, 0), 5.0);
        assert_eq!(by.get2(2, 0), 14.0);
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_loading() {
        let mut body = String::from("date,a,b,c\n");
        for t in 0..100 {
            body.push_str(&format!("2020-01-{t},{},{},{}\n", t, 2 * t, 0.5 * t as f64));
        }
        let ds = load_csv(write_tmp(&body).path(), SplitRatios::default()).unwrap();
        assert_eq!((ds.len(), ds.channels), (100, 3));
        assert_eq!(ds.names, vec!["a", "b", "c"]);
        assert_eq!(ds.value(10, 1), 20.0);

        let plain = load_csv(write_tmp("1,2\n3,4\n5,6\n").path(), SplitRatios::default()).unwrap();
        assert_eq!(plain.values, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(plain.names, vec!["x0", "x1"]);
    }

    #[test]
    fn csv_errors_are_distinct() {
        let r = SplitRatios::default();
        assert!(matches!(
            load_csv(write_tmp("").path(), r),
            Err(DataError::EmptyFile)
        ));
        assert!(matches!(
            load_csv(write_tmp("a,b\n").path(), r),
            Err(DataError::EmptyFile)
        ));
        assert!(matches!(
            load_csv(write_tmp("a,b\n1,2\n3\n").path(), r),
            Err(DataError::Ragged {
                row: 3,
                expected: 2,
                found: 1
            })
        ));
        assert!(matches!(
            load_csv(write_tmp("a,b\n1,2\n3,\n").path(), r),
            Err(DataError::MissingValue { row: 3, column: 2 })
        ));
        match load_csv(write_tmp("a,b\n1,2\n3,x\n").path(), r) {
            Err(DataError::NonNumeric {
                row: 3,
                column: 2,
                value,
            }) => assert_eq!(value, "x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_export_round_trips() {
        let ds = generate_regime(&RegimeSpec {
            length: 300,
            ..RegimeSpec::new(RegimeKind::Multifreq, 3)
        })
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        ds.write_csv(f.path()).unwrap();
        let back = load_csv(f.path(), SplitRatios::default()).unwrap();
        assert_eq!(back, ds);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn windows_never_cross_split_boundaries(t in 60usize..400, l in 1usize..10, h in 1usize..6) {
            let ds = SeriesDataset::new((0..t).map(|v| v as f64).collect(), 1, vec!["v".into()], SplitRatios::default()).unwrap();
            for split in [Split::Train, Split::Val, Split::Test] {
                let (lo, hi) = ds.split_range(split);
                match split_windows(&ds, split, l, h) {
                    Ok(w) => {
                        prop_assert_eq!(w.len(), hi - lo - l - h + 1);
                        for (i, &s) in w.starts.iter().enumerate() {
                            prop_assert!(s >= lo && s + l + h <= hi);
                            prop_assert_eq!(w.x.get2(i, 0), s as f64);
                            prop_assert_eq!(w.y.get2(i, h - 1), (s + l + h - 1) as f64);
                        }
                    }
                    Err(DataError::SplitTooShort { .. }) => prop_assert!(hi - lo < l + h),
                    Err(e) => prop_assert!(false, "{}", e),
                }
            }
        }
    }
}
