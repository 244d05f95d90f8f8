use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CroError, Result};
use crate::problems::battery_data::{civil_from_days, days_from_civil, BATTERY_FEATURES};
use crate::tensor::Tensor;

/// Inputs `x` (`N x m`), targets `y` (`N x n`) and optional day stamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    /// Days since 1970-01-01, when the rows are dated.
    pub timestamps: Option<Vec<i64>>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor, timestamps: Option<Vec<i64>>) -> Result<Self> {
        if x.rows() != y.rows() || timestamps.as_ref().is_some_and(|t| t.len() != x.rows()) {
            return Err(CroError::Shape(format!(
                "dataset: x {:?}, y {:?}, {} timestamps",
                x.shape(),
                y.shape(),
                timestamps.as_ref().map_or(0, Vec::len)
            )));
        }
        Ok(Self { x, y, timestamps })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn y_dim(&self) -> usize {
        self.y.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            timestamps: self
                .timestamps
                .as_ref()
                .map(|t| idx.iter().map(|&i| t[i]).collect()),
        }
    }
}

/// CSV layouts understood by [`load_csv`] and [`save_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// `x1, x2, y1, y2`.
    Portfolio,
    /// `date, price_h00..h23, logprice_prev_h00..h23, load_fcst_h00..h23,
    /// temp_prev_h00..h23, temp_fcst_h00..h23, is_weekend, is_holiday,
    /// sin_doy, cos_doy`.
    Battery,
}

impl Schema {
    pub fn columns(self) -> Vec<String> {
        match self {
            Schema::Portfolio => ["x1", "x2", "y1", "y2"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Schema::Battery => {
                let mut cols = vec!["date".to_string()];
                for prefix in [
                    "price",
                    "logprice_prev",
                    "load_fcst",
                    "temp_prev",
                    "temp_fcst",
                ] {
                    cols.extend((0..24).map(|h| format!("{prefix}_h{h:02}")));
                }
                cols.extend(
                    ["is_weekend", "is_holiday", "sin_doy", "cos_doy"]
                        .iter()
                        .map(|s| s.to_string()),
                );
                cols
            }
        }
    }
}

/// Outcome of [`load_csv`].
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    /// Rows dropped because they contained NaN.
    pub nan_rows: usize,
}

fn parse_date(s: &str) -> Option<i64> {
    let mut it = s.trim().split('-');
    let y: i64 = it.next()?.parse().ok()?;
    let m: u32 = it.next()?.parse().ok()?;
    let d: u32 = it.next()?.parse().ok()?;
    if it.next().is_some() || !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return None;
    }
    Some(days_from_civil(y, m, d))
}

pub fn format_date(days: i64) -> String {
    let (y, m, d) = civil_from_days(days);
    format!("{y:04}-{m:02}-{d:02}")
}

/// Reads a dataset in the given schema; extra columns are ignored.
pub fn load_csv(path: &Path, schema: Schema) -> Result<LoadReport> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols = schema.columns();
    let mut index = Vec::with_capacity(cols.len());
    for c in &cols {
        let pos = headers
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| CroError::MissingColumn(c.clone()))?;
        index.push(pos);
    }
    let (mut xs, mut ys, mut ts) = (Vec::new(), Vec::new(), Vec::new());
    let mut nan_rows = 0;
    for (r, rec) in reader.records().enumerate() {
        // header is line 1
        let line = r + 2;
        let rec = rec.map_err(|e| CroError::Data(format!("line {line}: {e}")))?;
        let field = |k: usize| -> Result<&str> {
            rec.get(index[k])
                .ok_or_else(|| CroError::Data(format!("line {line}: missing field `{}`", cols[k])))
        };
        let num = |k: usize| -> Result<f64> {
            let s = field(k)?;
            s.parse::<f64>().map_err(|_| {
                CroError::Data(format!(
                    "line {line}: column `{}` is not a number: `{s}`",
                    cols[k]
                ))
            })
        };
        let start = usize::from(schema == Schema::Battery);
        let values: Vec<f64> = (start..cols.len()).map(num).collect::<Result<_>>()?;
        if values.iter().any(|v| v.is_nan()) {
            nan_rows += 1;
            continue;
        }
        match schema {
            Schema::Portfolio => {
                xs.push(values[..2].to_vec());
                ys.push(values[2..].to_vec());
            }
            Schema::Battery => {
                let raw = field(0)?;
                let day = parse_date(raw)
                    .ok_or_else(|| CroError::Data(format!("line {line}: bad date `{raw}`")))?;
                ys.push(values[..24].to_vec());
                let mut x = values[24..].to_vec();
                x.push(super::battery_data::trend_feature(day));
                debug_assert_eq!(x.len(), BATTERY_FEATURES);
                xs.push(x);
                ts.push(day);
            }
        }
    }
    if nan_rows > 0 {
        warn!("{}: dropped {nan_rows} rows containing NaN", path.display());
    }
    if xs.is_empty() {
        return Err(CroError::Data(format!(
            "{}: no usable rows",
            path.display()
        )));
    }
    let dataset = Dataset::new(
        Tensor::from_rows(&xs)?,
        Tensor::from_rows(&ys)?,
        (schema == Schema::Battery).then_some(ts),
    )?;
    Ok(LoadReport { dataset, nan_rows })
}

pub fn save_csv(ds: &Dataset, path: &Path, schema: Schema) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(schema.columns())?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = Vec::new();
        match schema {
            Schema::Portfolio => {
                if ds.x_dim() != 2 || ds.y_dim() != 2 {
                    return Err(CroError::Shape(format!(
                        "portfolio schema needs 2 features and 2 targets, got {} and {}",
                        ds.x_dim(),
                        ds.y_dim()
                    )));
                }
            }
            Schema::Battery => {
                let ts = ds
                    .timestamps
                    .as_ref()
                    .ok_or_else(|| CroError::Data("battery schema needs dated rows".into()))?;
                if ds.x_dim() != BATTERY_FEATURES || ds.y_dim() != 24 {
                    return Err(CroError::Shape(format!(
                        "battery schema needs {BATTERY_FEATURES} features and 24 prices"
                    )));
                }
                rec.push(format_date(ts[i]));
            }
        }
        let x = ds.x.row_slice(i);
        match schema {
            Schema::Portfolio => {
                rec.extend(x.iter().chain(ds.y.row_slice(i)).map(f64::to_string));
            }
            Schema::Battery => {
                rec.extend(ds.y.row_slice(i).iter().map(f64::to_string));
                // the trailing trend feature is derived from the date
                rec.extend(x[..BATTERY_FEATURES - 1].iter().map(f64::to_string));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Exchangeable random split.
    Random,
    /// Test set is the chronologically last rows; train/cal split randomly.
    Temporal,
}

/// Index partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits by `(train, cal, test)` fractions.
pub fn split(ds: &Dataset, mode: SplitMode, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(CroError::InvalidArgument(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let n = ds.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_cal = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    split_sizes(ds, mode, [n_train, n_cal, n - n_train - n_cal], seed)
}

/// Splits by absolute `(train, cal, test)` sizes, which must sum to the dataset size.
pub fn split_sizes(ds: &Dataset, mode: SplitMode, sizes: [usize; 3], seed: u64) -> Result<Split> {
    let n = ds.len();
    if sizes.iter().sum::<usize>() != n {
        return Err(CroError::InvalidArgument(format!(
            "split sizes {sizes:?} do not sum to {n} rows"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut rest, test) = match mode {
        SplitMode::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let test = idx.split_off(sizes[0] + sizes[1]);
            (idx, test)
        }
        SplitMode::Temporal => {
            let ts = ds.timestamps.as_ref().ok_or_else(|| {
                CroError::InvalidArgument("temporal split requires timestamps".into())
            })?;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| (ts[i], i));
            let test = idx.split_off(sizes[0] + sizes[1]);
            idx.shuffle(&mut rng);
            (idx, test)
        }
    };
    let cal = rest.split_off(sizes[0]);
    Ok(Split {
        train: rest,
        cal,
        test,
    })
}

/// Per-column standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(x: &Tensor) -> Self {
        let (n, m) = (x.rows(), x.cols());
        let mut mean = vec![0.0; m];
        for r in 0..n {
            for (mu, v) in mean.iter_mut().zip(x.row_slice(r)) {
                *mu += v / n as f64;
            }
        }
        let mut var = vec![0.0; m];
        for r in 0..n {
            for ((s, v), mu) in var.iter_mut().zip(x.row_slice(r)).zip(&mean) {
                *s += (v - mu).powi(2) / n as f64;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn identity(m: usize) -> Self {
        Self {
            mean: vec![0.0; m],
            std: vec![1.0; m],
        }
    }

    pub fn transform(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, mu), s) in out
                .row_slice_mut(r)
                .iter_mut()
                .zip(&self.mean)
                .zip(&self.std)
            {
                *v = (*v - mu) / s;
            }
        }
        out
    }

    pub fn transform_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, mu), s)| (v - mu) / s)
            .collect()
    }

    pub fn inverse_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, mu), s)| v * s + mu)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let x = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let y = x.clone();
        Dataset::new(x, y, Some((0..n as i64).rev().collect())).unwrap()
    }

    #[test]
    fn random_split_sizes() {
        let s = split(&toy(1000), SplitMode::Random, [0.64, 0.16, 0.20], 1).unwrap();
        assert_eq!((s.train.len(), s.cal.len(), s.test.len()), (640, 160, 200));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.cal)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn temporal_split_orders_test_last() {
        let ds = toy(100);
        let s = split(&ds, SplitMode::Temporal, [0.6, 0.2, 0.2], 3).unwrap();
        let ts = ds.timestamps.as_ref().unwrap();
        let max_train = s.train.iter().chain(&s.cal).map(|&i| ts[i]).max().unwrap();
        let min_test = s.test.iter().map(|&i| ts[i]).min().unwrap();
        assert!(max_train < min_test);
        let undated = Dataset::new(ds.x.clone(), ds.y.clone(), None).unwrap();
        assert!(split(&undated, SplitMode::Temporal, [0.6, 0.2, 0.2], 3).is_err());
    }

    #[test]
    fn scaler_roundtrip() {
        let x = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let sc = FeatureScaler::fit(&x);
        assert_eq!(sc.std[1], 1.0);
        let t = sc.transform(&x);
        assert_eq!(t.row_slice(0), &[-1.0, 0.0]);
        assert_eq!(sc.inverse_row(t.row_slice(1)), vec![3.0, 5.0]);
    }

    #[test]
    fn dates_roundtrip() {
        for day in [-1000, 0, 15000, 16800] {
            assert_eq!(parse_date(&format_date(day)), Some(day));
        }
        assert_eq!(parse_date("2011-01-01"), Some(14975));
    }
}
