//! Tabular regression datasets: CSV ingestion with per-column
//! standardization, seeded train/validation/test splits and synthetic
//! generators.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    /// Standardized features, `n × d`.
    pub features: Array2<f64>,
    /// Raw targets.
    pub targets: Array1<f64>,
    pub means: Vec<f64>,
    /// Population standard deviations; 0 for constant columns.
    pub stds: Vec<f64>,
}

impl Dataset {
    /// Standardizes `raw` column-wise. Constant columns become zeros.
    pub fn from_raw(
        name: impl Into<String>,
        feature_names: Vec<String>,
        raw: Array2<f64>,
        targets: Array1<f64>,
    ) -> Result<Self> {
        let (n, d) = raw.dim();
        if d == 0 {
            return Err(invalid("dataset needs at least one feature column"));
        }
        if n == 0 || targets.len() != n {
            return Err(Error::Dimension(format!(
                "{n} feature rows but {} targets",
                targets.len()
            )));
        }
        if feature_names.len() != d {
            return Err(Error::Dimension(format!(
                "{d} feature columns but {} names",
                feature_names.len()
            )));
        }
        let mut features = raw;
        let mut means = Vec::with_capacity(d);
        let mut stds = Vec::with_capacity(d);
        for mut col in features.axis_iter_mut(Axis(1)) {
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if std > 0.0 {
                col.mapv_inplace(|v| (v - mean) / std);
            } else {
                col.fill(0.0);
            }
            means.push(mean);
            stds.push(if std > 0.0 { std } else { 0.0 });
        }
        Ok(Dataset {
            name: name.into(),
            feature_names,
            features,
            targets,
            means,
            stds,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Raw features recovered from the standardized ones.
    pub fn denormalized(&self) -> Array2<f64> {
        let mut raw = self.features.clone();
        for (j, mut col) in raw.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.means[j], self.stds[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        raw
    }

    pub fn rows(&self, indices: &[usize]) -> (Array2<f64>, Array1<f64>) {
        (
            self.features.select(Axis(0), indices),
            self.targets.select(Axis(0), indices),
        )
    }
}

/// Reads a headered numeric CSV. The target defaults to the last column.
pub fn load_csv(path: impl AsRef<Path>, target_column: Option<&str>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, &name, target_column)
}

pub fn read_csv(reader: impl std::io::Read, name: &str, target_column: Option<&str>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(invalid("CSV needs a target column and at least one feature column"));
    }
    let target = match target_column {
        Some(t) => header
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| invalid(format!("target column `{t}` not in header")))?,
        None => header.len() - 1,
    };
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != header.len() {
            return Err(Error::Data {
                row,
                column: String::new(),
                message: format!("expected {} cells, found {}", header.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let column = header[c].clone();
            if cell.is_empty() {
                return Err(Error::Data { row, column, message: "missing value".into() });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Data {
                row,
                column: column.clone(),
                message: format!("`{cell}` is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data { row, column, message: format!("`{cell}` is not finite") });
            }
            if c == target {
                targets.push(v);
            } else {
                feats.push(v);
            }
        }
    }
    let n = targets.len();
    if n == 0 {
        return Err(invalid("CSV has no data rows"));
    }
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != target)
        .map(|(_, h)| h.clone())
        .collect();
    let raw = Array2::from_shape_vec((n, names.len()), feats).expect("row lengths checked");
    Dataset::from_raw(name, names, raw, Array1::from(targets))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub validation_fraction_of_train: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.40,
            test_fraction: 0.60,
            validation_fraction_of_train: 0.25,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        SplitSpec { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(in_unit(self.train_fraction)
            && in_unit(self.test_fraction)
            && in_unit(self.validation_fraction_of_train))
        {
            return Err(invalid("split fractions must lie in (0, 1)"));
        }
        if (self.train_fraction + self.test_fraction - 1.0).abs() > 1e-9 {
            return Err(invalid("train and test fractions must sum to 1"));
        }
        Ok(())
    }

    /// `(train, validation, test)` sizes for `n` rows.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let test = round_half_up(self.test_fraction * n as f64).min(n);
        let rest = n - test;
        let val = round_half_up(self.validation_fraction_of_train * rest as f64).min(rest);
        (rest - val, val, test)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then test, validation and train slices; each set sorted.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let (train, val, test) = spec.sizes(n);
    if train < 2 || test < 2 || val < 1 {
        return Err(invalid(format!(
            "{n} rows give partitions {train}/{val}/{test} (train/validation/test); need at least 2/1/2"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut take = |k: usize| {
        let mut part: Vec<usize> = perm.drain(..k).collect();
        part.sort_unstable();
        part
    };
    let test = take(test);
    let validation = take(val);
    let train = take(train);
    Ok(Split { train, validation, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// `y = X w`, `X ~ N(0, 1)`, `w ~ N(0, 1)`.
    Linear,
    /// `y = 10 sin(π x0 x1) + 20 (x2 - 0.5)² + 10 x3 + 5 x4`, `X ~ U(0, 1)`,
    /// feature indices taken modulo `d`.
    FriedmanLike,
    /// `y = Σ_j (2 x_j if x_j > 0 else -x_j) + 3·[x0 > 0]`, `X ~ U(-1, 1)`.
    Piecewise,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SynthKind::Linear),
            "friedman-like" | "friedman" => Ok(SynthKind::FriedmanLike),
            "piecewise" => Ok(SynthKind::Piecewise),
            _ => Err(invalid(format!("unknown synthetic dataset kind `{s}`"))),
        }
    }
}

/// Generates a dataset with additive Gaussian noise of std `noise_std`.
pub fn synth_dataset(kind: SynthKind, n: usize, d: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 5 || d == 0 {
        return Err(invalid(format!("synthetic data needs n >= 5 and d >= 1, got n={n}, d={d}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(invalid("noise_std must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let x = match kind {
        SynthKind::Linear => Array2::from_shape_simple_fn((n, d), || gauss(&mut rng)),
        SynthKind::FriedmanLike => Array2::from_shape_simple_fn((n, d), || rng.random::<f64>()),
        SynthKind::Piecewise => Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0)),
    };
    let y: Array1<f64> = match kind {
        SynthKind::Linear => {
            let w = Array1::from_shape_simple_fn(d, || gauss(&mut rng));
            x.dot(&w)
        }
        SynthKind::FriedmanLike => x
            .rows()
            .into_iter()
            .map(|r| {
                let f = |i: usize| r[i % d];
                10.0 * (std::f64::consts::PI * f(0) * f(1)).sin()
                    + 20.0 * (f(2) - 0.5).powi(2)
                    + 10.0 * f(3)
                    + 5.0 * f(4)
            })
            .collect(),
        SynthKind::Piecewise => x
            .rows()
            .into_iter()
            .map(|r| {
                r.iter().map(|&v| if v > 0.0 { 2.0 * v } else { -v }).sum::<f64>()
                    + if r[0] > 0.0 { 3.0 } else { 0.0 }
            })
            .collect(),
    };
    let y = if noise_std > 0.0 {
        y.mapv(|v| v + noise_std * gauss(&mut rng))
    } else {
        y
    };
    let names = (0..d).map(|j| format!("x{j}")).collect();
    let name = match kind {
        SynthKind::Linear => "linear",
        SynthKind::FriedmanLike => "friedman-like",
        SynthKind::Piecewise => "piecewise",
    };
    Dataset::from_raw(name, names, x, y)
}

/// `1 - SS_res / SS_tot`.
pub fn r2_score(predictions: ArrayView1<f64>, targets: ArrayView1<f64>) -> Result<f64> {
    if predictions.len() != targets.len() || targets.is_empty() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mean = targets.sum() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(invalid("targets have zero variance; R² is undefined"));
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (t - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn write_dataset_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = ds.feature_names.clone();
    header.push("target".into());
    w.write_record(&header)?;
    let raw = ds.denormalized();
    for (row, t) in raw.rows().into_iter().zip(&ds.targets) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{t:?}"));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
