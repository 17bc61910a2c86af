use std::f64::consts::PI;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::ad::Tensor;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    /// Two interleaved half circles: class 0 on `(cos θ, sin θ)`, class 1 on
    /// `(1 − cos θ, 0.5 − sin θ)`, `θ ~ U[0, π]`.
    TwoMoons,
    /// `classes` isotropic Gaussians with means evenly spaced on a circle of
    /// radius `separation`.
    GaussBlobs { classes: usize, separation: f64 },
    /// Concentric annuli: class `c` at radius `c + 1`.
    Rings { classes: usize },
    /// Numeric CSV with a header row; the last column holds integer labels.
    TabularCsv { path: PathBuf },
}

/// Everything needed to regenerate a dataset. `noise` is the standard
/// deviation of the Gaussian jitter (ignored for CSV data).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Split {
        let d = self.x.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Split {
            x: Tensor::new(vec![idx.len(), d], data).expect("non-empty subset"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train.x.cols()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn synth_point(kind: &DatasetKind, class: usize, noise: f64, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let (x, y) = match kind {
        DatasetKind::TwoMoons => {
            let t = rng.random_range(0.0..PI);
            if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            }
        }
        DatasetKind::GaussBlobs { classes, separation } => {
            let a = 2.0 * PI * class as f64 / *classes as f64;
            (separation * a.cos(), separation * a.sin())
        }
        DatasetKind::Rings { .. } => {
            let t = rng.random_range(0.0..2.0 * PI);
            let r = (class + 1) as f64;
            (r * t.cos(), r * t.sin())
        }
        DatasetKind::TabularCsv { .. } => unreachable!("CSV data is not synthesized"),
    };
    [x + noise * normal(rng), y + noise * normal(rng)]
}

fn synth_split(kind: &DatasetKind, classes: usize, n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Split {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let data = labels.iter().flat_map(|&c| synth_point(kind, c, noise, rng)).collect();
    Split {
        x: Tensor::new(vec![n, 2], data).expect("n checked positive"),
        y: labels,
    }
}

fn load_csv(path: &PathBuf) -> Result<(Vec<Vec<f64>>, Vec<usize>), HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| HarnessError::Data(format!("row {}: {e}", i + 1)))?;
        if rec.len() < 2 {
            return Err(HarnessError::Data(format!("row {}: need features and a label", i + 1)));
        }
        let mut vals = Vec::with_capacity(rec.len() - 1);
        for f in rec.iter().take(rec.len() - 1) {
            let v: f64 = f.trim().parse().map_err(|_| HarnessError::Data(format!("row {}: bad number {f:?}", i + 1)))?;
            if !v.is_finite() {
                return Err(HarnessError::Data(format!("row {}: non-finite feature", i + 1)));
            }
            vals.push(v);
        }
        let label = rec[rec.len() - 1].trim();
        labels.push(label.parse().map_err(|_| HarnessError::Data(format!("row {}: bad label {label:?}", i + 1)))?);
        if rows.first().is_some_and(|r: &Vec<f64>| r.len() != vals.len()) {
            return Err(HarnessError::Data(format!("row {}: column count changed", i + 1)));
        }
        rows.push(vals);
    }
    Ok((rows, labels))
}

fn rows_to_split(rows: &[Vec<f64>], labels: &[usize], idx: &[usize]) -> Split {
    let d = rows[0].len();
    Split {
        x: Tensor::new(vec![idx.len(), d], idx.iter().flat_map(|&i| rows[i].clone()).collect()).expect("non-empty"),
        y: idx.iter().map(|&i| labels[i]).collect(),
    }
}

/// Deterministic in `spec`; train and test points are drawn independently.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, HarnessError> {
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(HarnessError::Data("train and test splits must be non-empty".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(HarnessError::Data(format!("noise must be non-negative, got {}", spec.noise)));
    }
    let mut rng = seed::rng(seed::derive_seed(spec.seed, seed::stream::DATA, 0));
    let (name, classes) = match &spec.kind {
        DatasetKind::TwoMoons => ("two_moons", 2),
        DatasetKind::GaussBlobs { classes, .. } => ("gauss_blobs", *classes),
        DatasetKind::Rings { classes } => ("rings", *classes),
        DatasetKind::TabularCsv { path } => {
            let (rows, labels) = load_csv(path)?;
            let n = spec.n_train + spec.n_test;
            if rows.len() < n {
                return Err(HarnessError::Data(format!("{} rows cannot fill {n} requested samples", rows.len())));
            }
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            if classes < 2 {
                return Err(HarnessError::Data("need at least two classes".into()));
            }
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.shuffle(&mut rng);
            return Ok(Dataset {
                name: "tabular_csv".into(),
                classes,
                train: rows_to_split(&rows, &labels, &order[..spec.n_train]),
                test: rows_to_split(&rows, &labels, &order[spec.n_train..n]),
            });
        }
    };
    if classes < 2 {
        return Err(HarnessError::Data(format!("need at least two classes, got {classes}")));
    }
    if spec.n_train < classes || spec.n_test < classes {
        return Err(HarnessError::Data(format!("each split needs at least {classes} samples")));
    }
    let train = synth_split(&spec.kind, classes, spec.n_train, spec.noise, &mut rng);
    let test = synth_split(&spec.kind, classes, spec.n_test, spec.noise, &mut rng);
    Ok(Dataset {
        name: name.into(),
        classes,
        train,
        test,
    })
}
