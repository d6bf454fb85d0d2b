//! Synthetic and file-backed datasets.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Labels;
use crate::netgraph::{predict, NetworkTopology, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    #[default]
    Targets,
    Classes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian inputs labelled by a randomly drawn teacher network of
    /// `shape`, plus Gaussian noise of standard deviation `noise`.
    TeacherStudent {
        shape: Vec<usize>,
        noise: f64,
        n: usize,
        seed: u64,
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// `k` unit-variance Gaussian clusters in `dim` dimensions whose centres
    /// are `separation` apart along the first axis.
    GaussianBlobs {
        k: usize,
        dim: usize,
        n: usize,
        seed: u64,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    /// Headered CSV; the last `label_cols` columns are labels.
    Csv {
        path: PathBuf,
        label_cols: usize,
        #[serde(default)]
        label_kind: LabelKind,
    },
}

fn default_true() -> bool {
    true
}

fn default_separation() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub labels: Labels,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Number of output columns the labels call for (classes: max label + 1).
    pub fn label_width(&self) -> usize {
        match &self.labels {
            Labels::Targets(t) => t.ncols(),
            Labels::Classes(c) => c.iter().max().map_or(0, |m| m + 1),
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    // fill row by row so the stream does not depend on storage order
    let mut m = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

/// The teacher network used by a `teacher_student` spec.
pub fn teacher(shape: &[usize], bias: bool, seed: u64) -> Result<(NetworkTopology, WeightVector)> {
    let topology = NetworkTopology::layered(shape, bias)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = WeightVector::init(&topology, &mut rng);
    Ok((topology, weights))
}

pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::TeacherStudent { shape, noise, n, seed, bias } => {
            if *n == 0 {
                return Err(Error::config("dataset.n", "must be positive"));
            }
            if !(*noise >= 0.0 && noise.is_finite()) {
                return Err(Error::config("dataset.noise", "must be a non-negative number"));
            }
            let (topology, weights) = teacher(shape, *bias, *seed).map_err(|e| Error::config("dataset.shape", e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let inputs = gaussian_matrix(&mut rng, *n, shape[0]);
            let mut targets = predict(&topology, &weights, &inputs)?;
            if *noise > 0.0 {
                targets += gaussian_matrix(&mut rng, *n, targets.ncols()) * *noise;
            }
            Ok(Dataset { inputs, labels: Labels::Targets(targets) })
        }
        DatasetSpec::GaussianBlobs { k, dim, n, seed, separation } => {
            if *k < 2 || *dim == 0 || *n == 0 {
                return Err(Error::config("dataset", "gaussian_blobs needs k >= 2, dim >= 1, n >= 1"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut inputs = gaussian_matrix(&mut rng, *n, *dim);
            let offset = (*k as f64 - 1.0) / 2.0;
            let classes: Vec<usize> = (0..*n).map(|i| i % k).collect();
            for (i, &c) in classes.iter().enumerate() {
                inputs[(i, 0)] += separation * (c as f64 - offset);
            }
            Ok(Dataset { inputs, labels: Labels::Classes(classes) })
        }
        DatasetSpec::Csv { path, label_cols, label_kind } => load_csv(path, *label_cols, *label_kind),
    }
}

/// Writes inputs then labels as a headered CSV (`x0.., y0..`). Values use
/// the shortest round-trip representation, so reloading is bit-exact.
pub fn write_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = data.inputs.ncols();
    let label_cols = match &data.labels {
        Labels::Targets(t) => t.ncols(),
        Labels::Classes(_) => 1,
    };
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).chain((0..label_cols).map(|j| format!("y{j}"))).collect();
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.inputs.row(i).iter().map(|v| v.to_string()).collect();
        match &data.labels {
            Labels::Targets(t) => row.extend(t.row(i).iter().map(|v| v.to_string())),
            Labels::Classes(c) => row.push(c[i].to_string()),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a headered numeric CSV into an `n x cols` matrix.
pub fn read_numeric_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidArgument(format!("{}: row {}: `{s}` is not a number", path.display(), line + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::DimensionMismatch { what: "csv row width", expected: first.len(), got: row.len() });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn load_csv(path: impl AsRef<Path>, label_cols: usize, label_kind: LabelKind) -> Result<Dataset> {
    let all = read_numeric_csv(path)?;
    if label_cols == 0 || label_cols >= all.ncols() {
        return Err(Error::config(
            "dataset.label_cols",
            format!("must be between 1 and {} for this file", all.ncols().saturating_sub(1)),
        ));
    }
    let d = all.ncols() - label_cols;
    let inputs = all.columns(0, d).into_owned();
    let labels = match label_kind {
        LabelKind::Targets => Labels::Targets(all.columns(d, label_cols).into_owned()),
        LabelKind::Classes => {
            if label_cols != 1 {
                return Err(Error::config("dataset.label_cols", "class labels use exactly one column"));
            }
            let classes = all
                .column(d)
                .iter()
                .map(|&c| {
                    if c >= 0.0 && c.fract() == 0.0 {
                        Ok(c as usize)
                    } else {
                        Err(Error::InvalidArgument(format!("class label {c} is not a non-negative integer")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Labels::Classes(classes)
        }
    };
    Ok(Dataset { inputs, labels })
}
