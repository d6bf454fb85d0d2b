//! Per-example losses and their output adjoints.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supervision for a batch: real-valued targets (one column per output) or
/// class indices.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Targets(DMatrix<f64>),
    Classes(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Targets(t) => t.nrows(),
            Labels::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Labels {
        match self {
            Labels::Targets(t) => Labels::Targets(t.select_rows(rows)),
            Labels::Classes(c) => Labels::Classes(rows.iter().map(|&i| c[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    /// `0.5 * ||f(x) - y||^2`.
    Squared,
    /// `-log softmax(f(x))[y]`.
    SoftmaxCrossEntropy,
}

impl LossSpec {
    fn check(&self, outputs: &DMatrix<f64>, labels: &Labels) -> Result<()> {
        if labels.len() != outputs.nrows() {
            return Err(Error::DimensionMismatch {
                what: "label rows",
                expected: outputs.nrows(),
                got: labels.len(),
            });
        }
        match (self, labels) {
            (LossSpec::Squared, Labels::Targets(t)) => {
                if t.ncols() != outputs.ncols() {
                    return Err(Error::DimensionMismatch {
                        what: "target width",
                        expected: outputs.ncols(),
                        got: t.ncols(),
                    });
                }
            }
            (LossSpec::SoftmaxCrossEntropy, Labels::Classes(c)) => {
                if let Some(&bad) = c.iter().find(|&&k| k >= outputs.ncols()) {
                    return Err(Error::InvalidArgument(format!(
                        "class index {bad} out of range for {} outputs",
                        outputs.ncols()
                    )));
                }
            }
            (LossSpec::Squared, Labels::Classes(_)) => {
                return Err(Error::InvalidArgument("squared loss needs real-valued targets".into()))
            }
            (LossSpec::SoftmaxCrossEntropy, Labels::Targets(_)) => {
                return Err(Error::InvalidArgument("cross-entropy loss needs class indices".into()))
            }
        }
        Ok(())
    }

    /// Mean loss over the batch.
    pub fn mean_loss(&self, outputs: &DMatrix<f64>, labels: &Labels) -> Result<f64> {
        self.mean_loss_and_delta(outputs, labels).map(|(l, _)| l)
    }

    /// Mean loss and `d(mean loss) / d outputs` (already divided by `n`).
    pub fn mean_loss_and_delta(
        &self,
        outputs: &DMatrix<f64>,
        labels: &Labels,
    ) -> Result<(f64, DMatrix<f64>)> {
        self.check(outputs, labels)?;
        let n = outputs.nrows();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let inv_n = 1.0 / n as f64;
        let mut delta = DMatrix::zeros(n, outputs.ncols());
        let mut total = 0.0;
        match labels {
            Labels::Targets(t) => {
                for i in 0..n {
                    for k in 0..outputs.ncols() {
                        let r = outputs[(i, k)] - t[(i, k)];
                        total += 0.5 * r * r;
                        delta[(i, k)] = r * inv_n;
                    }
                }
            }
            Labels::Classes(c) => {
                for i in 0..n {
                    let row = outputs.row(i);
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    let log_denom = denom.ln() + max;
                    total += log_denom - row[c[i]];
                    for k in 0..outputs.ncols() {
                        let p = (row[k] - log_denom).exp();
                        let target = if k == c[i] { 1.0 } else { 0.0 };
                        delta[(i, k)] = (p - target) * inv_n;
                    }
                }
            }
        }
        Ok((total * inv_n, delta))
    }
}

/// Fraction of rows whose arg-max output equals the class label.
pub fn accuracy(outputs: &DMatrix<f64>, classes: &[usize]) -> f64 {
    let hits = (0..outputs.nrows())
        .filter(|&i| {
            let row = outputs.row(i);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == classes[i]
        })
        .count();
    hits as f64 / outputs.nrows() as f64
}
