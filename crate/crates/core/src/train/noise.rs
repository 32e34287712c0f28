use rand::Rng;

use crate::error::{Error, Result};

/// Row-stochastic label transition matrix `Q[y][y']`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    rows: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    /// Clean ratio `r` on the diagonal, `(1 - r) / (K - 1)` elsewhere.
    pub fn uniform(classes: usize, r: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("label noise needs at least 2 classes, got {classes}")));
        }
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("clean ratio {r} outside [0, 1]")));
        }
        let off = (1.0 - r) / (classes - 1) as f64;
        let rows = (0..classes).map(|i| (0..classes).map(|j| if i == j { r } else { off }).collect()).collect();
        Ok(ConfusionMatrix { rows })
    }

    /// Arbitrary matrix; each row must be non-negative and sum to 1 within 1e-9.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Config(format!("row {i} has {} entries, expected {k}", row.len())));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&q| !(q >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("row {i} is not a probability distribution (sums to {sum})")));
            }
        }
        Ok(ConfusionMatrix { rows })
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.rows[y]
    }
}

/// Resamples every label from its row of `q`, independently.
pub fn corrupt_labels<R: Rng + ?Sized>(labels: &[usize], q: &ConfusionMatrix, rng: &mut R) -> Result<Vec<usize>> {
    let k = q.classes();
    labels
        .iter()
        .map(|&y| {
            if y >= k {
                return Err(Error::invalid("corrupt_labels", format!("label {y} outside [0, {k})")));
            }
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (j, &p) in q.row(y).iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(j);
                }
            }
            // rounding left `acc` just below 1; fall back to the last class with mass
            Ok(q.row(y).iter().rposition(|&p| p > 0.0).unwrap_or(y))
        })
        .collect()
}
