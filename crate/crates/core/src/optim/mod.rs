//! Parameters, gradients and the training loop.

pub mod adam;
pub mod gradcheck;
pub mod objective;
pub mod tape;
pub mod train;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learnable parameters: assignment logits (`d x C`), gate means (`C`) and
/// the group projection (`C x C`). Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub logits: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            logits: DMatrix::zeros(other.logits.nrows(), other.logits.ncols()),
            mu: DVector::zeros(other.mu.len()),
            q: DMatrix::zeros(other.q.nrows(), other.q.ncols()),
        }
    }

    pub fn n_features(&self) -> usize {
        self.logits.nrows()
    }

    pub fn n_groups(&self) -> usize {
        self.logits.ncols()
    }

    pub fn check_shapes(&self, d: usize) -> Result<()> {
        let c = self.n_groups();
        let ok = self.logits.nrows() == d && self.mu.len() == c && self.q.shape() == (c, c);
        if !ok {
            return Err(Error::DimensionMismatch {
                context: "parameter set",
                expected: format!("logits {d}x{c}, mu {c}, q {c}x{c}"),
                got: format!(
                    "logits {}x{}, mu {}, q {}x{}",
                    self.logits.nrows(),
                    self.logits.ncols(),
                    self.mu.len(),
                    self.q.nrows(),
                    self.q.ncols()
                ),
            });
        }
        Ok(())
    }

    /// Named flat views in a fixed order: logits, mu, q.
    pub fn blocks(&self) -> [(&'static str, &[f64]); 3] {
        [
            ("logits", self.logits.as_slice()),
            ("mu", self.mu.as_slice()),
            ("q", self.q.as_slice()),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 3] {
        [
            ("logits", self.logits.as_mut_slice()),
            ("mu", self.mu.as_mut_slice()),
            ("q", self.q.as_mut_slice()),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

/// Row-major nested vectors, the on-disk matrix layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParams {
    pub logits: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub q: Vec<Vec<f64>>,
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>], context: &'static str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|row| row.len() != c) {
        return Err(Error::DimensionMismatch {
            context,
            expected: format!("{c} columns in every row"),
            got: format!("{}", bad.len()),
        });
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl From<&ParamSet> for StoredParams {
    fn from(p: &ParamSet) -> Self {
        Self { logits: to_rows(&p.logits), mu: p.mu.iter().copied().collect(), q: to_rows(&p.q) }
    }
}

impl TryFrom<&StoredParams> for ParamSet {
    type Error = Error;

    fn try_from(s: &StoredParams) -> Result<Self> {
        let p = ParamSet {
            logits: from_rows(&s.logits, "stored logits")?,
            mu: DVector::from_vec(s.mu.clone()),
            q: from_rows(&s.q, "stored q")?,
        };
        p.check_shapes(p.logits.nrows())?;
        Ok(p)
    }
}
