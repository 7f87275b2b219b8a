use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::FullTrajectory;
use crate::error::{Error, Result};

/// Per-dimension affine map of corpus data onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    /// Min/max over every timestep of every episode (states then actions).
    pub fn fit(corpus: &[FullTrajectory]) -> Result<Self> {
        let first = corpus
            .first()
            .ok_or_else(|| Error::Empty("corpus".into()))?;
        let dim = first.states.ncols() + first.actions.ncols();
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for ep in corpus {
            let m = ep.matrix();
            if m.ncols() != dim {
                return Err(Error::shape("episode width", dim, m.ncols()));
            }
            for row in m.outer_iter() {
                for (d, &v) in row.iter().enumerate() {
                    min[d] = min[d].min(v);
                    max[d] = max[d].max(v);
                }
            }
        }
        let norm = Self { min, max };
        for d in norm.degenerate_dims() {
            warn!(dim = d, "constant corpus dimension; it normalizes to 0");
        }
        Ok(norm)
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Dimensions with `max == min`.
    pub fn degenerate_dims(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&d| self.max[d] <= self.min[d])
            .collect()
    }

    fn check(&self, m: ArrayView2<f64>) -> Result<()> {
        if m.ncols() != self.dim() {
            return Err(Error::shape("normalizer width", self.dim(), m.ncols()));
        }
        Ok(())
    }

    pub fn normalize(&self, m: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(m)?;
        let mut out = m.to_owned();
        for (d, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, hi) = (self.min[d], self.max[d]);
            if hi > lo {
                col.mapv_inplace(|v| 2.0 * (v - lo) / (hi - lo) - 1.0);
            } else {
                col.fill(0.0);
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, m: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(m)?;
        let mut out = m.to_owned();
        for (d, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, hi) = (self.min[d], self.max[d]);
            if hi > lo {
                col.mapv_inplace(|v| (v + 1.0) * 0.5 * (hi - lo) + lo);
            } else {
                col.fill(lo);
            }
        }
        Ok(out)
    }
}
