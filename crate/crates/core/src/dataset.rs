//! Dense row-major data matrix.

use crate::error::{MfaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// `N x D` matrix of single-precision samples, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    values: Vec<f32>,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn new(n: usize, d: usize, values: Vec<f32>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(MfaError::InvalidParams(format!(
                "dataset needs N >= 1 and D >= 1, got N={n}, D={d}"
            )));
        }
        if values.len() != n * d {
            return Err(MfaError::DimensionMismatch {
                expected: n * d,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(MfaError::InvalidParams(format!(
                "non-finite value in row {}",
                pos / d
            )));
        }
        Ok(Self {
            n,
            d,
            values,
            split: None,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(MfaError::DimensionMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), d, values)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.d)
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        let mut out = Self::new(indices.len(), self.d, values)?;
        out.split = self.split;
        Ok(out)
    }

    /// Per-dimension mean and biased (1/N) variance, accumulated in f64.
    pub fn mean_and_variance(&self) -> (Vec<f64>, Vec<f64>) {
        let mut mean = vec![0.0; self.d];
        for r in self.rows() {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x as f64;
            }
        }
        let inv_n = 1.0 / self.n as f64;
        mean.iter_mut().for_each(|m| *m *= inv_n);
        let mut var = vec![0.0; self.d];
        for r in self.rows() {
            for ((v, &x), m) in var.iter_mut().zip(r).zip(&mean) {
                let dx = x as f64 - m;
                *v += dx * dx;
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_n);
        (mean, var)
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.d != d {
            return Err(MfaError::DimensionMismatch {
                expected: d,
                found: self.d,
            });
        }
        Ok(())
    }
}
