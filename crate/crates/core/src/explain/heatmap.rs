use crate::error::{Error, Result};

/// Tolerance on the unit sum of a normalized heatmap.
pub const NORMALIZED_TOL: f64 = 1e-9;

/// Per-pixel relevance map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl Heatmap {
    /// A raw (unnormalized, possibly signed) map.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                shape: vec![rows, cols],
                expected: rows * cols,
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Heatmap {
            rows,
            cols,
            values,
            normalized: false,
        })
    }

    /// Wraps values that already form a distribution (nonnegative, unit sum).
    pub fn from_normalized(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let mut h = Heatmap::new(rows, cols, values)?;
        if h.values.iter().any(|&v| v < 0.0) || (h.sum() - 1.0).abs() > NORMALIZED_TOL {
            return Err(Error::NotNormalized);
        }
        h.normalized = true;
        Ok(h)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `|h| / Σ|h|`. Idempotent and invariant to positive rescaling.
    pub fn normalize(&self) -> Result<Heatmap> {
        let total: f64 = self.values.iter().map(|v| v.abs()).sum();
        if total == 0.0 {
            return Err(Error::DegenerateExplanation);
        }
        Ok(Heatmap {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v.abs() / total).collect(),
            normalized: true,
        })
    }

    pub(crate) fn check_same_shape(&self, other: &Heatmap, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }
}

pub fn normalize(h: &Heatmap) -> Result<Heatmap> {
    h.normalize()
}
