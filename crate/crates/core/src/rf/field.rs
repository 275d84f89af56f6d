use ndarray::Array2;

use super::frame::{check_finite, FrameError};

/// Per-sample displacement: axial in samples, lateral in lines.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    axial: Array2<f64>,
    lateral: Array2<f64>,
}

impl DisplacementField {
    pub fn new(axial: Array2<f64>, lateral: Array2<f64>) -> Result<Self, FrameError> {
        if axial.dim() != lateral.dim() {
            return Err(FrameError::DimensionMismatch {
                expected: axial.dim(),
                found: lateral.dim(),
            });
        }
        check_finite(&axial)?;
        check_finite(&lateral)?;
        Ok(Self { axial, lateral })
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            axial: Array2::zeros((m, n)),
            lateral: Array2::zeros((m, n)),
        }
    }

    pub fn constant(m: usize, n: usize, axial: f64, lateral: f64) -> Self {
        Self {
            axial: Array2::from_elem((m, n), axial),
            lateral: Array2::from_elem((m, n), lateral),
        }
    }

    pub fn axial(&self) -> &Array2<f64> {
        &self.axial
    }

    pub fn lateral(&self) -> &Array2<f64> {
        &self.lateral
    }

    pub fn dim(&self) -> (usize, usize) {
        self.axial.dim()
    }

    pub fn into_parts(self) -> (Array2<f64>, Array2<f64>) {
        (self.axial, self.lateral)
    }

    /// Componentwise sum, used to apply refinement increments.
    pub fn add(&self, other: &DisplacementField) -> Result<DisplacementField, FrameError> {
        if self.dim() != other.dim() {
            return Err(FrameError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        DisplacementField::new(&self.axial + &other.axial, &self.lateral + &other.lateral)
    }

    /// Largest absolute axial and lateral entries.
    pub fn max_abs(&self) -> (f64, f64) {
        let m = |a: &Array2<f64>| a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        (m(&self.axial), m(&self.lateral))
    }
}

/// Axial strain image, compression positive.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainImage {
    values: Array2<f64>,
    window_len: usize,
}

impl StrainImage {
    pub fn new(values: Array2<f64>, window_len: usize) -> Result<Self, FrameError> {
        check_finite(&values)?;
        Ok(Self { values, window_len })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}
