//! Axial strain by sliding-window least-squares differentiation.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rf::{DisplacementField, StrainImage};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StrainError {
    #[error("window length {0} must be odd and at least 3")]
    BadWindow(usize),
    #[error("window length {window} exceeds the {rows} axial samples")]
    WindowTooLarge { window: usize, rows: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrainParams {
    /// Axial samples per fit; odd.
    pub window_len: usize,
}

impl Default for StrainParams {
    fn default() -> Self {
        // About 2.3 mm at 40 MHz.
        Self { window_len: 121 }
    }
}

/// Inclusive window `[lo, hi]` around row `i`, truncated at the edges but
/// never shorter than three points.
fn window(i: usize, half: usize, rows: usize) -> (usize, usize) {
    let mut lo = i.saturating_sub(half);
    let mut hi = (i + half).min(rows - 1);
    while hi - lo + 1 < 3 {
        if lo > 0 {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    (lo, hi)
}

/// Ordinary least-squares slope of `y[lo..=hi]` against the row index.
fn ols_slope(y: impl Iterator<Item = f64>, lo: usize, hi: usize) -> f64 {
    let n = (hi - lo + 1) as f64;
    let centre = 0.5 * (lo + hi) as f64;
    let sxx = n * (n * n - 1.0) / 12.0;
    let sxy: f64 = y.zip(lo..=hi).map(|(v, i)| (i as f64 - centre) * v).sum();
    sxy / sxx
}

/// Strain image from the axial displacement component.
///
/// Displacement is in samples and depth in samples, so the slope is already
/// dimensionless (the axial spacing cancels). Values are reported
/// compression positive: a field that shrinks with depth, `a = -ε i`, gives
/// strain `ε`.
pub fn least_squares_strain(field: &DisplacementField, params: &StrainParams) -> Result<StrainImage, StrainError> {
    let w = params.window_len;
    if w < 3 || w % 2 == 0 {
        return Err(StrainError::BadWindow(w));
    }
    let (m, n) = field.dim();
    if w > m {
        return Err(StrainError::WindowTooLarge { window: w, rows: m });
    }
    let half = w / 2;
    let axial = field.axial();
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let col = axial.column(j);
            (0..m)
                .map(|i| {
                    let (lo, hi) = window(i, half, m);
                    -ols_slope((lo..=hi).map(|r| col[r]), lo, hi)
                })
                .collect()
        })
        .collect();
    let values = Array2::from_shape_fn((m, n), |(i, j)| columns[j][i]);
    Ok(StrainImage::new(values, w).expect("slopes of finite data are finite"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field_from(axial: Array2<f64>) -> DisplacementField {
        let dim = axial.dim();
        DisplacementField::new(axial, Array2::zeros(dim)).unwrap()
    }

    #[test]
    fn linear_ramp_gives_constant_strain() {
        let f = field_from(Array2::from_shape_fn((60, 3), |(i, _)| 0.02 * i as f64));
        let s = least_squares_strain(&f, &StrainParams { window_len: 7 }).unwrap();
        // Compression positive: an increasing displacement is negative strain.
        assert!(s.values().iter().all(|v| (v + 0.02).abs() < 1e-14));
        let f = field_from(Array2::from_shape_fn((60, 3), |(i, _)| -0.02 * i as f64));
        let s = least_squares_strain(&f, &StrainParams { window_len: 43 }).unwrap();
        assert!(s.values().iter().all(|v| (v - 0.02).abs() < 1e-14));
    }

    #[test]
    fn constant_field_zero_strain() {
        let f = field_from(Array2::from_elem((20, 4), 3.7));
        let s = least_squares_strain(&f, &StrainParams { window_len: 5 }).unwrap();
        assert!(s.values().iter().all(|v| v.abs() < 1e-14));
        assert_eq!(s.dim(), (20, 4));
    }

    #[test]
    fn squares_slope_at_centre() {
        // Σ(x-3)(x²) over x=0..6 = 168, Σ(x-3)² = 28, slope 6.
        let f = field_from(Array2::from_shape_fn((7, 2), |(i, _)| (i * i) as f64));
        let s = least_squares_strain(&f, &StrainParams { window_len: 7 }).unwrap();
        assert!((s.values()[[3, 0]] + 6.0).abs() < 1e-12);
        // Edge windows shrink: row 0 fits x=0..3 → slope of squares = 3.
        assert!((s.values()[[0, 1]] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn edge_window_keeps_three_points() {
        assert_eq!(window(0, 1, 10), (0, 2));
        assert_eq!(window(9, 1, 10), (7, 9));
        assert_eq!(window(5, 3, 10), (2, 8));
        assert_eq!(window(0, 3, 10), (0, 3));
    }

    #[test]
    fn window_errors() {
        let f = field_from(Array2::zeros((10, 2)));
        assert_eq!(
            least_squares_strain(&f, &StrainParams { window_len: 4 }),
            Err(StrainError::BadWindow(4))
        );
        assert_eq!(
            least_squares_strain(&f, &StrainParams { window_len: 11 }),
            Err(StrainError::WindowTooLarge { window: 11, rows: 10 })
        );
    }

    proptest! {
        #[test]
        fn linear_and_shift_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 48),
            b in proptest::collection::vec(-5.0f64..5.0, 48),
            c1 in -3.0f64..3.0, c2 in -3.0f64..3.0, shift in -100.0f64..100.0,
        ) {
            let p = StrainParams { window_len: 9 };
            let fa = field_from(Array2::from_shape_vec((24, 2), a).unwrap());
            let fb = field_from(Array2::from_shape_vec((24, 2), b).unwrap());
            let combo = field_from(fa.axial() * c1 + fb.axial() * c2);
            let sa = least_squares_strain(&fa, &p).unwrap();
            let sb = least_squares_strain(&fb, &p).unwrap();
            let sc = least_squares_strain(&combo, &p).unwrap();
            for ((x, y), z) in sa.values().iter().zip(sb.values()).zip(sc.values()) {
                prop_assert!((c1 * x + c2 * y - z).abs() < 1e-12);
            }
            let shifted = field_from(fa.axial() + shift);
            let ss = least_squares_strain(&shifted, &p).unwrap();
            for (x, y) in sa.values().iter().zip(ss.values()) {
                prop_assert!((x - y).abs() < 1e-11);
            }
        }
    }
}
