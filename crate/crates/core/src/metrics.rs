//! Strain image quality: SNRe, CNRe, MSSIM and PSNR.
//!
//! Degenerate cases that the formulas send to infinity (zero spread, exact
//! match) return `f64::INFINITY` and log a warning rather than failing.

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rf::StrainImage;

/// Smallest region accepted for SNRe/CNRe statistics.
pub const MIN_REGION_SAMPLES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("region {rect:?} exceeds image {dims:?}")]
    OutOfBounds { rect: Rect, dims: (usize, usize) },
    #[error("region {0:?} holds fewer than 16 samples")]
    TooSmall(Rect),
    #[error("target and background regions overlap")]
    Overlap,
    #[error("reference image is constant")]
    ConstantReference,
    #[error("dynamic range must be positive, got {0}")]
    BadDynamicRange(f64),
}

/// Half-open rectangle `[row0, row1) x [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Rect {
    pub fn new(row0: usize, row1: usize, col0: usize, col1: usize) -> Self {
        Self { row0, row1, col0, col1 }
    }

    pub fn area(&self) -> usize {
        self.row1.saturating_sub(self.row0) * self.col1.saturating_sub(self.col0)
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.row0 < other.row1 && other.row0 < self.row1 && self.col0 < other.col1 && other.col0 < self.col1
    }

    fn check(&self, dims: (usize, usize)) -> Result<(), MetricsError> {
        if self.row1 > dims.0 || self.col1 > dims.1 || self.row0 >= self.row1 || self.col0 >= self.col1 {
            return Err(MetricsError::OutOfBounds { rect: *self, dims });
        }
        if self.area() < MIN_REGION_SAMPLES {
            return Err(MetricsError::TooSmall(*self));
        }
        Ok(())
    }

    fn view<'a>(&self, img: &'a Array2<f64>) -> ArrayView2<'a, f64> {
        img.slice(s![self.row0..self.row1, self.col0..self.col1])
    }
}

/// Target (inside the inclusion) and background windows for contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub target: Rect,
    pub background: Rect,
}

impl RegionSpec {
    pub fn validate(&self, dims: (usize, usize)) -> Result<(), MetricsError> {
        self.target.check(dims)?;
        self.background.check(dims)?;
        if self.target.overlaps(&self.background) {
            return Err(MetricsError::Overlap);
        }
        Ok(())
    }
}

/// Mean and population variance.
fn moments<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let v: Vec<f64> = values.copied().collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Elastographic SNR: mean over population standard deviation.
pub fn snr_e(strain: &StrainImage, window: &Rect) -> Result<f64, MetricsError> {
    window.check(strain.dim())?;
    let (mean, var) = moments(window.view(strain.values()).iter());
    if var == 0.0 {
        log::warn!("SNRe window {window:?} has zero spread");
        return Ok(f64::INFINITY);
    }
    Ok(mean / var.sqrt())
}

/// Elastographic CNR between two sample sets,
/// `sqrt(2 (mean_b - mean_t)² / (var_b + var_t))`.
pub fn contrast_to_noise<'a>(
    target: impl Iterator<Item = &'a f64>,
    background: impl Iterator<Item = &'a f64>,
) -> f64 {
    let (mt, vt) = moments(target);
    let (mb, vb) = moments(background);
    if vt + vb == 0.0 {
        log::warn!("CNRe regions have zero spread");
        return f64::INFINITY;
    }
    (2.0 * (mb - mt).powi(2) / (vb + vt)).sqrt()
}

pub fn cnr_e(strain: &StrainImage, regions: &RegionSpec) -> Result<f64, MetricsError> {
    regions.validate(strain.dim())?;
    let img = strain.values();
    Ok(contrast_to_noise(
        regions.target.view(img).iter(),
        regions.background.view(img).iter(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    /// Side of the square uniform window.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// `L`; taken from the reference image when absent.
    pub dynamic_range: Option<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 8,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: None,
        }
    }
}

/// Dynamic range of a reference image: its value span, or its peak
/// magnitude when it is constant.
pub fn dynamic_range(reference: &Array2<f64>) -> f64 {
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let span = hi - lo;
    if span > 0.0 {
        span
    } else {
        lo.abs().max(hi.abs())
    }
}

/// Mean SSIM over every window position (stride 1), uniform weighting.
/// `a` is the reference.
pub fn mssim(a: &Array2<f64>, b: &Array2<f64>, params: &SsimParams) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch(a.dim(), b.dim()));
    }
    let l = params.dynamic_range.unwrap_or_else(|| dynamic_range(a));
    if !(l > 0.0 && l.is_finite()) {
        return Err(MetricsError::BadDynamicRange(l));
    }
    let c1 = (params.k1 * l).powi(2);
    let c2 = (params.k2 * l).powi(2);
    let (m, n) = a.dim();
    let (wy, wx) = (params.window.clamp(1, m), params.window.clamp(1, n));
    let count = (wy * wx) as f64;
    let rows: Vec<f64> = (0..=m - wy)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..=n - wx {
                let wa = a.slice(s![i..i + wy, j..j + wx]);
                let wb = b.slice(s![i..i + wy, j..j + wx]);
                let mx = wa.sum() / count;
                let my = wb.sum() / count;
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for (x, y) in wa.iter().zip(wb.iter()) {
                    let (dx, dy) = (x - mx, y - my);
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
                let (vx, vy, cxy) = (vx / count, vy / count, cxy / count);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
            acc
        })
        .collect();
    let windows = ((m - wy + 1) * (n - wx + 1)) as f64;
    Ok(rows.iter().sum::<f64>() / windows)
}

/// `20 log10(max|reference| / rms(reference - corrupted))`.
pub fn psnr(reference: &Array2<f64>, corrupted: &Array2<f64>) -> Result<f64, MetricsError> {
    if reference.dim() != corrupted.dim() {
        return Err(MetricsError::DimensionMismatch(reference.dim(), corrupted.dim()));
    }
    let first = reference.iter().next().copied().unwrap_or(0.0);
    if reference.iter().all(|v| *v == first) {
        return Err(MetricsError::ConstantReference);
    }
    let peak = reference.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mse = reference
        .iter()
        .zip(corrupted.iter())
        .map(|(r, c)| (r - c) * (r - c))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        log::warn!("PSNR of identical images");
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strain(values: Array2<f64>) -> StrainImage {
        StrainImage::new(values, 3).unwrap()
    }

    /// Alternating ±d around `mean`: population std exactly `d`.
    fn alternating(rows: usize, cols: usize, mean: f64, d: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| if (i + j) % 2 == 0 { mean + d } else { mean - d })
    }

    #[test]
    fn snr_definition() {
        let s = strain(alternating(4, 4, 0.01, 0.001));
        let v = snr_e(&s, &Rect::new(0, 4, 0, 4)).unwrap();
        assert!((v - 10.0).abs() < 1e-9);
        let c = strain(Array2::from_elem((4, 4), 0.02));
        assert_eq!(snr_e(&c, &Rect::new(0, 4, 0, 4)).unwrap(), f64::INFINITY);
        assert!(matches!(snr_e(&c, &Rect::new(0, 2, 0, 4)), Err(MetricsError::TooSmall(_))));
        assert!(matches!(snr_e(&c, &Rect::new(0, 5, 0, 4)), Err(MetricsError::OutOfBounds { .. })));
    }

    #[test]
    fn cnr_hand_case() {
        let mut img = Array2::zeros((4, 8));
        img.slice_mut(s![.., 0..4]).assign(&alternating(4, 4, 0.005, 0.001));
        img.slice_mut(s![.., 4..8]).assign(&alternating(4, 4, 0.01, 0.001));
        let regions = RegionSpec {
            target: Rect::new(0, 4, 0, 4),
            background: Rect::new(0, 4, 4, 8),
        };
        let v = cnr_e(&strain(img), &regions).unwrap();
        assert!((v - 5.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn cnr_identical_statistics_is_zero() {
        let img = alternating(4, 8, 0.01, 0.002);
        let regions = RegionSpec {
            target: Rect::new(0, 4, 0, 4),
            background: Rect::new(0, 4, 4, 8),
        };
        assert_eq!(cnr_e(&strain(img), &regions).unwrap(), 0.0);
        let flat = Array2::from_elem((4, 8), 0.01);
        assert_eq!(cnr_e(&strain(flat), &regions).unwrap(), f64::INFINITY);
        let overlapping = RegionSpec {
            target: Rect::new(0, 4, 0, 5),
            background: Rect::new(0, 4, 4, 8),
        };
        assert_eq!(overlapping.validate((4, 8)), Err(MetricsError::Overlap));
    }

    #[test]
    fn mssim_identity_and_negation() {
        let a = Array2::from_shape_fn((20, 12), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        assert_eq!(mssim(&a, &a, &SsimParams::default()).unwrap(), 1.0);
        assert!(mssim(&a, &(-&a), &SsimParams::default()).unwrap() < 1.0);
    }

    #[test]
    fn mssim_constant_windows() {
        let a = Array2::from_elem((8, 8), 1.0);
        let b = Array2::from_elem((8, 8), 2.0);
        let p = SsimParams {
            dynamic_range: Some(2.0),
            ..SsimParams::default()
        };
        let c1: f64 = 0.0004;
        let want = (4.0 + c1) / (5.0 + c1);
        let got = mssim(&a, &b, &p).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.8001).abs() < 1e-4);
    }

    #[test]
    fn mssim_rejects_mismatch() {
        let a = Array2::zeros((8, 8));
        let b = Array2::zeros((8, 9));
        assert!(matches!(
            mssim(&a, &b, &SsimParams::default()),
            Err(MetricsError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn psnr_cases() {
        let mut r = Array2::zeros((10, 10));
        r[[0, 0]] = 1.0;
        let c = &r + 0.1;
        assert!((psnr(&r, &c).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        let flat = Array2::from_elem((3, 3), 1.0);
        assert_eq!(psnr(&flat, &r.slice(s![0..3, 0..3]).to_owned()), Err(MetricsError::ConstantReference));
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let r = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 5 + j) % 7) as f64);
        let pattern = Array2::from_shape_fn((16, 16), |(i, j)| if (i * 3 + j) % 2 == 0 { 1.0 } else { -1.0 });
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let v = psnr(&r, &(&r + &(&pattern * (0.05 * k as f64)))).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    proptest! {
        #[test]
        fn snr_cnr_scale_and_shift(vals in proptest::collection::vec(0.001f64..0.05, 64),
                                   k in 0.1f64..10.0, c in -1.0f64..1.0) {
            let img = Array2::from_shape_vec((8, 8), vals).unwrap();
            let regions = RegionSpec { target: Rect::new(0, 4, 0, 8), background: Rect::new(4, 8, 0, 8) };
            let w = Rect::new(0, 8, 0, 8);
            let base_snr = snr_e(&strain(img.clone()), &w).unwrap();
            let base_cnr = cnr_e(&strain(img.clone()), &regions).unwrap();
            let scaled = strain(&img * k);
            prop_assert!((snr_e(&scaled, &w).unwrap() - base_snr).abs() <= 1e-9 * base_snr.abs().max(1.0));
            prop_assert!((cnr_e(&scaled, &regions).unwrap() - base_cnr).abs() <= 1e-9 * base_cnr.max(1.0));
            let shifted = strain(&img + c);
            prop_assert!((cnr_e(&shifted, &regions).unwrap() - base_cnr).abs() <= 1e-6 * base_cnr.max(1.0));
        }

        #[test]
        fn mssim_symmetric_bounded(a in proptest::collection::vec(-1.0f64..1.0, 120),
                                   b in proptest::collection::vec(-1.0f64..1.0, 120)) {
            let a = Array2::from_shape_vec((12, 10), a).unwrap();
            let b = Array2::from_shape_vec((12, 10), b).unwrap();
            let p = SsimParams { dynamic_range: Some(2.0), ..SsimParams::default() };
            let ab = mssim(&a, &b, &p).unwrap();
            let ba = mssim(&b, &a, &p).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab > -1.0 && ab <= 1.0);
        }
    }
}
