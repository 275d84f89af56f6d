use ndarray::Array2;

use super::field::DisplacementField;

/// Bilinear sample of `img` at fractional `(row, col)`; coordinates outside
/// the grid clamp to the boundary.
pub fn bilinear_sample(img: &Array2<f64>, row: f64, col: f64) -> f64 {
    let (m, n) = img.dim();
    let (i0, fy) = cell(row, m);
    let (j0, fx) = cell(col, n);
    let (i1, j1) = ((i0 + 1).min(m - 1), (j0 + 1).min(n - 1));
    let top = img[[i0, j0]] * (1.0 - fx) + img[[i0, j1]] * fx;
    let bottom = img[[i1, j0]] * (1.0 - fx) + img[[i1, j1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Cell index and fraction for a clamped coordinate on a grid of `len` nodes.
#[inline]
pub(crate) fn cell(x: f64, len: usize) -> (usize, f64) {
    if len == 1 {
        return (0, 0.0);
    }
    let max = (len - 1) as f64;
    let x = x.clamp(0.0, max);
    let i = (x.floor() as usize).min(len - 2);
    (i, x - i as f64)
}

fn resample_plane(src: &Array2<f64>, dst: (usize, usize), scale: f64) -> Array2<f64> {
    let (sm, sn) = src.dim();
    let (dm, dn) = dst;
    let ry = (sm - 1) as f64 / (dm - 1) as f64;
    let rx = (sn - 1) as f64 / (dn - 1) as f64;
    Array2::from_shape_fn(dst, |(i, j)| {
        scale * bilinear_sample(src, i as f64 * ry, j as f64 * rx)
    })
}

/// Resamples a field onto a `dst` grid (corner-aligned bilinear). Axial
/// values are rescaled by `dst_m / src_m` and lateral by `dst_n / src_n` so
/// the result is in destination-grid units.
///
/// # Panics
///
/// If any source or destination dimension is below 2.
pub fn resample_field(field: &DisplacementField, dst: (usize, usize)) -> DisplacementField {
    let (sm, sn) = field.dim();
    assert!(
        sm >= 2 && sn >= 2 && dst.0 >= 2 && dst.1 >= 2,
        "resample_field needs dims >= 2, got {:?} -> {:?}",
        (sm, sn),
        dst
    );
    if (sm, sn) == dst {
        return field.clone();
    }
    let axial = resample_plane(field.axial(), dst, dst.0 as f64 / sm as f64);
    let lateral = resample_plane(field.lateral(), dst, dst.1 as f64 / sn as f64);
    DisplacementField::new(axial, lateral).expect("bilinear of finite values is finite")
}
