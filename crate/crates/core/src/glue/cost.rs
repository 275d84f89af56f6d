use ndarray::Array2;

use super::{check_dims, GlueError, GlueParams};
use crate::rf::{DisplacementField, RfFrame};

/// Cell index and fraction of a clamped coordinate on `len` nodes.
#[inline]
fn axis(t: f64, len: usize) -> (usize, f64) {
    let t = t.clamp(0.0, (len - 1) as f64);
    let i = (t.floor() as usize).min(len - 2);
    (i, t - i as f64)
}

/// Derivative along one axis of a piecewise-linear function with node
/// values `node(i)`, evaluated at `t`.
#[inline]
fn derivative(t: f64, len: usize, cell: usize, frac: f64, node: impl Fn(usize) -> f64) -> f64 {
    if t < 0.0 || t > (len - 1) as f64 {
        return 0.0;
    }
    if frac == 0.0 && cell > 0 {
        0.5 * (node(cell + 1) - node(cell - 1))
    } else {
        node(cell + 1) - node(cell)
    }
}

/// Value of the bilinear interpolant of `img` at `(row, col)` together with
/// its partial derivatives `(d/drow, d/dcol)`.
///
/// Coordinates outside the grid clamp to the boundary, where the derivative
/// along the clamped axis is zero. Inside a cell the derivative is the exact
/// slope of the interpolant; on an interior grid line it is the central
/// difference of the neighbouring nodes (the limit of a symmetric difference
/// of the interpolant), one-sided on the first and last node.
pub fn sample_with_gradient(img: &Array2<f64>, row: f64, col: f64) -> (f64, f64, f64) {
    let (m, n) = img.dim();
    let (ri, rf) = axis(row, m);
    let (ci, cf) = axis(col, n);
    let row_val = |i: usize| img[[i, ci]] * (1.0 - cf) + img[[i, ci + 1]] * cf;
    let col_val = |j: usize| img[[ri, j]] * (1.0 - rf) + img[[ri + 1, j]] * rf;
    let value = row_val(ri) * (1.0 - rf) + row_val(ri + 1) * rf;
    let d_row = derivative(row, m, ri, rf, row_val);
    let d_col = derivative(col, n, ci, cf, col_val);
    (value, d_row, d_col)
}

/// Data residual `I1 - I2(i + a, j + l)` and the gradient of `I2` there, for
/// every sample, in row-major order.
pub(crate) fn linearize(pre: &RfFrame, post: &RfFrame, field: &DisplacementField) -> Vec<(f64, f64, f64)> {
    let i1 = pre.samples();
    let i2 = post.samples();
    let (a, l) = (field.axial(), field.lateral());
    i1.indexed_iter()
        .map(|((i, j), v)| {
            let (w, gr, gc) = sample_with_gradient(i2, i as f64 + a[[i, j]], j as f64 + l[[i, j]]);
            (v - w, gr, gc)
        })
        .collect()
}

/// Sum of squared first differences along both axes, weighted.
pub(crate) fn smoothness(x: &Array2<f64>, w_axial: f64, w_lateral: f64) -> f64 {
    let (m, n) = x.dim();
    let mut total = 0.0;
    if w_axial != 0.0 {
        let mut s = 0.0;
        for j in 0..n {
            for i in 1..m {
                let d = x[[i, j]] - x[[i - 1, j]];
                s += d * d;
            }
        }
        total += w_axial * s;
    }
    if w_lateral != 0.0 {
        let mut s = 0.0;
        for j in 1..n {
            for i in 0..m {
                let d = x[[i, j]] - x[[i, j - 1]];
                s += d * d;
            }
        }
        total += w_lateral * s;
    }
    total
}

/// The global cost: squared intensity mismatch between `pre` and the
/// displaced `post` over every sample, plus weighted squared first
/// differences of both displacement components along both axes.
pub fn cost_value(
    pre: &RfFrame,
    post: &RfFrame,
    field: &DisplacementField,
    params: &GlueParams,
) -> Result<f64, GlueError> {
    check_dims(pre, post, field)?;
    let data: f64 = linearize(pre, post, field).iter().map(|(r, _, _)| r * r).sum();
    Ok(data
        + smoothness(field.axial(), params.alpha_axial, params.alpha_lateral)
        + smoothness(field.lateral(), params.beta_axial, params.beta_lateral))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rf::Acquisition;
    use ndarray::array;

    fn frame(s: Array2<f64>) -> RfFrame {
        RfFrame::new(s, Acquisition::default()).unwrap()
    }

    #[test]
    fn gradient_matches_interpolant_inside_cells() {
        let img = array![[0.0, 1.0, 4.0], [2.0, 5.0, 3.0], [7.0, -1.0, 0.5]];
        let h = 1e-6;
        for &(r, c) in &[(0.3, 0.4), (1.7, 0.2), (0.5, 1.5), (1.25, 1.75)] {
            let (v, dr, dc) = sample_with_gradient(&img, r, c);
            assert!((v - crate::rf::bilinear_sample(&img, r, c)).abs() < 1e-14);
            let fr = (sample_with_gradient(&img, r + h, c).0 - sample_with_gradient(&img, r - h, c).0) / (2.0 * h);
            let fc = (sample_with_gradient(&img, r, c + h).0 - sample_with_gradient(&img, r, c - h).0) / (2.0 * h);
            assert!((dr - fr).abs() < 1e-8 && (dc - fc).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_on_nodes_is_central_difference() {
        let img = array![[0.0, 1.0, 4.0], [2.0, 5.0, 3.0], [7.0, -1.0, 0.5]];
        let (v, dr, dc) = sample_with_gradient(&img, 1.0, 1.0);
        assert_eq!(v, 5.0);
        assert_eq!(dr, 0.5 * (-1.0 - 1.0));
        assert_eq!(dc, 0.5 * (3.0 - 2.0));
        // One-sided at the first and last node.
        let (_, dr, dc) = sample_with_gradient(&img, 0.0, 2.0);
        assert_eq!(dr, 3.0 - 4.0);
        assert_eq!(dc, 4.0 - 1.0);
        // Clamped outside: no slope along the clamped axis.
        let (v, dr, _) = sample_with_gradient(&img, -3.0, 0.0);
        assert_eq!((v, dr), (0.0, 0.0));
    }

    #[test]
    fn identical_frames_zero_cost() {
        let s = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 * 0.7).sin() + j as f64);
        let f = frame(s);
        let c = cost_value(&f, &f, &DisplacementField::zeros(5, 4), &GlueParams::default()).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn exact_shift_zero_cost() {
        // Pattern flat near the bottom/right edges so clamped samples still match.
        let (m, n) = (9, 6);
        let g = |i: usize, j: usize| ((i * 3 + j * 5) % 7) as f64 + 0.25 * i as f64;
        let pre = frame(Array2::from_shape_fn((m, n), |(i, j)| g(i.min(m - 3), j.min(n - 2))));
        let post = frame(Array2::from_shape_fn((m, n), |(i, j)| {
            g(i.saturating_sub(2).min(m - 3), j.saturating_sub(1).min(n - 2))
        }));
        let field = DisplacementField::constant(m, n, 2.0, 1.0);
        let c = cost_value(&pre, &post, &field, &GlueParams::default()).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn hand_summed_data_term() {
        let pre = frame(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]);
        let post = frame(array![[1.5, 2.0, 2.0], [4.0, 3.0, 6.0], [9.0, 8.0, 7.5]]);
        // (−0.5)² + 0 + 1² + 0 + 2² + 0 + (−2)² + 0 + 1.5² = 11.5
        let c = cost_value(&pre, &post, &DisplacementField::zeros(3, 3), &GlueParams::default()).unwrap();
        assert_eq!(c, 11.5);
    }

    #[test]
    fn smoothness_terms_by_hand() {
        let pre = frame(Array2::zeros((2, 3)));
        let axial = array![[0.0, 1.0, 3.0], [2.0, 2.0, 2.0]];
        let lateral = array![[1.0, 1.0, 1.0], [0.0, 0.0, 4.0]];
        let field = DisplacementField::new(axial, lateral).unwrap();
        let p = GlueParams {
            alpha_axial: 1.0,
            alpha_lateral: 10.0,
            beta_axial: 100.0,
            beta_lateral: 1000.0,
            ..GlueParams::default()
        };
        // axial-axis diffs of a: 2,1,-1 → 6; lateral diffs of a: 1,2,0,0 → 5
        // axial diffs of l: -1,-1,3 → 11; lateral diffs of l: 0,0,0,4 → 16
        let c = cost_value(&pre, &pre, &field, &p).unwrap();
        assert_eq!(c, 6.0 + 50.0 + 1100.0 + 16000.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = frame(Array2::zeros((3, 3)));
        let b = frame(Array2::zeros((3, 4)));
        assert!(matches!(
            cost_value(&a, &b, &DisplacementField::zeros(3, 3), &GlueParams::default()),
            Err(GlueError::DimensionMismatch { .. })
        ));
    }
}
