//! Jacobi-preconditioned conjugate gradients for the refinement system.

use ndarray::Array2;

use super::system::{dot, SparseSystem};
use super::{GlueError, GlueParams};
use crate::rf::DisplacementField;

/// Outcome of one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Interleaved `(Δa, Δl)` in the system's unknown order.
    pub increments: Vec<f64>,
    pub iterations: usize,
    /// `‖b - MΔ‖ / ‖b‖`.
    pub relative_residual: f64,
}

impl SolveReport {
    /// Reshapes the increments onto the sample grid.
    pub fn to_field(&self, grid: (usize, usize)) -> DisplacementField {
        increments_to_field(&self.increments, grid)
    }
}

pub fn increments_to_field(x: &[f64], (m, n): (usize, usize)) -> DisplacementField {
    let axial = Array2::from_shape_fn((m, n), |(i, j)| x[2 * (j * m + i)]);
    let lateral = Array2::from_shape_fn((m, n), |(i, j)| x[2 * (j * m + i) + 1]);
    DisplacementField::new(axial, lateral).expect("solver iterates are finite")
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Solves `M Δ = b` to `params.solver_tolerance` relative residual.
///
/// A non-positive diagonal entry or a non-positive curvature `pᵀMp` means
/// the matrix is not positive definite and yields `SingularSystem`. Running
/// out of iterations yields `NoConvergence` carrying the iterate with the
/// smallest residual seen.
pub fn solve_refinement(system: &SparseSystem, params: &GlueParams) -> Result<SolveReport, GlueError> {
    let size = system.size();
    let b = system.rhs();
    let diag = system.diagonal();
    if let Some(r) = diag.iter().position(|d| !(*d > 0.0)) {
        return Err(GlueError::SingularSystem(format!("diagonal entry {r} is {}", diag[r])));
    }
    let inv_diag: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();

    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; size];
    if b_norm == 0.0 {
        return Ok(SolveReport {
            increments: x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut mp = vec![0.0; size];
    let mut rz = dot(&r, &z);
    let mut best = (1.0, x.clone());

    for iter in 1..=params.solver_max_iters {
        system.mul_vec_into(&p, &mut mp);
        let curvature = dot(&p, &mp);
        if !(curvature > 0.0) {
            return Err(GlueError::SingularSystem(format!(
                "non-positive curvature {curvature:e} at iteration {iter}"
            )));
        }
        let alpha = rz / curvature;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &mp, &mut r);
        let rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= params.solver_tolerance {
            return Ok(SolveReport {
                increments: x,
                iterations: iter,
                relative_residual: rel,
            });
        }
        if rel < best.0 {
            best = (rel, x.clone());
        }
        for ((zi, ri), di) in z.iter_mut().zip(&r).zip(&inv_diag) {
            *zi = ri * di;
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Err(GlueError::NoConvergence {
        best: SolveReport {
            increments: best.1,
            iterations: params.solver_max_iters,
            relative_residual: best.0,
        },
    })
}
