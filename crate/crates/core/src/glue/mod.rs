//! Global refinement of a coarse displacement field.
//!
//! The cost couples every RF sample at once:
//!
//! ```text
//! C(a, l) = Σ [I1(i,j) - I2(i + a_ij, j + l_ij)]²
//!         + α_ax Σ (a_ij - a_i-1,j)² + α_lat Σ (a_ij - a_i,j-1)²
//!         + β_ax Σ (l_ij - l_i-1,j)² + β_lat Σ (l_ij - l_i,j-1)²
//! ```
//!
//! Each outer iteration linearizes `I2` about the current field, assembles
//! the symmetric positive-definite stationarity system of the resulting
//! quadratic in `(Δa, Δl)` and solves it with conjugate gradients.

mod cost;
mod solver;
mod system;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rf::{DisplacementField, FrameError, RfFrame};

pub use cost::{cost_value, sample_with_gradient};
pub use solver::{increments_to_field, solve_refinement, SolveReport};
pub use system::{build_linear_system, SparseSystem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlueError {
    #[error("dimension mismatch: pre {pre:?}, post {post:?}, field {field:?}")]
    DimensionMismatch {
        pre: (usize, usize),
        post: (usize, usize),
        field: (usize, usize),
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("system is not positive definite: {0}")]
    SingularSystem(String),
    #[error("solver stopped after {} iterations at relative residual {:e}", best.iterations, best.relative_residual)]
    NoConvergence { best: SolveReport },
    #[error("malformed system: {0}")]
    SystemShape(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Weights are relative to the data term, so they assume a fixed RF gain;
/// the defaults suit frames scaled to unit peak amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlueParams {
    /// Continuity of the axial component along the axial axis.
    pub alpha_axial: f64,
    /// Continuity of the axial component along the lateral axis.
    pub alpha_lateral: f64,
    /// Continuity of the lateral component along the axial axis.
    pub beta_axial: f64,
    /// Continuity of the lateral component along the lateral axis.
    pub beta_lateral: f64,
    pub outer_iterations: usize,
    pub solver_tolerance: f64,
    pub solver_max_iters: usize,
}

impl Default for GlueParams {
    fn default() -> Self {
        Self {
            alpha_axial: 20.0,
            alpha_lateral: 4.0,
            beta_axial: 40.0,
            beta_lateral: 2.0,
            outer_iterations: 2,
            solver_tolerance: 1e-6,
            solver_max_iters: 2000,
        }
    }
}

impl GlueParams {
    pub fn validate(&self) -> Result<(), GlueError> {
        let w = [self.alpha_axial, self.alpha_lateral, self.beta_axial, self.beta_lateral];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(GlueError::InvalidParams(format!("weights must be finite and >= 0: {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(GlueError::InvalidParams("at least one weight must be positive".into()));
        }
        if self.outer_iterations == 0 || self.solver_max_iters == 0 {
            return Err(GlueError::InvalidParams("iteration counts must be at least 1".into()));
        }
        if !(self.solver_tolerance > 0.0 && self.solver_tolerance <= 1e-2) {
            return Err(GlueError::InvalidParams(format!(
                "solver tolerance {} outside (0, 1e-2]",
                self.solver_tolerance
            )));
        }
        Ok(())
    }

    /// All four weights multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha_axial: self.alpha_axial * k,
            alpha_lateral: self.alpha_lateral * k,
            beta_axial: self.beta_axial * k,
            beta_lateral: self.beta_lateral * k,
            ..*self
        }
    }
}

pub(crate) fn check_dims(pre: &RfFrame, post: &RfFrame, field: &DisplacementField) -> Result<(), GlueError> {
    if pre.dim() != post.dim() || pre.dim() != field.dim() {
        return Err(GlueError::DimensionMismatch {
            pre: pre.dim(),
            post: post.dim(),
            field: field.dim(),
        });
    }
    Ok(())
}

/// Diagnostics of one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub cost_before: f64,
    pub cost_after: f64,
    /// Quadratic model at zero increment (equals `cost_before`).
    pub model_at_zero: f64,
    pub model_at_solution: f64,
    pub solver_iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
    /// Set when the updated field exceeds the frame size, `|a| > m` or `|l| > n`.
    pub out_of_bounds: bool,
}

impl fmt::Display for IterationLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iteration={} cost_before={:e} cost_after={:e} model_zero={:e} model_solution={:e} \
             solver_iterations={} relative_residual={:e} converged={} out_of_bounds={}",
            self.iteration,
            self.cost_before,
            self.cost_after,
            self.model_at_zero,
            self.model_at_solution,
            self.solver_iterations,
            self.relative_residual,
            self.converged,
            self.out_of_bounds
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub field: DisplacementField,
    pub log: Vec<IterationLog>,
}

impl Refinement {
    /// Line-oriented `key=value` diagnostics, one line per outer iteration.
    pub fn log_text(&self) -> String {
        self.log.iter().map(|l| format!("{l}\n")).collect()
    }
}

/// Refines `init` by `params.outer_iterations` linearize-and-solve passes.
///
/// A solve that hits the iteration cap still applies its best iterate; the
/// log records `converged=false`.
pub fn glue_refine(
    pre: &RfFrame,
    post: &RfFrame,
    init: &DisplacementField,
    params: &GlueParams,
) -> Result<Refinement, GlueError> {
    params.validate()?;
    check_dims(pre, post, init)?;
    let (m, n) = init.dim();
    let mut field = init.clone();
    let mut log = Vec::with_capacity(params.outer_iterations);
    for iteration in 1..=params.outer_iterations {
        let cost_before = cost_value(pre, post, &field, params)?;
        let system = build_linear_system(pre, post, &field, params)?;
        let (report, converged) = match solve_refinement(&system, params) {
            Ok(r) => (r, true),
            Err(GlueError::NoConvergence { best }) => {
                log::warn!(
                    "refinement solve {iteration} stopped at relative residual {:e}",
                    best.relative_residual
                );
                (best, false)
            }
            Err(e) => return Err(e),
        };
        let model_at_solution = cost_before - system.model_decrease(&report.increments);
        field = field.add(&report.to_field((m, n)))?;
        let (max_a, max_l) = field.max_abs();
        let out_of_bounds = max_a > m as f64 || max_l > n as f64;
        if out_of_bounds {
            log::warn!("refined field exceeds frame bounds: |a| <= {max_a}, |l| <= {max_l}");
        }
        let cost_after = cost_value(pre, post, &field, params)?;
        log.push(IterationLog {
            iteration,
            cost_before,
            cost_after,
            model_at_zero: cost_before,
            model_at_solution,
            solver_iterations: report.iterations,
            relative_residual: report.relative_residual,
            converged,
            out_of_bounds,
        });
    }
    Ok(Refinement { field, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rf::Acquisition;
    use ndarray::Array2;

    #[test]
    fn params_validation() {
        GlueParams::default().validate().unwrap();
        let zero = GlueParams::default().scaled(0.0);
        assert!(matches!(zero.validate(), Err(GlueError::InvalidParams(_))));
        let loose = GlueParams {
            solver_tolerance: 0.1,
            ..GlueParams::default()
        };
        assert!(loose.validate().is_err());
        let neg = GlueParams {
            beta_lateral: -1.0,
            ..GlueParams::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn identical_frames_stay_at_zero() {
        let s = Array2::from_shape_fn((30, 6), |(i, j)| (i as f64 * 1.05).cos() * (1.0 + 0.3 * j as f64));
        let f = RfFrame::new(s, Acquisition::default()).unwrap();
        let out = glue_refine(&f, &f, &DisplacementField::zeros(30, 6), &GlueParams::default()).unwrap();
        let (a, l) = out.field.max_abs();
        assert!(a < 1e-8 && l < 1e-8);
        assert_eq!(out.log.len(), 2);
        assert!(out.log_text().lines().all(|line| line.starts_with("iteration=")));
    }
}
