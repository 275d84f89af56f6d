use serde::{Deserialize, Serialize};

use super::{Inclusion, PhantomError};

/// Anything that maps a pre-compression position `(axial mm, lateral mm)` to
/// its displacement in mm.
pub trait Deformation: Sync {
    fn displacement_at(&self, axial_mm: f64, lateral_mm: f64) -> (f64, f64);
}

/// Uniform translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidShift {
    pub axial_mm: f64,
    pub lateral_mm: f64,
}

impl Deformation for RigidShift {
    fn displacement_at(&self, _: f64, _: f64) -> (f64, f64) {
        (self.axial_mm, self.lateral_mm)
    }
}

/// Quasi-static axial compression of a phantom with an optional circular
/// inclusion.
///
/// Without an inclusion the field is `u = -ε z`, `v = ν ε x`. An inclusion of
/// radius `R` and stiffness ratio `k` adds, in coordinates `(ζ, ξ)` relative
/// to its centre,
///
/// ```text
/// u += -κ ζ φ(r),   v += ν κ ξ φ(r),   κ = ε (1/k - 1)
/// φ(r) = w(r) + (1 - w(r)) R²/r²
/// ```
///
/// where `w` is a cosine blend that is 1 inside the inclusion, 0 outside and
/// falls off across a band of width `transition_mm` centred on the boundary.
/// Inside, the local strain is exactly `ε / k`; outside, the perturbation
/// decays like a dipole, so the field returns to the background away from
/// the inclusion and stays continuous with continuous strain everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformationModel {
    /// Compression positive.
    pub applied_strain: f64,
    pub poisson_ratio: f64,
    pub transition_mm: f64,
    pub inclusion: Option<Inclusion>,
}

impl Default for DeformationModel {
    fn default() -> Self {
        Self {
            applied_strain: 0.01,
            poisson_ratio: 0.49,
            transition_mm: 0.5,
            inclusion: None,
        }
    }
}

pub const MAX_APPLIED_STRAIN: f64 = 0.10;

impl DeformationModel {
    pub fn new(applied_strain: f64, inclusion: Option<Inclusion>) -> Result<Self, PhantomError> {
        let model = Self {
            applied_strain,
            inclusion,
            ..Self::default()
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(0.0..=MAX_APPLIED_STRAIN).contains(&self.applied_strain) {
            return Err(PhantomError::StrainOutOfRange(self.applied_strain));
        }
        if !(self.transition_mm >= 0.0) || !self.poisson_ratio.is_finite() {
            return Err(PhantomError::InvalidDeformation(format!(
                "transition {} mm, poisson ratio {}",
                self.transition_mm, self.poisson_ratio
            )));
        }
        if let Some(inc) = &self.inclusion {
            inc.validate()?;
            if self.transition_mm >= 2.0 * inc.radius_mm {
                return Err(PhantomError::InvalidDeformation(format!(
                    "transition {} mm must be narrower than the inclusion diameter {} mm",
                    self.transition_mm,
                    2.0 * inc.radius_mm
                )));
            }
        }
        Ok(())
    }

    /// `(φ(r), φ'(r))` for an inclusion.
    pub(crate) fn profile(&self, inc: &Inclusion, r: f64) -> (f64, f64) {
        let half = 0.5 * self.transition_mm;
        let (inner, outer) = (inc.radius_mm - half, inc.radius_mm + half);
        if r <= inner {
            return (1.0, 0.0);
        }
        let r2 = inc.radius_mm * inc.radius_mm;
        let (g, dg) = (r2 / (r * r), -2.0 * r2 / (r * r * r));
        if r >= outer {
            return (g, dg);
        }
        let t = std::f64::consts::PI * (r - inner) / self.transition_mm;
        let w = 0.5 * (1.0 + t.cos());
        let dw = -0.5 * std::f64::consts::PI / self.transition_mm * t.sin();
        (w + (1.0 - w) * g, dw * (1.0 - g) + (1.0 - w) * dg)
    }

    /// `κ` and the offsets `(ζ, ξ, r)` from the inclusion centre.
    fn local(&self, axial_mm: f64, lateral_mm: f64) -> Option<(f64, f64, f64, f64, &Inclusion)> {
        let inc = self.inclusion.as_ref()?;
        let kappa = self.applied_strain * (1.0 / inc.stiffness_ratio - 1.0);
        let (dz, dx) = (axial_mm - inc.depth_mm, lateral_mm - inc.lateral_mm);
        Some((kappa, dz, dx, dz.hypot(dx), inc))
    }

    /// Local axial strain (compression positive), `-∂u/∂z`.
    pub fn local_strain_at(&self, axial_mm: f64, lateral_mm: f64) -> f64 {
        let eps = self.applied_strain;
        match self.local(axial_mm, lateral_mm) {
            None => eps,
            Some((kappa, dz, _, r, inc)) => {
                let (phi, dphi) = self.profile(inc, r);
                let radial = if r > 0.0 { dz * dz * dphi / r } else { 0.0 };
                eps + kappa * (phi + radial)
            }
        }
    }
}

impl Deformation for DeformationModel {
    fn displacement_at(&self, axial_mm: f64, lateral_mm: f64) -> (f64, f64) {
        let eps = self.applied_strain;
        let nu = self.poisson_ratio;
        let mut axial = -eps * axial_mm;
        let mut lateral = nu * eps * lateral_mm;
        if let Some((kappa, dz, dx, r, inc)) = self.local(axial_mm, lateral_mm) {
            let phi = self.profile(inc, r).0;
            axial -= kappa * dz * phi;
            lateral += nu * kappa * dx * phi;
        }
        (axial, lateral)
    }
}
