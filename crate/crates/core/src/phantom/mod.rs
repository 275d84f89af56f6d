//! Simulated speckle phantoms with exactly known deformation.
//!
//! Scene coordinates are millimetres: depth `z` in `[0, depth_mm)` from the
//! transducer face, lateral `x` in `[-width_mm/2, width_mm/2)` about the
//! centre line.

mod deform;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rf::{Acquisition, DisplacementField, FrameError, RfFrame, SOUND_SPEED_MM_PER_S};

pub use deform::{Deformation, DeformationModel, RigidShift, MAX_APPLIED_STRAIN};

/// Lowest accepted scatterer density, per mm².
pub const MIN_DENSITY_PER_MM2: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("scatterer density {0}/mm² is below the minimum of 10/mm²")]
    DensityTooLow(f64),
    #[error("invalid extent {depth_mm} x {width_mm} mm")]
    InvalidExtent { depth_mm: f64, width_mm: f64 },
    #[error("invalid inclusion: {0}")]
    InvalidInclusion(String),
    #[error("applied strain {0} outside [0, 0.10]")]
    StrainOutOfRange(f64),
    #[error("invalid deformation: {0}")]
    InvalidDeformation(String),
    #[error("invalid render config: {0}")]
    InvalidRender(String),
    #[error("frame is constant; peak-to-noise ratio is undefined")]
    ConstantFrame,
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inclusion {
    pub depth_mm: f64,
    pub lateral_mm: f64,
    pub radius_mm: f64,
    /// Inclusion over background stiffness; below 1 is a soft inclusion.
    pub stiffness_ratio: f64,
}

impl Inclusion {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(self.stiffness_ratio > 0.0 && self.stiffness_ratio.is_finite()) {
            return Err(PhantomError::InvalidInclusion(format!(
                "stiffness ratio {} must be positive",
                self.stiffness_ratio
            )));
        }
        if !(self.radius_mm > 0.0) || !self.depth_mm.is_finite() || !self.lateral_mm.is_finite() {
            return Err(PhantomError::InvalidInclusion(format!(
                "radius {} mm at ({}, {})",
                self.radius_mm, self.depth_mm, self.lateral_mm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub depth_mm: f64,
    pub width_mm: f64,
    pub density_per_mm2: f64,
    pub inclusion: Option<Inclusion>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            depth_mm: 40.0,
            width_mm: 40.0,
            density_per_mm2: 20.0,
            inclusion: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub axial_mm: f64,
    pub lateral_mm: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomScene {
    pub scatterers: Vec<Scatterer>,
    pub depth_mm: f64,
    pub width_mm: f64,
    pub inclusion: Option<Inclusion>,
    pub seed: u64,
}

/// Uniformly scattered point reflectors with unit-variance Gaussian
/// amplitudes. Deterministic in `seed`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<PhantomScene, PhantomError> {
    let (depth, width) = (config.depth_mm, config.width_mm);
    if !(depth > 0.0 && width > 0.0 && depth.is_finite() && width.is_finite()) {
        return Err(PhantomError::InvalidExtent {
            depth_mm: depth,
            width_mm: width,
        });
    }
    if !(config.density_per_mm2 >= MIN_DENSITY_PER_MM2) || !config.density_per_mm2.is_finite() {
        return Err(PhantomError::DensityTooLow(config.density_per_mm2));
    }
    if let Some(inc) = &config.inclusion {
        inc.validate()?;
    }
    let count = (config.density_per_mm2 * depth * width).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scatterers = (0..count)
        .map(|_| {
            let z = rng.random::<f64>() * depth;
            let x = (rng.random::<f64>() - 0.5) * width;
            let amplitude: f64 = rng.sample(StandardNormal);
            Scatterer {
                axial_mm: z,
                lateral_mm: x,
                amplitude,
            }
        })
        .collect();
    Ok(PhantomScene {
        scatterers,
        depth_mm: depth,
        width_mm: width,
        inclusion: config.inclusion,
        seed,
    })
}

/// Imaging geometry and point-spread function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub samples: usize,
    pub lines: usize,
    pub sampling_rate: f64,
    pub center_frequency: f64,
    pub lateral_spacing_mm: f64,
    /// Depth of the first axial sample.
    pub depth_offset_mm: f64,
    pub sigma_axial_mm: f64,
    pub sigma_lateral_mm: f64,
    /// PSF support, in standard deviations.
    pub psf_cutoff: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 1024,
            lines: 128,
            sampling_rate: 40.0e6,
            center_frequency: 6.67e6,
            lateral_spacing_mm: 0.2,
            depth_offset_mm: 0.0,
            sigma_axial_mm: 0.3,
            sigma_lateral_mm: 0.6,
            psf_cutoff: 5.0,
        }
    }
}

impl RenderConfig {
    pub fn acquisition(&self) -> Acquisition {
        Acquisition::pulse_echo(self.sampling_rate, self.center_frequency, self.lateral_spacing_mm)
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.samples < 2 || self.lines < 2 {
            return Err(PhantomError::InvalidRender(format!(
                "grid {}x{} below 2x2",
                self.samples, self.lines
            )));
        }
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.sigma_axial_mm) || !pos(self.sigma_lateral_mm) || !pos(self.psf_cutoff) {
            return Err(PhantomError::InvalidRender("PSF widths and cutoff must be positive".into()));
        }
        self.acquisition().validate()?;
        Ok(())
    }

    /// Depth of axial sample `i`, mm.
    pub fn depth_of(&self, i: usize) -> f64 {
        self.depth_offset_mm + i as f64 * self.acquisition().axial_spacing
    }

    /// Lateral position of line `j`, mm; lines are centred on `x = 0`.
    pub fn lateral_of(&self, j: usize) -> f64 {
        (j as f64 - 0.5 * (self.lines - 1) as f64) * self.lateral_spacing_mm
    }
}

struct AxialProfile {
    first: usize,
    values: Vec<f64>,
}

fn render_points(points: &[Scatterer], cfg: &RenderConfig) -> Result<RfFrame, PhantomError> {
    cfg.validate()?;
    let acq = cfg.acquisition();
    let (m, n) = (cfg.samples, cfg.lines);
    let dz = acq.axial_spacing;
    let ax_cut = cfg.psf_cutoff * cfg.sigma_axial_mm;
    let lat_cut = cfg.psf_cutoff * cfg.sigma_lateral_mm;
    // cos(2π f τ) with round-trip delay τ = 2Δz/c.
    let k = 4.0 * std::f64::consts::PI * cfg.center_frequency / SOUND_SPEED_MM_PER_S;
    let inv_ax = 1.0 / (2.0 * cfg.sigma_axial_mm * cfg.sigma_axial_mm);
    let inv_lat = 1.0 / (2.0 * cfg.sigma_lateral_mm * cfg.sigma_lateral_mm);
    let (x_lo, x_hi) = (cfg.lateral_of(0) - lat_cut, cfg.lateral_of(n - 1) + lat_cut);

    // Axial pulse of every scatterer that can reach the grid; independent of
    // the line, so computed once.
    let profiles: Vec<Option<AxialProfile>> = points
        .par_iter()
        .map(|s| {
            if s.lateral_mm < x_lo || s.lateral_mm > x_hi {
                return None;
            }
            let lo = ((s.axial_mm - ax_cut - cfg.depth_offset_mm) / dz).ceil().max(0.0);
            let hi = ((s.axial_mm + ax_cut - cfg.depth_offset_mm) / dz).floor();
            if hi < 0.0 || lo > (m - 1) as f64 {
                return None;
            }
            let (first, last) = (lo as usize, (hi as usize).min(m - 1));
            let values = (first..=last)
                .map(|i| {
                    let d = cfg.depth_of(i) - s.axial_mm;
                    (k * d).cos() * (-d * d * inv_ax).exp()
                })
                .collect();
            Some(AxialProfile { first, values })
        })
        .collect();

    let mut samples = Array2::<f64>::zeros((m, n));
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let xj = cfg.lateral_of(j);
            let mut col = vec![0.0; m];
            // Fixed scatterer order per line keeps the sum schedule-independent.
            for (s, p) in points.iter().zip(&profiles) {
                let Some(p) = p else { continue };
                let dx = xj - s.lateral_mm;
                if dx.abs() > lat_cut {
                    continue;
                }
                let w = s.amplitude * (-dx * dx * inv_lat).exp();
                for (c, v) in col[p.first..p.first + p.values.len()].iter_mut().zip(&p.values) {
                    *c += w * v;
                }
            }
            col
        })
        .collect();
    for (j, col) in columns.into_iter().enumerate() {
        samples.column_mut(j).assign(&ndarray::Array1::from(col));
    }
    Ok(RfFrame::new(samples, acq)?)
}

/// Renders the scene: each sample is the PSF-weighted sum over scatterers.
pub fn render_rf(scene: &PhantomScene, cfg: &RenderConfig) -> Result<RfFrame, PhantomError> {
    render_points(&scene.scatterers, cfg)
}

/// Moves every scatterer by `model`, renders the post-deformation frame and
/// samples the ground-truth displacement on the RF grid in (samples, lines).
pub fn deform_and_render(
    scene: &PhantomScene,
    model: &dyn Deformation,
    cfg: &RenderConfig,
) -> Result<(RfFrame, DisplacementField), PhantomError> {
    cfg.validate()?;
    let moved: Vec<Scatterer> = scene
        .scatterers
        .par_iter()
        .map(|s| {
            let (a, l) = model.displacement_at(s.axial_mm, s.lateral_mm);
            Scatterer {
                axial_mm: s.axial_mm + a,
                lateral_mm: s.lateral_mm + l,
                amplitude: s.amplitude,
            }
        })
        .collect();
    let post = render_points(&moved, cfg)?;
    Ok((post, ground_truth(model, cfg)))
}

/// Ground-truth displacement of every pre-compression sample position.
pub fn ground_truth(model: &dyn Deformation, cfg: &RenderConfig) -> DisplacementField {
    let acq = cfg.acquisition();
    let (m, n) = (cfg.samples, cfg.lines);
    let values: Vec<(f64, f64)> = (0..m * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let (a, l) = model.displacement_at(cfg.depth_of(i), cfg.lateral_of(j));
            (a / acq.axial_spacing, l / acq.lateral_spacing)
        })
        .collect();
    let axial = Array2::from_shape_fn((m, n), |(i, j)| values[i * n + j].0);
    let lateral = Array2::from_shape_fn((m, n), |(i, j)| values[i * n + j].1);
    DisplacementField::new(axial, lateral).expect("analytic displacement is finite")
}

/// Adds white Gaussian noise scaled so that
/// `20 log10(max|signal| / rms(noise))` equals `target_psnr_db` exactly.
/// An infinite target returns the frame unchanged.
pub fn add_noise(frame: &RfFrame, target_psnr_db: f64, seed: u64) -> Result<RfFrame, PhantomError> {
    if target_psnr_db == f64::INFINITY {
        return Ok(frame.clone());
    }
    let s = frame.samples();
    let first = s[[0, 0]];
    if s.iter().all(|v| *v == first) {
        return Err(PhantomError::ConstantFrame);
    }
    let peak = s.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let target_rms = peak / 10f64.powf(target_psnr_db / 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..s.len()).map(|_| rng.sample(StandardNormal)).collect();
    let rms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
    let scale = target_rms / rms;
    let noise = Array2::from_shape_vec(s.dim(), noise).expect("length matches");
    Ok(RfFrame::new(s + &(noise * scale), *frame.acquisition())?)
}
