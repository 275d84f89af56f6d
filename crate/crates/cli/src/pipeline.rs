//! coarse -> refine -> strain -> metrics on one frame pair.

use std::path::PathBuf;
use std::time::Instant;

use elasto_core::coarse::{estimate_coarse, import_external_flow, CoarseError};
use elasto_core::glue::{glue_refine, GlueError, Refinement};
use elasto_core::metrics::{cnr_e, mssim, snr_e, MetricsError, Rect, RegionSpec};
use elasto_core::phantom::{add_noise, deform_and_render, generate_scene, render_rf, PhantomError, RenderConfig};
use elasto_core::rf::{DisplacementField, FormatError, RfFrame, StrainImage};
use elasto_core::strain::{least_squares_strain, StrainError};
use ndarray::s;
use thiserror::Error;

use crate::config::{ConfigError, PhantomSection, PipelineConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: FormatError },
    #[error("simulation failed: {0}")]
    Simulate(#[from] PhantomError),
    #[error("coarse estimation failed: {0}")]
    Coarse(#[from] CoarseError),
    #[error("refinement failed: {0}")]
    Refine(#[from] GlueError),
    #[error("strain estimation failed: {0}")]
    Strain(#[from] StrainError),
    #[error("metrics failed: {0}")]
    Metrics(#[from] MetricsError),
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
    #[error("{0}")]
    Panicked(String),
}

impl PipelineError {
    /// Process exit code; each stage fails with its own.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Input { .. } => 3,
            PipelineError::Simulate(_) => 4,
            PipelineError::Coarse(_) => 5,
            PipelineError::Refine(_) => 6,
            PipelineError::Strain(_) => 7,
            PipelineError::Metrics(_) => 8,
            PipelineError::Output { .. } => 9,
            PipelineError::Panicked(_) => 1,
        }
    }

    pub fn input(path: impl Into<PathBuf>) -> impl FnOnce(FormatError) -> PipelineError {
        let path = path.into();
        move |source| PipelineError::Input { path, source }
    }
}

/// A simulated pre/post pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPair {
    pub applied_strain: f64,
    pub pre: RfFrame,
    pub post: RfFrame,
    pub truth: DisplacementField,
}

pub fn simulate_pair(phantom: &PhantomSection, applied_strain: f64) -> Result<SimulatedPair, PhantomError> {
    let model = phantom.model(applied_strain);
    model.validate()?;
    let scene = generate_scene(&phantom.scene, phantom.seed)?;
    let pre = render_rf(&scene, &phantom.render)?;
    let (post, truth) = deform_and_render(&scene, &model, &phantom.render)?;
    let (pre, post) = match phantom.psnr_db {
        Some(db) => (
            add_noise(&pre, db, phantom.noise_seed)?,
            add_noise(&post, db, phantom.noise_seed.wrapping_add(1))?,
        ),
        None => (pre, post),
    };
    Ok(SimulatedPair {
        applied_strain,
        pre,
        post,
        truth,
    })
}

/// Target square of half-size R/2 centred on the inclusion and a background
/// square of the same size at the same depth, 3R to the side (right when it
/// fits, else left).
pub fn auto_regions(phantom: &PhantomSection, dims: (usize, usize)) -> Option<RegionSpec> {
    let inc = phantom.scene.inclusion?;
    let render: &RenderConfig = &phantom.render;
    let acq = render.acquisition();
    let (m, n) = dims;
    let ci = ((inc.depth_mm - render.depth_offset_mm) / acq.axial_spacing).round();
    let cj = (inc.lateral_mm / acq.lateral_spacing + 0.5 * (n as f64 - 1.0)).round();
    let ri = (0.5 * inc.radius_mm / acq.axial_spacing) as isize;
    let rj = (0.5 * inc.radius_mm / acq.lateral_spacing) as isize;
    let offset = (3.0 * inc.radius_mm / acq.lateral_spacing).round() as isize;
    let (ci, cj) = (ci as isize, cj as isize);
    let rect = |c: isize| -> Option<Rect> {
        let (r0, r1, c0, c1) = (ci - ri, ci + ri, c - rj, c + rj);
        (r0 >= 0 && c0 >= 0 && r1 <= m as isize && c1 <= n as isize)
            .then(|| Rect::new(r0 as usize, r1 as usize, c0 as usize, c1 as usize))
    };
    let target = rect(cj)?;
    let background = rect(cj + offset).or_else(|| rect(cj - offset))?;
    let spec = RegionSpec { target, background };
    spec.validate(dims).ok().map(|_| spec)
}

/// Central 60% of the image in both directions.
pub fn central_region((m, n): (usize, usize)) -> Rect {
    Rect::new(m / 5, 4 * m / 5, n / 5, 4 * n / 5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairMetrics {
    /// Estimated vs ground-truth strain.
    pub mssim: Option<f64>,
    pub snr_e: Option<f64>,
    pub cnr_e: Option<f64>,
    pub target_mean: Option<f64>,
    pub background_mean: Option<f64>,
    pub central_mean: f64,
    /// Axial displacement RMSE against the truth, samples.
    pub coarse_rmse: Option<f64>,
    pub refined_rmse: Option<f64>,
    pub regions: Option<RegionSpec>,
}

#[derive(Debug, Clone)]
pub struct PairResult {
    pub coarse: DisplacementField,
    pub refinement: Refinement,
    pub strain: StrainImage,
    pub metrics: PairMetrics,
    pub seconds: f64,
}

fn peak(frame: &RfFrame) -> f64 {
    frame.samples().iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Both frames scaled by `1 / max|pre|`.
pub fn normalize_gain(pre: &RfFrame, post: &RfFrame) -> (RfFrame, RfFrame) {
    let p = peak(pre);
    if p == 0.0 {
        return (pre.clone(), post.clone());
    }
    let scale = |f: &RfFrame| RfFrame::new(f.samples() / p, *f.acquisition()).expect("scaled frame stays finite");
    (scale(pre), scale(post))
}

pub fn coarse_stage(cfg: &PipelineConfig, pre: &RfFrame, post: &RfFrame) -> Result<DisplacementField, PipelineError> {
    match &cfg.coarse.external_flow {
        Some(path) => import_external_flow(path, pre.dim()).map_err(PipelineError::input(path)),
        None => Ok(estimate_coarse(pre, post, &cfg.coarse.params())?),
    }
}

pub fn axial_rmse(field: &DisplacementField, truth: &DisplacementField) -> f64 {
    let d = field.axial() - truth.axial();
    (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
}

pub fn evaluate(
    cfg: &PipelineConfig,
    strain: &StrainImage,
    truth: Option<&DisplacementField>,
    regions: Option<RegionSpec>,
) -> Result<PairMetrics, PipelineError> {
    let central = central_region(strain.dim());
    let central_mean = strain
        .values()
        .slice(s![central.row0..central.row1, central.col0..central.col1])
        .mean()
        .unwrap_or(0.0);
    let mssim = match truth {
        Some(t) => {
            let reference = least_squares_strain(t, &cfg.strain)?;
            Some(mssim(reference.values(), strain.values(), &cfg.metrics.ssim)?)
        }
        None => None,
    };
    let region_mean = |r: &Rect| strain.values().slice(s![r.row0..r.row1, r.col0..r.col1]).mean();
    let (snr, cnr, target_mean, background_mean) = match &regions {
        Some(spec) => (
            Some(snr_e(strain, &spec.background)?),
            Some(cnr_e(strain, spec)?),
            region_mean(&spec.target),
            region_mean(&spec.background),
        ),
        None => (Some(snr_e(strain, &central)?), None, None, None),
    };
    Ok(PairMetrics {
        mssim,
        snr_e: snr,
        cnr_e: cnr,
        target_mean,
        background_mean,
        central_mean,
        coarse_rmse: None,
        refined_rmse: None,
        regions,
    })
}

/// Runs every stage on one pair. `truth` enables MSSIM and RMSE.
pub fn process_pair(
    cfg: &PipelineConfig,
    pre: &RfFrame,
    post: &RfFrame,
    truth: Option<&DisplacementField>,
    regions: Option<RegionSpec>,
) -> Result<PairResult, PipelineError> {
    let start = Instant::now();
    let (pre, post) = if cfg.output.normalize_gain {
        normalize_gain(pre, post)
    } else {
        (pre.clone(), post.clone())
    };
    let coarse = coarse_stage(cfg, &pre, &post)?;
    let refinement = glue_refine(&pre, &post, &coarse, &cfg.glue)?;
    let strain = least_squares_strain(&refinement.field, &cfg.strain)?;
    let mut metrics = evaluate(cfg, &strain, truth, regions)?;
    if let Some(t) = truth {
        metrics.coarse_rmse = Some(axial_rmse(&coarse, t));
        metrics.refined_rmse = Some(axial_rmse(&refinement.field, t));
    }
    Ok(PairResult {
        coarse,
        refinement,
        strain,
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    })
}
