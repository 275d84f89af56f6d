//! TOML pipeline configuration.
//!
//! ```toml
//! [phantom]
//! seed = 7
//! noise_seed = 1        # post frame uses noise_seed + 1
//! psnr_db = 12.7        # omit for noiseless frames
//! applied_strain = 0.02
//!
//! [phantom.scene.inclusion]
//! depth_mm = 10.0
//! lateral_mm = 0.0
//! radius_mm = 3.0
//! stiffness_ratio = 0.5
//!
//! [input]               # real data instead of the phantom
//! pre = "pre.elrf"
//! post = "post.elrf"
//!
//! [glue]
//! alpha_axial = 20.0
//!
//! [metrics]
//! sweep = [0.01, 0.02, 0.03]
//! ```
//!
//! Every section is optional and every key has a default. Unknown keys are
//! rejected with their location.

use std::fmt;
use std::path::{Path, PathBuf};

use elasto_core::coarse::CoarseParams;
use elasto_core::glue::GlueParams;
use elasto_core::metrics::{RegionSpec, SsimParams};
use elasto_core::phantom::{DeformationModel, Inclusion, RenderConfig, SceneConfig, MAX_APPLIED_STRAIN};
use elasto_core::strain::StrainParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("override `{0}` must look like section.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub seed: u64,
    pub noise_seed: u64,
    pub psnr_db: Option<f64>,
    pub applied_strain: f64,
    pub poisson_ratio: f64,
    pub transition_mm: f64,
    pub scene: SceneConfig,
    pub render: RenderConfig,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let model = DeformationModel::default();
        Self {
            seed: 7,
            noise_seed: 1,
            psnr_db: None,
            applied_strain: model.applied_strain,
            poisson_ratio: model.poisson_ratio,
            transition_mm: model.transition_mm,
            scene: SceneConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl PhantomSection {
    pub fn model(&self, applied_strain: f64) -> DeformationModel {
        DeformationModel {
            applied_strain,
            poisson_ratio: self.poisson_ratio,
            transition_mm: self.transition_mm,
            inclusion: self.scene.inclusion,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSection {
    pub pre: Option<PathBuf>,
    pub post: Option<PathBuf>,
    /// Ground-truth displacement, when known.
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseSection {
    /// ELDF flow replacing the block matcher.
    pub external_flow: Option<PathBuf>,
    pub levels: usize,
    pub block: (usize, usize),
    pub search: (usize, usize),
    pub refine_search: (usize, usize),
    pub min_correlation: f64,
    pub median_window: usize,
    pub max_stretch: f64,
}

impl Default for CoarseSection {
    fn default() -> Self {
        Self::from_params(&CoarseParams::default())
    }
}

impl CoarseSection {
    fn from_params(p: &CoarseParams) -> Self {
        Self {
            external_flow: None,
            levels: p.levels,
            block: p.block,
            search: p.search,
            refine_search: p.refine_search,
            min_correlation: p.min_correlation,
            median_window: p.median_window,
            max_stretch: p.max_stretch,
        }
    }

    pub fn params(&self) -> CoarseParams {
        CoarseParams {
            levels: self.levels,
            block: self.block,
            search: self.search,
            refine_search: self.refine_search,
            min_correlation: self.min_correlation,
            median_window: self.median_window,
            max_stretch: self.max_stretch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Explicit CNRe/SNRe windows; derived from the phantom inclusion when
    /// absent.
    pub regions: Option<RegionSpec>,
    /// Applied strains for `simulate` and `run`; empty runs `applied_strain`
    /// alone.
    pub sweep: Vec<f64>,
    pub ssim: SsimParams,
    /// Batch rows with CNRe at or above this and finite SNRe are flagged
    /// recognizable.
    pub recognizable_cnr: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            regions: None,
            sweep: Vec::new(),
            ssim: SsimParams::default(),
            recognizable_cnr: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Strain mapped to black and white in the PNG image.
    pub strain_range: (f64, f64),
    /// Scale both frames to unit peak amplitude before estimation, which is
    /// what the default refinement weights assume.
    pub normalize_gain: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("elasto-out"),
            strain_range: (0.0, 0.08),
            normalize_gain: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub phantom: PhantomSection,
    pub input: InputSection,
    pub coarse: CoarseSection,
    pub glue: GlueParams,
    pub strain: StrainParams,
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

impl PipelineConfig {
    /// Parses TOML text; errors carry the line and key.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
    }

    /// Applies `section.key=value` overrides. Values are read as TOML
    /// (`0.5`, `true`, `[64, 8]`) and fall back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::BadOverride(item.clone()));
            }
            let value = parse_value(raw.trim());
            let mut node = &mut root;
            for part in &path[..path.len() - 1] {
                let table = node.as_table_mut().ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
            let table = node.as_table_mut().ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
            table.insert(path[path.len() - 1].to_string(), value);
        }
        root.try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(format!("in --set overrides: {e}")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn fmt::Display| ConfigError::Invalid(e.to_string());
        self.coarse.params().validate().map_err(|e| invalid(&e))?;
        self.glue.validate().map_err(|e| invalid(&e))?;
        self.phantom.render.validate().map_err(|e| invalid(&e))?;
        for &eps in self.strains().iter() {
            if !(0.0..=MAX_APPLIED_STRAIN).contains(&eps) {
                return Err(ConfigError::Invalid(format!(
                    "applied strain {eps} outside [0, {MAX_APPLIED_STRAIN}]"
                )));
            }
        }
        self.phantom.model(self.phantom.applied_strain).validate().map_err(|e| invalid(&e))?;
        let (lo, hi) = self.output.strain_range;
        if !(lo < hi) {
            return Err(ConfigError::Invalid(format!("strain_range [{lo}, {hi}] is empty")));
        }
        if self.input.pre.is_some() != self.input.post.is_some() {
            return Err(ConfigError::Invalid("input.pre and input.post must be given together".into()));
        }
        Ok(())
    }

    /// Applied strains to simulate: the sweep, or the single configured one.
    pub fn strains(&self) -> Vec<f64> {
        if self.metrics.sweep.is_empty() {
            vec![self.phantom.applied_strain]
        } else {
            self.metrics.sweep.clone()
        }
    }

    /// Canonical TOML of the effective configuration, used for the manifest.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Soft-inclusion phantom used by the examples and the acceptance suite.
pub fn soft_inclusion() -> Inclusion {
    Inclusion {
        depth_mm: 10.0,
        lateral_mm: 0.0,
        radius_mm: 3.0,
        stiffness_ratio: 0.5,
    }
}
