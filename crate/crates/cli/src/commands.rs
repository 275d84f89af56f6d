//! Subcommand bodies. Each writes into the configured output directory and
//! records what it wrote in `manifest.txt`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use elasto_core::glue::glue_refine;
use elasto_core::metrics::RegionSpec;
use elasto_core::rf::io::{load_field, load_frame, load_image, Format};
use elasto_core::rf::{Acquisition, DisplacementField, RfFrame, StrainImage};
use elasto_core::strain::least_squares_strain;
use rayon::prelude::*;

use crate::artifacts::{self, csv_row, metrics_text, Manifest, CSV_HEADER};
use crate::config::PipelineConfig;
use crate::pipeline::{self, auto_regions, normalize_gain, process_pair, simulate_pair, PairResult, PipelineError};

pub fn read_frame(path: &Path) -> Result<RfFrame, PipelineError> {
    load_frame(path, Format::from_path(path)).map_err(PipelineError::input(path))
}

pub fn read_field(path: &Path) -> Result<DisplacementField, PipelineError> {
    load_field(path, Format::from_path(path)).map_err(PipelineError::input(path))
}

pub fn pair_dir_name(eps: f64) -> String {
    format!("eps_{eps:.3}")
}

fn base_manifest(command: &str, cfg: &PipelineConfig) -> Manifest {
    let mut m = Manifest::new(command);
    m.param("seed", cfg.phantom.seed);
    m.param("noise_seed", cfg.phantom.noise_seed);
    m.outputs.push("config.toml".into());
    m
}

fn start_output(cfg: &PipelineConfig) -> Result<&Path, PipelineError> {
    let dir = cfg.output.dir.as_path();
    artifacts::create_dir(dir)?;
    artifacts::write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok(dir)
}

/// Subdirectory per strain for a sweep, the output directory itself for a
/// single strain.
fn strain_dirs(cfg: &PipelineConfig) -> Vec<(f64, PathBuf)> {
    let sweep = !cfg.metrics.sweep.is_empty();
    cfg.strains()
        .into_iter()
        .map(|eps| (eps, if sweep { PathBuf::from(pair_dir_name(eps)) } else { PathBuf::new() }))
        .collect()
}

/// Renders the phantom pair for every configured strain.
pub fn simulate(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    let out = start_output(cfg)?;
    let mut manifest = base_manifest("simulate", cfg);
    for (eps, rel) in strain_dirs(cfg) {
        let pair = simulate_pair(&cfg.phantom, eps)?;
        artifacts::create_dir(&out.join(&rel))?;
        artifacts::write_frame(&pair.pre, &out.join(&rel).join("pre.elrf"))?;
        artifacts::write_frame(&pair.post, &out.join(&rel).join("post.elrf"))?;
        artifacts::write_field(&pair.truth, &out.join(&rel).join("truth.eldf"))?;
        for name in ["pre.elrf", "post.elrf", "truth.eldf"] {
            manifest.outputs.push(rel.join(name));
        }
    }
    manifest.write(out)?;
    Ok(manifest)
}

pub fn coarse(cfg: &PipelineConfig, pre: &Path, post: &Path) -> Result<DisplacementField, PipelineError> {
    let out = start_output(cfg)?;
    let mut manifest = base_manifest("coarse", cfg);
    manifest.inputs = vec![pre.to_path_buf(), post.to_path_buf()];
    let (pre, post) = normalize_gain(&read_frame(pre)?, &read_frame(post)?);
    let field = pipeline::coarse_stage(cfg, &pre, &post)?;
    artifacts::write_field(&field, &out.join("coarse.eldf"))?;
    manifest.outputs.push("coarse.eldf".into());
    manifest.write(out)?;
    Ok(field)
}

pub fn refine(cfg: &PipelineConfig, pre: &Path, post: &Path, init: &Path) -> Result<DisplacementField, PipelineError> {
    let out = start_output(cfg)?;
    let mut manifest = base_manifest("refine", cfg);
    manifest.inputs = vec![pre.to_path_buf(), post.to_path_buf(), init.to_path_buf()];
    let (pre, post) = (read_frame(pre)?, read_frame(post)?);
    let (pre, post) = if cfg.output.normalize_gain {
        normalize_gain(&pre, &post)
    } else {
        (pre, post)
    };
    let refinement = glue_refine(&pre, &post, &read_field(init)?, &cfg.glue)?;
    artifacts::write_field(&refinement.field, &out.join("refined.eldf"))?;
    artifacts::write_text(&out.join("refine_log.txt"), &refinement.log_text())?;
    manifest.outputs.extend(["refined.eldf".into(), "refine_log.txt".into()]);
    manifest.write(out)?;
    Ok(refinement.field)
}

fn write_strain(
    cfg: &PipelineConfig,
    strain: &StrainImage,
    acq: &Acquisition,
    dir: &Path,
    rel: &Path,
    manifest: &mut Manifest,
) -> Result<(), PipelineError> {
    artifacts::write_image(strain.values(), acq, &dir.join(rel).join("strain.elrf"))?;
    artifacts::write_image(strain.values(), acq, &dir.join(rel).join("strain.csv"))?;
    artifacts::write_png(strain.values(), cfg.output.strain_range, &dir.join(rel).join("strain.png"))?;
    for name in ["strain.elrf", "strain.csv", "strain.png"] {
        manifest.outputs.push(rel.join(name));
    }
    Ok(())
}

/// Strain of a displacement field. The acquisition of `like`, when given,
/// is stored in the ELRF header.
pub fn strain(cfg: &PipelineConfig, field: &Path, like: Option<&Path>) -> Result<StrainImage, PipelineError> {
    let out = start_output(cfg)?;
    let mut manifest = base_manifest("strain", cfg);
    manifest.inputs.push(field.to_path_buf());
    let acq = match like {
        Some(p) => {
            manifest.inputs.push(p.to_path_buf());
            *read_frame(p)?.acquisition()
        }
        None => Acquisition::default(),
    };
    let image = least_squares_strain(&read_field(field)?, &cfg.strain)?;
    write_strain(cfg, &image, &acq, out, Path::new(""), &mut manifest)?;
    manifest.write(out)?;
    Ok(image)
}

fn regions_for(cfg: &PipelineConfig, dims: (usize, usize)) -> Option<RegionSpec> {
    cfg.metrics.regions.or_else(|| auto_regions(&cfg.phantom, dims))
}

/// Metrics of a strain image, against the strain of `truth` when given.
pub fn evaluate(cfg: &PipelineConfig, strain: &Path, truth: Option<&Path>) -> Result<pipeline::PairMetrics, PipelineError> {
    let out = start_output(cfg)?;
    let mut manifest = base_manifest("evaluate", cfg);
    manifest.inputs.push(strain.to_path_buf());
    let (values, _) = load_image(strain).map_err(PipelineError::input(strain))?;
    let image = StrainImage::new(values, cfg.strain.window_len).map_err(|e| PipelineError::Input {
        path: strain.to_path_buf(),
        source: e.into(),
    })?;
    let truth = match truth {
        Some(p) => {
            manifest.inputs.push(p.to_path_buf());
            Some(read_field(p)?)
        }
        None => None,
    };
    let metrics = pipeline::evaluate(cfg, &image, truth.as_ref(), regions_for(cfg, image.dim()))?;
    artifacts::write_text(&out.join("metrics.txt"), &metrics_text("evaluate", None, &metrics))?;
    let csv = format!("{CSV_HEADER}\n{}\n", csv_row("evaluate", None, Ok(&metrics), cfg.metrics.recognizable_cnr));
    artifacts::write_text(&out.join("metrics.csv"), &csv)?;
    manifest.outputs.extend(["metrics.txt".into(), "metrics.csv".into()]);
    manifest.write(out)?;
    Ok(metrics)
}

/// Writes every stage output of one processed pair under `dir/rel`.
fn write_pair(
    cfg: &PipelineConfig,
    label: &str,
    eps: Option<f64>,
    acq: &Acquisition,
    result: &PairResult,
    dir: &Path,
    rel: &Path,
    manifest: &mut Manifest,
) -> Result<(), PipelineError> {
    let at = dir.join(rel);
    artifacts::create_dir(&at)?;
    artifacts::write_field(&result.coarse, &at.join("coarse.eldf"))?;
    artifacts::write_field(&result.refinement.field, &at.join("refined.eldf"))?;
    artifacts::write_text(&at.join("refine_log.txt"), &result.refinement.log_text())?;
    write_strain(cfg, &result.strain, acq, dir, rel, manifest)?;
    artifacts::write_text(&at.join("metrics.txt"), &metrics_text(label, eps, &result.metrics))?;
    for name in ["coarse.eldf", "refined.eldf", "refine_log.txt", "metrics.txt"] {
        manifest.outputs.push(rel.join(name));
    }
    Ok(())
}

/// One row of a `run` sweep.
#[derive(Debug, Clone)]
pub struct RunCase {
    pub applied_strain: Option<f64>,
    pub result: PairResult,
}

/// The full pipeline, on `input.pre`/`input.post` when configured and on
/// simulated phantom pairs otherwise.
pub fn run(cfg: &PipelineConfig) -> Result<Vec<RunCase>, PipelineError> {
    let out = start_output(cfg)?;
    let mut manifest = base_manifest("run", cfg);
    let mut rows = Vec::new();
    let mut cases = Vec::new();
    if let (Some(pre_path), Some(post_path)) = (&cfg.input.pre, &cfg.input.post) {
        manifest.inputs = vec![pre_path.clone(), post_path.clone()];
        let (pre, post) = (read_frame(pre_path)?, read_frame(post_path)?);
        let truth = match &cfg.input.truth {
            Some(p) => {
                manifest.inputs.push(p.clone());
                Some(read_field(p)?)
            }
            None => None,
        };
        let result = process_pair(cfg, &pre, &post, truth.as_ref(), regions_for(cfg, pre.dim()))?;
        log::info!("pair processed in {:.1} s", result.seconds);
        write_pair(cfg, "input", None, pre.acquisition(), &result, out, Path::new(""), &mut manifest)?;
        rows.push(csv_row("input", None, Ok(&result.metrics), cfg.metrics.recognizable_cnr));
        cases.push(RunCase {
            applied_strain: None,
            result,
        });
    } else {
        for (eps, rel) in strain_dirs(cfg) {
            let pair = simulate_pair(&cfg.phantom, eps)?;
            let regions = regions_for(cfg, pair.pre.dim());
            let result = process_pair(cfg, &pair.pre, &pair.post, Some(&pair.truth), regions)?;
            log::info!("strain {eps}: processed in {:.1} s", result.seconds);
            let label = pair_dir_name(eps);
            artifacts::create_dir(&out.join(&rel))?;
            artifacts::write_field(&pair.truth, &out.join(&rel).join("truth.eldf"))?;
            manifest.outputs.push(rel.join("truth.eldf"));
            write_pair(cfg, &label, Some(eps), pair.pre.acquisition(), &result, out, &rel, &mut manifest)?;
            rows.push(csv_row(&label, Some(eps), Ok(&result.metrics), cfg.metrics.recognizable_cnr));
            cases.push(RunCase {
                applied_strain: Some(eps),
                result,
            });
        }
    }
    let csv: String = std::iter::once(CSV_HEADER.to_string()).chain(rows).map(|r| r + "\n").collect();
    artifacts::write_text(&out.join("metrics.csv"), &csv)?;
    manifest.outputs.push("metrics.csv".into());
    manifest.write(out)?;
    Ok(cases)
}

/// One line of a batch pair list: `name,pre,post[,truth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub name: String,
    pub pre: PathBuf,
    pub post: PathBuf,
    pub truth: Option<PathBuf>,
}

/// Reads a pair list. Blank lines and `#` comments are skipped; relative
/// paths are taken relative to the list file.
pub fn read_pair_list(path: &Path) -> Result<Vec<PairEntry>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Input {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(3..=4).contains(&parts.len()) || parts.iter().any(|p| p.is_empty()) {
            return Err(PipelineError::Input {
                path: path.to_path_buf(),
                source: elasto_core::rf::FormatError::Csv {
                    line: k + 1,
                    message: "expected name,pre,post[,truth]".into(),
                },
            });
        }
        pairs.push(PairEntry {
            name: parts[0].to_string(),
            pre: base.join(parts[1]),
            post: base.join(parts[2]),
            truth: parts.get(3).map(|p| base.join(p)),
        });
    }
    Ok(pairs)
}

/// Outcome of a batch: summary rows in input order and the failures.
#[derive(Debug, Clone)]
pub struct BatchReport {
    pub rows: Vec<String>,
    pub failures: Vec<(String, String)>,
}

impl BatchReport {
    pub fn summary_csv(&self) -> String {
        std::iter::once(CSV_HEADER)
            .chain(self.rows.iter().map(String::as_str))
            .map(|r| format!("{r}\n"))
            .collect()
    }
}

fn batch_pair(cfg: &PipelineConfig, entry: &PairEntry, out: &Path) -> Result<(PairResult, Manifest), PipelineError> {
    let pre = read_frame(&entry.pre)?;
    let post = read_frame(&entry.post)?;
    let truth = entry.truth.as_deref().map(read_field).transpose()?;
    let result = process_pair(cfg, &pre, &post, truth.as_ref(), regions_for(cfg, pre.dim()))?;
    let mut manifest = Manifest::default();
    let rel = PathBuf::from(&entry.name);
    write_pair(cfg, &entry.name, None, pre.acquisition(), &result, out, &rel, &mut manifest)?;
    Ok((result, manifest))
}

/// Runs every pair on the current rayon pool. A failing or panicking pair
/// becomes a failure row; the rest carry on.
pub fn batch(cfg: &PipelineConfig, pairs: &[PairEntry]) -> Result<BatchReport, PipelineError> {
    let out = start_output(cfg)?;
    let mut manifest = base_manifest("batch", cfg);
    let outcomes: Vec<Result<(PairResult, Manifest), String>> = pairs
        .par_iter()
        .map(|entry| match catch_unwind(AssertUnwindSafe(|| batch_pair(cfg, entry, out))) {
            Ok(Ok(done)) => Ok(done),
            Ok(Err(e)) => Err(e.to_string()),
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "pair processing panicked".into())),
        })
        .collect();
    let mut rows = Vec::with_capacity(pairs.len());
    let mut failures = Vec::new();
    for (entry, outcome) in pairs.iter().zip(outcomes) {
        match outcome {
            Ok((result, pair_manifest)) => {
                rows.push(csv_row(&entry.name, None, Ok(&result.metrics), cfg.metrics.recognizable_cnr));
                manifest.inputs.push(entry.pre.clone());
                manifest.inputs.push(entry.post.clone());
                manifest.inputs.extend(entry.truth.clone());
                manifest.outputs.extend(pair_manifest.outputs);
            }
            Err(msg) => {
                log::warn!("pair {} failed: {msg}", entry.name);
                rows.push(csv_row(&entry.name, None, Err(&msg), cfg.metrics.recognizable_cnr));
                failures.push((entry.name.clone(), msg));
            }
        }
    }
    let report = BatchReport { rows, failures };
    artifacts::write_text(&out.join("summary.csv"), &report.summary_csv())?;
    manifest.outputs.push("summary.csv".into());
    manifest.write(out)?;
    Ok(report)
}
