//! Output files, reports and the digest manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use elasto_core::rf::io::{save_field, save_image, Format};
use elasto_core::rf::{Acquisition, DisplacementField, RfFrame};
use image::GrayImage;
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::pipeline::{PairMetrics, PipelineError};

fn output_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| output_err(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| output_err(path, e))
}

pub fn write_frame(frame: &RfFrame, path: &Path) -> Result<(), PipelineError> {
    elasto_core::rf::io::save_frame(frame, path, Format::from_path(path)).map_err(|e| output_err(path, e))
}

pub fn write_field(field: &DisplacementField, path: &Path) -> Result<(), PipelineError> {
    save_field(field, path, Format::from_path(path)).map_err(|e| output_err(path, e))
}

pub fn write_image(values: &Array2<f64>, acq: &Acquisition, path: &Path) -> Result<(), PipelineError> {
    save_image(values, acq, path, Format::from_path(path)).map_err(|e| output_err(path, e))
}

/// 8-bit grayscale, `lo` black and `hi` white, rows along depth.
pub fn strain_png(values: &Array2<f64>, (lo, hi): (f64, f64)) -> GrayImage {
    let (m, n) = values.dim();
    GrayImage::from_fn(n as u32, m as u32, |x, y| {
        let t = ((values[[y as usize, x as usize]] - lo) / (hi - lo)).clamp(0.0, 1.0);
        image::Luma([(t * 255.0).round() as u8])
    })
}

pub fn write_png(values: &Array2<f64>, range: (f64, f64), path: &Path) -> Result<(), PipelineError> {
    strain_png(values, range)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| output_err(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| output_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Files written by one command, listed relative to the output directory.
#[derive(Debug, Default, Clone)]
pub struct Manifest {
    pub command: String,
    pub params: Vec<(String, String)>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            ..Self::default()
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) {
        self.params.push((key.to_string(), value.to_string()));
    }

    /// Renders and writes `manifest.txt` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, PipelineError> {
        let mut text = String::from("# elasto manifest\n");
        writeln!(text, "command={}", self.command).unwrap();
        for (k, v) in &self.params {
            writeln!(text, "{k}={v}").unwrap();
        }
        for path in &self.inputs {
            writeln!(text, "input {} sha256={}", path.display(), sha256_file(path)?).unwrap();
        }
        let mut outputs = self.outputs.clone();
        outputs.sort();
        outputs.dedup();
        for rel in &outputs {
            let full = dir.join(rel);
            let bytes = fs::metadata(&full).map_err(|e| output_err(&full, e))?.len();
            writeln!(text, "output {} sha256={} bytes={bytes}", rel.display(), sha256_file(&full)?).unwrap();
        }
        let path = dir.join("manifest.txt");
        write_text(&path, &text)?;
        Ok(path)
    }
}

/// Parses a manifest and checks every listed output against its digest.
/// Returns the number of outputs checked.
pub fn verify_manifest(dir: &Path) -> Result<usize, String> {
    let text = fs::read_to_string(dir.join("manifest.txt")).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for line in text.lines().filter(|l| l.starts_with("output ")) {
        let mut parts = line.split_whitespace().skip(1);
        let rel = parts.next().ok_or("missing path")?;
        let digest = parts
            .next()
            .and_then(|d| d.strip_prefix("sha256="))
            .ok_or("missing digest")?;
        let actual = sha256_file(&dir.join(rel)).map_err(|e| e.to_string())?;
        if actual != digest {
            return Err(format!("{rel}: digest {actual} does not match {digest}"));
        }
        checked += 1;
    }
    Ok(checked)
}

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    }
}

/// `key=value` report of one pair.
pub fn metrics_text(label: &str, applied_strain: Option<f64>, m: &PairMetrics) -> String {
    let mut s = String::new();
    writeln!(s, "# mssim compares estimated and ground-truth strain images").unwrap();
    writeln!(s, "pair={label}").unwrap();
    writeln!(s, "applied_strain={}", opt(applied_strain)).unwrap();
    writeln!(s, "mssim={}", opt(m.mssim)).unwrap();
    writeln!(s, "snr_e={}", opt(m.snr_e)).unwrap();
    writeln!(s, "cnr_e={}", opt(m.cnr_e)).unwrap();
    writeln!(s, "target_mean={}", opt(m.target_mean)).unwrap();
    writeln!(s, "background_mean={}", opt(m.background_mean)).unwrap();
    writeln!(s, "central_mean={:.6}", m.central_mean).unwrap();
    writeln!(s, "coarse_rmse={}", opt(m.coarse_rmse)).unwrap();
    writeln!(s, "refined_rmse={}", opt(m.refined_rmse)).unwrap();
    if let Some(r) = &m.regions {
        let t = &r.target;
        let b = &r.background;
        writeln!(s, "target_region={},{},{},{}", t.row0, t.row1, t.col0, t.col1).unwrap();
        writeln!(s, "background_region={},{},{},{}", b.row0, b.row1, b.col0, b.col1).unwrap();
    }
    s
}

pub const CSV_HEADER: &str =
    "pair,applied_strain,success,recognizable,mssim,snr_e,cnr_e,target_mean,background_mean,central_mean,coarse_rmse,refined_rmse,error";

/// One summary row. `recognizable_cnr` of `None` leaves the flag empty.
pub fn csv_row(label: &str, applied_strain: Option<f64>, result: Result<&PairMetrics, &str>, recognizable_cnr: f64) -> String {
    match result {
        Ok(m) => {
            let recognizable = matches!((m.cnr_e, m.snr_e), (Some(c), Some(s)) if c >= recognizable_cnr && s.is_finite());
            format!(
                "{label},{},true,{recognizable},{},{},{},{},{},{:.6},{},{},",
                opt(applied_strain),
                opt(m.mssim),
                opt(m.snr_e),
                opt(m.cnr_e),
                opt(m.target_mean),
                opt(m.background_mean),
                m.central_mean,
                opt(m.coarse_rmse),
                opt(m.refined_rmse),
            )
        }
        Err(msg) => {
            let clean: String = msg.chars().map(|c| if c == ',' || c == '\n' { ';' } else { c }).collect();
            format!("{label},{},false,false,NA,NA,NA,NA,NA,NA,NA,NA,{clean}", opt(applied_strain))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_maps_range_linearly() {
        let v = Array2::from_shape_vec((1, 3), vec![-1.0, 0.02, 0.09]).unwrap();
        let img = strain_png(&v, (0.0, 0.04));
        assert_eq!(img.dimensions(), (3, 1));
        assert_eq!(img.get_pixel(0, 0).0, [0]);
        assert_eq!(img.get_pixel(1, 0).0, [128]);
        assert_eq!(img.get_pixel(2, 0).0, [255]);
    }

    #[test]
    fn manifest_digests_verify() {
        let dir = tempfile::tempdir().unwrap();
        write_text(&dir.path().join("a.txt"), "hello").unwrap();
        let mut m = Manifest::new("test");
        m.param("seed", 3);
        m.outputs.push("a.txt".into());
        m.write(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        // sha256("hello")
        assert!(text.contains("2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"));
        assert_eq!(verify_manifest(dir.path()), Ok(1));
        write_text(&dir.path().join("a.txt"), "changed").unwrap();
        assert!(verify_manifest(dir.path()).is_err());
    }

    #[test]
    fn failure_rows_keep_the_column_count() {
        let cols = CSV_HEADER.split(',').count();
        let row = csv_row("p", Some(0.01), Err("bad, worse\nworst"), 2.0);
        assert_eq!(row.split(',').count(), cols);
    }
}
