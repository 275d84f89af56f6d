//! ELRF / ELDF binary formats and their CSV debugging variants.
//!
//! ELRF (RF frame or any scalar image), little-endian, 48-byte header:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "ELRF"
//!      4     1  version (1)
//!      5     3  reserved, zero
//!      8     4  m, axial samples (u32)
//!     12     4  n, lateral lines (u32)
//!     16     8  sampling_rate, Hz (f64)
//!     24     8  center_frequency, Hz (f64)
//!     32     8  axial_spacing, mm/sample (f64)
//!     40     8  lateral_spacing, mm/line (f64)
//!     48   4mn  samples, row-major f32
//! ```
//!
//! ELDF (displacement field), 16-byte header followed by two planes:
//!
//! ```text
//!      0     4  magic "ELDF"
//!      4     1  version (1)
//!      5     3  reserved, zero
//!      8     4  m (u32)
//!     12     4  n (u32)
//!     16   4mn  axial displacement, samples, row-major f32
//!  16+4mn  4mn  lateral displacement, lines, row-major f32
//! ```

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::field::DisplacementField;
use super::frame::{Acquisition, FrameError, RfFrame};

pub const FRAME_MAGIC: &[u8; 4] = b"ELRF";
pub const FIELD_MAGIC: &[u8; 4] = b"ELDF";
pub const FORMAT_VERSION: u8 = 1;
pub const FRAME_HEADER_LEN: usize = 48;
pub const FIELD_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {found} bytes, header declares {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value at payload index {index}")]
    NonFiniteData { index: usize },
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Invalid(#[from] FrameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.csv` selects CSV, anything else the binary layout.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

fn put_header(buf: &mut Vec<u8>, magic: &[u8; 4], m: usize, n: usize) -> Result<(), FormatError> {
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| FormatError::MalformedHeader(format!("dimension {v} exceeds u32")))
    };
    buf.extend_from_slice(magic);
    buf.push(FORMAT_VERSION);
    buf.extend_from_slice(&[0u8; 3]);
    buf.extend_from_slice(&dim(m)?.to_le_bytes());
    buf.extend_from_slice(&dim(n)?.to_le_bytes());
    Ok(())
}

fn put_plane(buf: &mut Vec<u8>, values: &Array2<f64>) {
    for v in values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Encodes any finite scalar image as ELRF bytes.
pub fn encode_image(values: &Array2<f64>, acq: &Acquisition) -> Result<Vec<u8>, FormatError> {
    let (m, n) = values.dim();
    let mut buf = Vec::with_capacity(FRAME_HEADER_LEN + 4 * m * n);
    put_header(&mut buf, FRAME_MAGIC, m, n)?;
    for v in [
        acq.sampling_rate,
        acq.center_frequency,
        acq.axial_spacing,
        acq.lateral_spacing,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    put_plane(&mut buf, values);
    Ok(buf)
}

pub fn encode_field(field: &DisplacementField) -> Result<Vec<u8>, FormatError> {
    let (m, n) = field.dim();
    let mut buf = Vec::with_capacity(FIELD_HEADER_LEN + 8 * m * n);
    put_header(&mut buf, FIELD_MAGIC, m, n)?;
    put_plane(&mut buf, field.axial());
    put_plane(&mut buf, field.lateral());
    Ok(buf)
}

fn read_u32(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
}

fn read_f64(bytes: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

fn check_header(bytes: &[u8], magic: &[u8; 4], header_len: usize) -> Result<(usize, usize), FormatError> {
    if bytes.len() < header_len {
        return Err(FormatError::MalformedHeader(format!(
            "file is {} bytes, header needs {header_len}",
            bytes.len()
        )));
    }
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &found != magic {
        return Err(FormatError::BadMagic {
            expected: *magic,
            found,
        });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let (m, n) = (read_u32(bytes, 8), read_u32(bytes, 12));
    if m == 0 || n == 0 {
        return Err(FormatError::MalformedHeader(format!("zero dimension {m}x{n}")));
    }
    Ok((m, n))
}

fn read_plane(bytes: &[u8], m: usize, n: usize, index_base: usize) -> Result<Array2<f64>, FormatError> {
    let mut values = Vec::with_capacity(m * n);
    for (k, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFiniteData {
                index: index_base + k,
            });
        }
        values.push(v as f64);
    }
    Ok(Array2::from_shape_vec((m, n), values).expect("plane length checked"))
}

/// Decodes ELRF bytes into the raw image and its acquisition header.
pub fn decode_image(bytes: &[u8]) -> Result<(Array2<f64>, Acquisition), FormatError> {
    let (m, n) = check_header(bytes, FRAME_MAGIC, FRAME_HEADER_LEN)?;
    let acq = Acquisition {
        sampling_rate: read_f64(bytes, 16),
        center_frequency: read_f64(bytes, 24),
        axial_spacing: read_f64(bytes, 32),
        lateral_spacing: read_f64(bytes, 40),
    };
    let payload = &bytes[FRAME_HEADER_LEN..];
    let expected = m.checked_mul(n).and_then(|v| v.checked_mul(4)).ok_or_else(|| {
        FormatError::MalformedHeader(format!("dimensions {m}x{n} overflow"))
    })?;
    if payload.len() != expected {
        return Err(FormatError::DimensionMismatch {
            expected,
            found: payload.len(),
        });
    }
    Ok((read_plane(payload, m, n, 0)?, acq))
}

pub fn decode_frame(bytes: &[u8]) -> Result<RfFrame, FormatError> {
    let (samples, acq) = decode_image(bytes)?;
    Ok(RfFrame::new(samples, acq)?)
}

pub fn decode_field(bytes: &[u8]) -> Result<DisplacementField, FormatError> {
    let (m, n) = check_header(bytes, FIELD_MAGIC, FIELD_HEADER_LEN)?;
    let payload = &bytes[FIELD_HEADER_LEN..];
    let plane = m.checked_mul(n).and_then(|v| v.checked_mul(4)).ok_or_else(|| {
        FormatError::MalformedHeader(format!("dimensions {m}x{n} overflow"))
    })?;
    if payload.len() != 2 * plane {
        return Err(FormatError::DimensionMismatch {
            expected: 2 * plane,
            found: payload.len(),
        });
    }
    let axial = read_plane(&payload[..plane], m, n, 0)?;
    let lateral = read_plane(&payload[plane..], m, n, m * n)?;
    Ok(DisplacementField::new(axial, lateral)?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn csv_rows(values: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in values.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn parse_csv_matrix(text: &str) -> Result<Array2<f64>, FormatError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                let v: f64 = t.trim().parse().map_err(|e| FormatError::Csv {
                    line: k + 1,
                    message: format!("{t:?}: {e}"),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(FormatError::NonFiniteData {
                        index: rows.iter().map(Vec::len).sum(),
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(FormatError::Csv {
                    line: k + 1,
                    message: format!("{} columns, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((m, n), rows.into_iter().flatten().collect())
        .map_err(|e| FormatError::MalformedHeader(e.to_string()))
}

/// Writes a frame. CSV carries samples only, one axial row per line.
pub fn save_frame(frame: &RfFrame, path: &Path, format: Format) -> Result<(), FormatError> {
    match format {
        Format::Binary => write_bytes(path, &encode_image(frame.samples(), frame.acquisition())?),
        Format::Csv => Ok(fs::write(path, csv_rows(frame.samples()))?),
    }
}

/// Reads a frame. CSV files have no header, so they get the default
/// acquisition metadata; use [`load_frame_csv`] to supply it.
pub fn load_frame(path: &Path, format: Format) -> Result<RfFrame, FormatError> {
    match format {
        Format::Binary => decode_frame(&fs::read(path)?),
        Format::Csv => {
            log::info!("{}: CSV frame has no header, using the default acquisition", path.display());
            load_frame_csv(path, Acquisition::default())
        }
    }
}

pub fn load_frame_csv(path: &Path, acq: Acquisition) -> Result<RfFrame, FormatError> {
    let samples = parse_csv_matrix(&fs::read_to_string(path)?)?;
    Ok(RfFrame::new(samples, acq)?)
}

/// Writes a scalar image (e.g. a strain map) as ELRF or CSV.
pub fn save_image(values: &Array2<f64>, acq: &Acquisition, path: &Path, format: Format) -> Result<(), FormatError> {
    match format {
        Format::Binary => write_bytes(path, &encode_image(values, acq)?),
        Format::Csv => Ok(fs::write(path, csv_rows(values))?),
    }
}

pub fn load_image(path: &Path) -> Result<(Array2<f64>, Acquisition), FormatError> {
    decode_image(&fs::read(path)?)
}

/// Writes a displacement field. CSV form is `row,col,axial,lateral` with a
/// header line.
pub fn save_field(field: &DisplacementField, path: &Path, format: Format) -> Result<(), FormatError> {
    match format {
        Format::Binary => write_bytes(path, &encode_field(field)?),
        Format::Csv => {
            let mut w = BufWriter::new(fs::File::create(path)?);
            writeln!(w, "row,col,axial,lateral")?;
            for ((i, j), a) in field.axial().indexed_iter() {
                writeln!(w, "{i},{j},{a},{}", field.lateral()[[i, j]])?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

pub fn load_field(path: &Path, format: Format) -> Result<DisplacementField, FormatError> {
    match format {
        Format::Binary => decode_field(&fs::read(path)?),
        Format::Csv => {
            let reader = BufReader::new(fs::File::open(path)?);
            let mut entries = Vec::new();
            for (k, line) in reader.lines().enumerate().skip(1) {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let bad = |message: String| FormatError::Csv { line: k + 1, message };
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                if cols.len() != 4 {
                    return Err(bad(format!("{} columns, expected 4", cols.len())));
                }
                let i: usize = cols[0].parse().map_err(|e| bad(format!("row: {e}")))?;
                let j: usize = cols[1].parse().map_err(|e| bad(format!("col: {e}")))?;
                let a: f64 = cols[2].parse().map_err(|e| bad(format!("axial: {e}")))?;
                let l: f64 = cols[3].parse().map_err(|e| bad(format!("lateral: {e}")))?;
                if !a.is_finite() || !l.is_finite() {
                    return Err(FormatError::NonFiniteData { index: entries.len() });
                }
                entries.push((i, j, a, l));
            }
            let m = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
            let n = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
            if entries.len() != m * n {
                return Err(FormatError::DimensionMismatch {
                    expected: m * n,
                    found: entries.len(),
                });
            }
            let mut axial = Array2::zeros((m, n));
            let mut lateral = Array2::zeros((m, n));
            for (i, j, a, l) in entries {
                axial[[i, j]] = a;
                lateral[[i, j]] = l;
            }
            Ok(DisplacementField::new(axial, lateral)?)
        }
    }
}
