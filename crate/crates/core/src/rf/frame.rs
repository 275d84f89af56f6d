use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of sound in soft tissue, mm/s.
pub const SOUND_SPEED_MM_PER_S: f64 = 1.54e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("frame must be at least 2x2, got {m}x{n}")]
    TooSmall { m: usize, n: usize },
    #[error("non-finite sample at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("sampling rate {sampling_rate} Hz does not exceed twice the center frequency {center_frequency} Hz")]
    BelowNyquist {
        sampling_rate: f64,
        center_frequency: f64,
    },
    #[error("spacings must be positive and finite (axial {axial}, lateral {lateral})")]
    BadSpacing { axial: f64, lateral: f64 },
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// Acquisition metadata carried alongside every RF frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Acquisition {
    /// Hz.
    pub sampling_rate: f64,
    /// Hz.
    pub center_frequency: f64,
    /// mm per axial sample.
    pub axial_spacing: f64,
    /// mm per lateral line.
    pub lateral_spacing: f64,
}

impl Acquisition {
    /// Pulse-echo acquisition at `sampling_rate` with the axial spacing
    /// implied by the round trip at the tissue sound speed.
    pub fn pulse_echo(sampling_rate: f64, center_frequency: f64, lateral_spacing: f64) -> Self {
        Self {
            sampling_rate,
            center_frequency,
            axial_spacing: SOUND_SPEED_MM_PER_S / (2.0 * sampling_rate),
            lateral_spacing,
        }
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if !(self.sampling_rate.is_finite() && self.center_frequency.is_finite())
            || self.sampling_rate <= 2.0 * self.center_frequency
        {
            return Err(FrameError::BelowNyquist {
                sampling_rate: self.sampling_rate,
                center_frequency: self.center_frequency,
            });
        }
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.axial_spacing) || !ok(self.lateral_spacing) {
            return Err(FrameError::BadSpacing {
                axial: self.axial_spacing,
                lateral: self.lateral_spacing,
            });
        }
        Ok(())
    }
}

impl Default for Acquisition {
    /// 6.67 MHz linear array sampled at 40 MHz, 0.2 mm line pitch.
    fn default() -> Self {
        Self::pulse_echo(40.0e6, 6.67e6, 0.2)
    }
}

/// A 2D grid of RF echo amplitudes, `m` axial samples by `n` lateral lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RfFrame {
    samples: Array2<f64>,
    acquisition: Acquisition,
}

impl RfFrame {
    pub fn new(samples: Array2<f64>, acquisition: Acquisition) -> Result<Self, FrameError> {
        let (m, n) = samples.dim();
        if m < 2 || n < 2 {
            return Err(FrameError::TooSmall { m, n });
        }
        check_finite(&samples)?;
        acquisition.validate()?;
        Ok(Self {
            samples,
            acquisition,
        })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn acquisition(&self) -> &Acquisition {
        &self.acquisition
    }

    /// `(axial samples, lateral lines)`.
    pub fn dim(&self) -> (usize, usize) {
        self.samples.dim()
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }
}

pub(crate) fn check_finite(values: &Array2<f64>) -> Result<(), FrameError> {
    match values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((row, col), _)) => Err(FrameError::NonFinite { row, col }),
        None => Ok(()),
    }
}
