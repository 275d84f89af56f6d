//! RF frames, displacement fields and strain images, plus the ELRF/ELDF
//! interchange formats shared by every stage of the pipeline.

mod field;
mod frame;
pub mod io;
mod resample;

pub use field::{DisplacementField, StrainImage};
pub use frame::{Acquisition, FrameError, RfFrame, SOUND_SPEED_MM_PER_S};
pub use io::{Format, FormatError};
pub use resample::{bilinear_sample, resample_field};
