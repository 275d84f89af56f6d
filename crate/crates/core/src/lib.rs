//! Ultrasound elastography from pre/post-compression RF frame pairs.
//!
//! The pipeline is: a coarse, robust displacement field ([`coarse`]), a
//! global regularized refinement over every RF sample at once ([`glue`]),
//! least-squares axial strain ([`strain`]) and image-quality metrics
//! ([`metrics`]). [`phantom`] simulates frame pairs with known ground truth.

pub mod phantom;
pub mod coarse;
pub mod glue;
pub mod metrics;
pub mod rf;
pub mod strain;
