//! Simulation and characterization of lossy multi-port linear optical
//! interferometers from one- and two-photon interference data.
//!
//! The crate closes the loop between a forward model and a reconstruction
//! pipeline: [`simulator`] produces synthetic single-photon count tables and
//! two-photon coincidence curves for a known ground-truth interferometer,
//! [`estimation`] recovers the transfer-matrix amplitudes and arguments from
//! such data, and [`reconstruction`] assembles the most-likely unitary and
//! attaches bootstrap error bars. Reconstruction accuracy is scored with
//! [`model::distance_to_class`], which compares matrices modulo the
//! input/output phase gauge that photon counting cannot resolve.

pub mod coincidence;
pub mod dataset;
pub mod estimation;
pub mod experiments;
pub mod fitting;
pub mod model;
pub mod reconstruction;
pub mod seeds;
pub mod simulator;

pub use model::{CoincidenceCurve, LossModel, ModeMatch, RepresentativeMatrix, Spectrum};
