//! Simulation of structured-light beams produced by a cascaded q-plate
//! quantum walk, modelled with Hypergeometric-Gaussian modes.

pub mod cascade;
pub mod error;
pub mod field;
pub mod holography;
pub mod imaging;
pub mod modes;
pub mod polarization;
pub mod propagation;
pub mod specfun;

pub use error::{Error, Result};
pub use field::{overlap, Field, Grid};
pub use modes::{BeamParams, HyggIndex, LgIndex, ModeIndex, PolarizedSuperposition};
pub use polarization::{Jones, JonesMatrix, Pol};
