//! Sepsis immune-response models with bifurcation analysis and
//! Bayesian-optimization / recurrent-network treatment control.
//!
//! The model hierarchy has three nested variants ([`Subsystem`]): a neutrophil
//! subsystem, a monocyte subsystem, and the full model with adaptive immunity
//! and two control inputs (antibiotic and anti-TNF).

pub mod bifurcation;
pub mod bo;
pub mod control;
pub mod error;
pub mod integrator;
pub mod model;
pub mod params;
pub mod presets;
pub mod rnn;
pub mod state;

pub use error::{Error, Result};
pub use params::ParameterSet;
pub use state::{ControlInput, StateVector, Subsystem};
