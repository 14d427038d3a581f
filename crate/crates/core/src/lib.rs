//! Diffusion sampling engine built around the time-shift sampler.
//!
//! The crate covers the full desk-scale pipeline: noise schedules and time
//! grids, analytic and learned ε-predictors, the DDPM/DDIM/PNDM baselines,
//! variance-matched timestep selection, numerical checks of the optimal-shift
//! theory and the exposure-bias diagnostics.

pub mod batch;
pub mod cli;
pub mod config;
pub mod denoisers;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod theory;
pub mod timeshift;
pub mod training;
pub mod verify;

pub use batch::SampleBatch;
pub use error::{Error, ErrorCategory, Result};
