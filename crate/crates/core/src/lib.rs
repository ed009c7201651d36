//! Product-of-filters (PoF) modelling of audio magnitude spectrograms.

pub mod bwe;
pub mod cli;
pub mod dsp;
pub mod error;
pub mod estep;
pub mod features;
pub mod model;
pub mod mstep;
pub mod nmf;
pub mod optim;
pub mod specfn;

pub use error::{PofError, Result};
