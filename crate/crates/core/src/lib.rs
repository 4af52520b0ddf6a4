//! Active Cartesian MRI line selection driven by a tokenized latent model.

pub mod cli;
pub mod config;
pub mod ctns;
pub mod error;
pub mod grad;
pub mod io;
pub mod kspace;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod phantom;
pub mod policies;
pub mod tape;
pub mod tokenizer;

pub use error::{Error, Result};
