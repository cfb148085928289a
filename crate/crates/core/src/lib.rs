pub mod config;
pub mod dynamics;
pub mod error;
pub mod gibbs;
pub mod harness;
pub mod metrics;
pub mod plot;
pub mod potential;
pub mod quadrature;
pub mod seed;
pub mod shifts;
pub mod state;
pub mod stats;
pub mod torus;

pub use error::{Error, Result};
