//! Region-aware mixture-of-experts segmentation of informal settlements with
//! stability-filtered test-time adaptation, on a synthetic multi-region
//! benchmark.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod params;
pub mod rng;
pub mod train;
pub mod tta;

pub use error::{GramError, Result};
