pub mod adp;
pub mod attention;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod mia;
pub mod model;
pub mod nn;
pub mod resample;
pub mod ssca;
pub mod trainer;
pub mod ura;

pub use error::{Error, Result};
