//! Active camera relocalization toolkit.

pub mod acr;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod plane_match;
pub mod pose_estimation;
pub mod scale_solver;
pub mod simulator;

pub use error::{AcrError, Result};
