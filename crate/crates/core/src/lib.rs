pub mod autodiff;
pub mod cli;
pub mod config;
pub mod control;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod pipeline;
pub mod planner;
pub mod sampling;

pub use error::{Error, Result};
