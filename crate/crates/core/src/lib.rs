//! Deep Picard-iteration solver for McKean-Vlasov forward-backward SDEs with
//! common noise, where the mean-field statistic is learned through an
//! elicitable score instead of nested Monte Carlo.

pub mod autodiff;
pub mod error;
pub mod io;
pub mod models;
pub mod orchestrator;
pub mod scores;
pub mod solvers;
pub mod stochastics;
pub mod validation;

pub use error::{Error, Result};
