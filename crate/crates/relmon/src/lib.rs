//! Online monitoring of a univariate stream for relevant mean changes:
//! multiscale change-point estimation, blocked long-run variance, and a
//! sequential relevance test against Monte-Carlo quantiles of the limiting
//! Brownian functional.

pub mod cli;
pub mod cpe;
pub mod error;
pub mod limit_sim;
pub mod lrv;
pub mod monitor;
pub mod simlab;
pub mod stream_core;

pub use error::{RelmonError, Result};
pub use monitor::Monitor;
pub use stream_core::{CpConstant, DecisionEvent, MonitorConfig, QuantileMode, StreamState};
