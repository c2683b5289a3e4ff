//! Runner, remote backend, file formats and CLI commands for
//! clone-delegation episodes. The computation lives in `delegate-core`.

pub mod commands;
pub mod config;
pub mod exec;
pub mod io;
pub mod metrics;
pub mod remote;

pub use config::{PolicyConfig, RunConfig};
pub use metrics::MetricsReport;
