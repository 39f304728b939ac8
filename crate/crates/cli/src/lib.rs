// SPDX-License-Identifier: Apache-2.0

//! Operational surface: run configuration, data generation, training,
//! evaluation and export.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod train;

pub use config::{Family, RunConfig};
pub use error::{CliError, Result};
