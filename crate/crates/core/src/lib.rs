// SPDX-License-Identifier: Apache-2.0

//! Iterative scene-graph generation on a synthetic shapes world.

pub mod assembly;
pub mod dataset;
pub mod decoder;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod motif;
pub mod scene;

pub use error::{CoreError, Result};
