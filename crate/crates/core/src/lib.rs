//! siglab: a laboratory for emergent-language signalling games.
//!
//! Speaker-listener agent pairs are trained end to end on two games over a
//! symbolic attribute-value world — a referential game (pick the target out
//! of candidates) and a reconstruction game (regenerate the input) — with a
//! Gumbel-softmax discrete channel between the agents. The emergent languages
//! are scored for compositionality (topographic similarity) and compared for
//! expressivity by freezing each language and training fresh listeners on it.
//! Multi-seed runs feed Welch t-tests so the comparisons come with
//! significance levels.

pub mod agents;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod curves;
pub mod dataset;
pub mod error;
pub mod games;
pub mod manifest;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod rng;
pub mod stats;
pub mod transfer;

pub use error::{Error, Result};
