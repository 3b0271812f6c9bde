//! Multi-activity federated learning: consolidation into a shared-trunk
//! model, lookahead affinity grouping, and split training.

pub mod affinity;
pub mod config;
pub mod error;
pub mod federation;
pub mod ledger;
pub mod nn;
pub mod oracle;
pub mod orchestrator;
pub mod partition;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
