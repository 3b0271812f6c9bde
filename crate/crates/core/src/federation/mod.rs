//! Synthetic client population, client sampling, local training, FedAvg,
//! and test-set evaluation.

mod aggregate;
mod data;
mod eval;
mod local;

pub use aggregate::{fedavg, size_weights};
pub use data::{generate_population, ClientDataset, ClientPool, SyntheticTaskSpec};
pub use eval::{evaluate, evaluate_model, EvalReport};
pub use local::{local_train, sample_clients, LocalOutcome};

pub use crate::nn::{Batch, Targets};
