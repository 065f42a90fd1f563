//! End-to-end federated simulation: data, local training and the round
//! protocol.

pub mod config;
pub mod data;
pub mod experiment;
pub mod model;

pub use config::{AmendSource, ExperimentConfig, Task, Weighting};
pub use data::{load_idx_subset, partition_dirichlet, ClientState, Dataset, SyntheticSpec};
pub use experiment::{run_experiment, Experiment, ExperimentResult, RoundRecord, Summary};
pub use model::{local_train, Architecture, TrainSpec};
