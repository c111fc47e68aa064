//! Federated learning protocol engine and simulator.
//!
//! Sites train local models ([`training`]) on synthetic federations
//! ([`data`]) and exchange parameters over a framed binary protocol
//! ([`wire`]), either through a central aggregation server or peer to peer
//! under a metadata-only coordinator ([`orchestration`]).

pub mod algorithms;
pub mod cli;
pub mod data;
pub mod experiment;
pub mod orchestration;
pub mod params;
pub mod rng;
pub mod stats;
pub mod training;
pub mod wire;

pub use algorithms::{
    contrastive_kl, dcml_step, fedavg_aggregate, fedprox_objective, gcml_merge, DcmlConfig, MergeMode, PredictionBatch,
    SiteUpdate,
};
pub use data::{generate_federation, FederatedDataset, FederationLayout};
pub use orchestration::{run_in_process, FederationConfig, RunOutcome};
pub use params::ParameterVector;
pub use training::{LabeledDataset, TrainerSpec};
