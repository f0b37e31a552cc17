//! Federated transient-stability assessment.
//!
//! The crate covers the whole pipeline: a classical-model swing simulator on
//! the IEEE 39-bus system generates labeled trajectories, trajectories are cut
//! into 5x10x5 sliding-window samples, a small CNN is trained on each client's
//! samples, and client models are combined by federated averaging either
//! in-process or over a TCP parameter server.

pub mod error;
pub mod grid;
pub mod sim;
pub mod label;
pub mod dataset;
pub mod neural;
pub mod federation;
pub mod scenarios;
pub mod seed;

pub use dataset::{ClientDataset, SampleShape, Split, WindowSample};
pub use error::{Error, Result};
pub use federation::{FedConfig, FedOutcome, RoundReport, Transport};
pub use grid::{BusSystem, FaultSpec};
pub use label::StabilityLabel;
pub use neural::{ModelArch, ModelParams, Network};
pub use sim::{Parameter, Scenario, Trajectory};
