//! Decentralized, privacy-preserving, convolution-smoothed quantile regression
//! over feature-partitioned data.

pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod io;
pub mod node;
pub mod normal;
pub mod protocol;
pub mod seed;
pub mod smoothing;
pub mod topology;

pub use error::{Error, Result};
pub use node::{NodeState, PrivacyParams, SensitivityMode};
pub use protocol::{build_nodes, run_dsg_cqr, FitConfig, FitResult, TraceRecord};
pub use smoothing::{Kernel, QuantileSpec};
pub use topology::{Graph, MixingMatrix, TopologyKind};
