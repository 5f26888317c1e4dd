//! DEMAR at desk scale: dual ensembled multiagent Q-learning with a hypernet
//! regularizer, the classic value-mixing baselines, small cooperative
//! environments with injectable sensor noise, and an oracle suite that checks
//! the overestimation analysis the method is built on.

pub mod checkpoint;
pub mod ensemble;
pub mod error;
pub mod grad;
pub mod learner;
pub mod mat;
pub mod nets;
pub mod oracle;
pub mod rng;
pub mod targets;
pub mod worlds;

pub use error::{Error, Result};
