//! Library surface of the batch front-end, used by the binary and the
//! integration suite.

pub mod config;
pub mod eval;
pub mod runner;
pub mod sweep;
pub mod verify;
