//! A desk-scale distributed dense-matrix runtime.

pub mod checkpoint;
pub mod cli;
pub mod dataload;
pub mod descriptor;
pub mod dnn;
pub mod error;
pub mod kernels;
pub mod layout;
pub mod ops;
pub mod pool;
pub mod precision;
pub mod replication;
pub mod session;
pub mod sim;
pub mod transport;
pub mod wire;
pub mod worker;

pub use error::{Error, Result};
