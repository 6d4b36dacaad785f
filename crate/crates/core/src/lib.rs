//! Desk-scale self-supervised learning lab.
//!
//! A small, fully deterministic CPU stack for studying how normalization
//! choices interact with BYOL and SimCLR training: a reverse-mode autodiff
//! tensor engine, the BN/LN/GN/IN/WS normalization family, a small residual
//! encoder with per-component norm selection, the BN-capture re-initialization
//! protocol, and collapse/linear-probe evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod init_protocol;
pub mod model;
pub mod norm;
pub mod objectives;
pub mod optim;
pub mod runner;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
