//! Zoom-out-and-in region proposal network with map attention gating.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`graph`], [`kernels`]), anchor geometry and target assignment, the
//! network itself, two-stage proposal inference, average-recall evaluation
//! and a deterministic synthetic corpus to train and test on.

pub mod anchors;
pub mod assign;
pub mod boxes;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod image;
pub mod kernels;
pub mod layers;
pub mod mad;
pub mod metrics;
pub mod network;
pub mod param;
pub mod roi;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NormMode, Var};
pub use param::{sgd_step, ParamId, ParamStore, Parameter, SgdConfig};
pub use tensor::{Element, Tensor};
