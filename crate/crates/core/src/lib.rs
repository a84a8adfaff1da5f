//! Multi-modal graph recommendation: homogeneous user/item graphs,
//! LightGCN propagation over the interaction graph, item attention, and a
//! refined contrastive objective with a low-rank meta-network and an
//! orthogonality constraint.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod hetero;
pub mod homograph;
pub mod refine;
pub mod synthetic;
pub mod tape;
pub mod train;

pub use error::{RearmError, Result};
