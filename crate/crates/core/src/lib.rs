//! Data-dependent path (DDP) geometry for feedforward ReLU networks.
//!
//! The crate is organised around a single network model, a DAG of input,
//! bias, internal (ReLU) and output (identity) nodes with one weight per
//! edge, and the optimisers and analyses built on top of it:
//!
//! - [`netgraph`]: topology, forward/backward propagation, node-wise rescaling.
//! - [`complexity`]: the per-node measure `gamma_v` and `gamma_net`.
//! - [`ddpsgd`]: per-edge curvature `kappa` and the DDP-SGD update (Path-SGD
//!   and diagonal natural gradient are special cases).
//! - [`ddpnorm`]: DDP-Normalization, a Batch-Normalization style
//!   reparametrization with exact batch-coupled gradients.
//! - [`oracles`]: brute-force reference computations used to check the above.
//! - [`paths`]: path enumeration, the path-Jacobian, numerical rank and
//!   degrees-of-freedom analysis.
//! - [`train`]: datasets, the mini-batch training loop and metrics.

// Index loops over several aligned buffers read better than zipped iterators,
// and `!(x > 0.0)` is used on purpose to reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod complexity;
pub mod ddpnorm;
pub mod ddpsgd;
pub mod error;
pub mod instances;
pub mod loss;
pub mod netgraph;
pub mod oracles;
pub mod paths;
pub mod train;

pub use complexity::{ComplexityConfig, NodeGamma, SMode};
pub use error::{Error, Result};
pub use loss::{Labels, LossSpec};
pub use netgraph::{ActivationRecord, Batch, NetworkTopology, NodeKind, WeightVector};
