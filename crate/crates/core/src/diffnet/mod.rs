//! Differentiable building blocks of the per-time-step gradient networks.
//!
//! Parameters live in one flat [`ParameterVector`]: the scalar `u0`, the
//! direct time-zero gradient `z0`, then one block per subnet for time steps
//! `1..N`. Every subnet is `Linear -> BN -> ReLU -> Linear -> BN -> ReLU ->
//! Linear -> BN` with hidden width `d + 10` and no biases (the batch-norm
//! shifts play that role).
//!
//! Forward passes are recorded on a [`Tape`] and differentiated in reverse
//! mode, including through the batch statistics in training mode.

mod batchnorm;
pub(crate) mod params;
mod subnet;
mod tape;

pub use batchnorm::{BatchNormState, LayerStats};
pub use params::{init_params, param_count, Block, ParamLayout, ParameterVector, SubnetOffsets};
pub use subnet::{record_subnet, subnet_forward, Mode, SubnetSpec};
pub use tape::{BatchMoments, NodeId, Tape};
