//! Soft channel pruning for small convolutional networks.
//!
//! Each masked batch-norm channel is treated as a Gaussian `N(beta, gamma^2)`
//! after the affine transform. Its probability of being zeroed by the next
//! ReLU drives a relaxed Gumbel-Softmax mask during training and a hard
//! keep/prune decision afterwards. Pruned channels are then removed from the
//! network without retraining.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below name the usual instantiations.

// `!(x > 0)` is how NaN gets rejected alongside non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod mask;
pub mod model;
pub mod optim;
pub mod pruner;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use losses::{LossBreakdown, SparsityConfig, SparsityVariant, TargetRatioDecision, UpdateKind};
pub use mask::{BnChannelState, GumbelPair, LayerMask, MaskActivation, MaskHyperParams, MaskVariant, Mode};
pub use model::{Architecture, BatchNorm, Layer, ModelGraph, TrainForward};
pub use optim::{LrSchedule, OptimizerState, ParamKind};
pub use pruner::{count_flops, count_params, extract_masks, make_report, surgery, PruneReport};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = ModelGraph<f32>;
pub type Model64 = ModelGraph<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
