//! Dense-tensor core with reverse-mode differentiation.
//!
//! Supports second-order use: gradients of a scalar loss with respect to
//! distillation parameters *through* N unrolled inner SGD steps.
//!
//! Graph construction and backward are single-threaded per run; values
//! are immutable after construction and may be shared across threads.
//! Parallelism lives inside primitive kernels and across independent
//! runs, never across a shared tape.

pub mod array;
pub mod fd;
pub mod graph;
pub mod nn;
pub mod unroll;

pub use array::NdArray;
pub use fd::{finite_difference_at, finite_difference_oracle, rel_err};
pub use graph::{GradientMap, Graph, NodeId};
pub use nn::{
    avg_pool2, conv2d_bias, instance_norm, linear, mode_product, normalize_instances,
    select_rows, softmax_cross_entropy, sq_l2,
};
pub use unroll::{run_unrolled_sgd, unrolled_sgd_gradients, InnerBatch};
