//! Feature-map normalization kernels (BN, IN, LN, GN, PN and batch group
//! normalization) with explicit forward and backward passes, a finite
//! difference gradient checker, and a small CNN harness for studying how
//! each method behaves as the per-worker batch size shrinks.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod norm;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use norm::{
    build_partition, norm_backward, norm_forward, select_group_count, update_running, Mode, NormCache, NormKind,
    NormLayer, NormMethod, NormParams, RunningStats, StatPartition,
};
pub use tensor::{reduce_mean, reduce_var, Matrix, Precision, Real, Shape4, Tensor4};
