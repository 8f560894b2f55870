//! Minimal reverse-mode differentiable core: tensors, a per-step op tape
//! with exact adjoints, deterministic RNG, checkpoint I/O and the
//! finite-difference oracle used to verify every adjoint.

pub mod checkpoint;
pub mod fdcheck;
pub mod graph;
pub mod kernels;
pub mod rng;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, ParamStore};
pub use fdcheck::{finite_diff_against, finite_diff_check, DEFAULT_EPS};
pub use graph::{zero_grads, ActKind, Graph, GraphError, Param, ParamRef, Var};
pub use rng::{derive_seed, splitmix64, Rng};
pub use tensor::{Dtype, Element, Tensor, TensorError};
