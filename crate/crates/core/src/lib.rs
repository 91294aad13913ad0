//! Training-memory cost model, checkpointing planner and a small reference
//! autodiff engine for studying low-memory training techniques.

pub mod engine;
pub mod error;
pub mod graph;
pub mod half;
pub mod optim;
pub mod plan;
pub mod planner;
pub mod profiler;
pub mod sparse;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{ComputationGraph, NodeId, NodeKind, StorageClass, TensorSpec};
pub use tensor::{DenseTensor, NumericFormat, SparseConvCSR, SparsityMask};
