//! Minimal reverse-mode automatic differentiation for small convolutional
//! and attention networks on the CPU.
//!
//! Kernels are single-threaded and deterministic: the same inputs produce
//! bit-identical outputs and gradients.

pub mod array;
pub mod checkpoint;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod store;
pub mod testing;

mod ops {
    pub mod conv;
    pub mod elementwise;
    pub mod linalg;
    pub mod norm;
    pub mod shape;
}

pub use array::Array;
pub use checkpoint::{Checkpoint, CheckpointError};
pub use graph::{Grads, Graph, Var};
pub use ops::elementwise::{broadcast_binary, broadcast_to};
pub use optim::Adam;
pub use scalar::Scalar;
pub use store::{Ctx, ParamStore, Trainable};
