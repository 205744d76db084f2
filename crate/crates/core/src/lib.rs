//! Vector-gated geometric vector perceptrons (GVPs) and the equivariant
//! GVP-GNN for atomic point clouds.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command
//! line and the demonstrations live in the companion `gvp` crate.
#![no_std]
#![cfg_attr(feature = "parallel", allow(unused_extern_crates))]

extern crate alloc;
#[cfg(any(test, feature = "parallel"))]
extern crate std;

pub mod audit;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod graph;
pub mod gvp;
pub mod model;
pub mod svt;
pub mod tensor;
pub mod train;

pub use autodiff::{Grad, Gradients, Primitive, Tape, ValueId};
pub use svt::{Orthogonal3, ScalarChannels, SvTuple, VectorChannels};
pub use tensor::Tensor;
