//! A small CPU deep-learning engine for binary polyp segmentation with a
//! dual-parallel-encoder network.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). Training
//! runs in `f32`; the `f64` instantiation exists for finite-difference checks.
//! The aliases at the crate root name the two concrete instantiations.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod layers;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use net::{NetConfig, NetVariant, Network};
pub use ops::Mode;
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
