//! Order-agnostic autoregressive distribution estimation with an
//! interleaved-input Transformer.
//!
//! Each feature enters the model twice: once as its identity alone, once as
//! its identity together with its value. The two streams are interleaved and
//! processed under a lower-triangular attention mask, so a single network
//! learns every conditional `p(x_k | x_<k)` for any ordering of the features.

pub mod numerics;
pub mod data;
pub mod inference;
pub mod model;
pub mod seeds;
pub mod selftest;
pub mod training;
pub mod transformer;

pub use numerics::{Float, Tensor};
