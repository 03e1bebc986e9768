//! Graph compiler and simulator for a parameterizable VLIW overlay
//! accelerator.
//!
//! The pipeline: parse a JSON graph ([`json`]), rewrite it onto the overlay's
//! convolution-centric execution model ([`passes`]), partition it into
//! per-subgraph programs, slice oversized tensors, schedule and allocate the
//! stream buffer, encode VLIW register writes into the 8-bit control ring
//! format, then either execute the byte stream functionally or estimate its
//! cycle cost. The [`interp`] module is the ground-truth oracle for all of it.
//!
//! Everything numeric is generic over the scalar type; [`Graph64`]/[`Tensor64`]
//! are the defaults used by the CLI, with `f32` aliases for memory-tight
//! work.

pub mod alloc;
pub mod arch;
pub mod compile;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod interp;
pub mod json;
pub mod partition;
pub mod slicing;
pub mod passes;
pub mod scalar;
pub mod schedule;
pub mod shape;
pub mod sim;
pub mod tensor;
pub mod vliw;

pub use error::{Error, Result};

pub type Graph64 = graph::Graph<f64>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Tensor32 = tensor::Tensor<f32>;
