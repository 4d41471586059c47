//! Desk-scale training stack for interval-averaged velocity fields.
//!
//! The crate implements a small reverse-mode tape plus forward-mode duals over
//! a shared [`autodiff::Value`] abstraction, an MLP velocity network with
//! sinusoidal time embeddings, the interval-averaged-velocity training
//! objective (with JVP and finite-difference derivative estimators, a
//! dispersive feature spread term, and a directional cosine term), one-step
//! and few-step samplers, synthetic task generators, a deterministic trainer,
//! and an evaluation harness (MMD, gradient-starvation sweeps, memory
//! comparisons, ablation tables).
//!
//! Everything is `f64` and bit-reproducible for a fixed seed, including under
//! the `parallel` feature: parallel regions are structured so the floating
//! point reduction order never depends on thread count.

pub mod autodiff;
pub mod config;
pub mod eval;
pub mod network;
pub mod objective;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod tasks;
pub mod trainer;

pub use autodiff::{AdError, Dual, DualTensor, Gradients, Tape, TapeMode, Tensor, Value, Var};
