//! A self-contained laboratory for data-poisoning attacks on small
//! feed-forward neural networks.
//!
//! The crate bundles:
//!
//! - [`net`] — a minimal f64 feed-forward engine (forward, losses,
//!   backpropagation for weight and input gradients, SGD, training),
//! - [`data`] — IDX (MNIST container format) ingestion, a synthetic blob
//!   dataset, group sampling, and poison-seed selection,
//! - [`attack`] — the direct finite-difference poisoning attack and the
//!   autoencoder-based generative attack,
//! - [`detect`] — a loss-threshold streaming monitor with a
//!   validation-accuracy audit,
//! - [`harness`] — campaign configuration, timing, CSV/PGM/JSON outputs and
//!   method comparison tables.
//!
//! The data-parallel inner loops (per-element finite differences, per-sample
//! group evaluation) run on rayon when the default `parallel` feature is
//! enabled and fall back to sequential iteration otherwise. Reductions are
//! performed in fixed element order so both modes produce bit-identical
//! results.

pub mod attack;
pub mod data;
pub mod detect;
pub mod error;
pub mod harness;
pub mod net;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
