//! Early-exit binary neural networks for audio classification.
//!
//! A log-mel front-end feeds a binarized convolutional trunk with five exit
//! classifiers. At inference time a sample leaves at the first exit whose
//! prediction is confident enough, so easy inputs cost a fraction of the
//! full network.
//!
//! - [`tensor`]: bit-packed ±1 tensors and XNOR/popcount kernels
//! - [`frontend`]: log-mel features
//! - [`net`]: architectures, parameters and the inference pass
//! - [`train`]: joint multi-exit training and datasets
//! - [`runtime`]: early-exit inference
//! - [`eval`]: sweeps, per-class statistics and latency benchmarks
//! - [`io`]: model files and run configuration

pub mod error;
pub mod eval;
pub mod frontend;
pub mod io;
pub mod net;
pub mod par;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
