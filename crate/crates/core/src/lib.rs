//! Non-autoregressive masked transformer toolkit for frames-to-tokens
//! transduction.
//!
//! * [`model`]: encoder with convolutional subsampling and a bidirectional
//!   masked decoder that emits every position's posterior in one pass.
//! * [`train`]: masked-LM (CMLM) and two-pass factorized (FMLM) objectives
//!   with an inverse-square-root warmup schedule.
//! * [`decode`]: iterative decoding engine (easy-first, mask-predict,
//!   commitment schedules such as left-to-right) with EOS length inference.
//! * [`synth`]: synthetic corpora that mimic speech recognition structure.
//! * [`eval`]: Levenshtein alignment, error rates, length buckets and
//!   decoder-pass benchmarking.

pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use vocab::{TokenId, Vocabulary};
