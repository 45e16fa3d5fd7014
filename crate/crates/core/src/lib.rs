//! Sentence-pair concatenation as data augmentation for neural machine
//! translation, together with the machinery needed to take the method apart:
//! position-index shifting, segment-level attention masking, and
//! batch-composition control.
//!
//! The crate is a desk-scale experimentation toolkit. It contains:
//!
//! * [`corpus`] — parallel-corpus loading, BPE subword segmentation, and
//!   vocabulary handling;
//! * [`augment`] — consecutive/random concatenation and the position-shift
//!   variants, producing [`augment::TrainExample`]s with explicit per-token
//!   position indices and segment labels;
//! * [`batching`] — the chunked shuffle/sort/pack scheme for token-budgeted
//!   minibatches, plus the separate-stream (`sep-batch`) variant;
//! * [`model`] — a small encoder-decoder transformer (PreNorm, ScaleNorm,
//!   FixNorm, sinusoidal absolute positions) with manual backprop and
//!   segment-aware attention masks;
//! * [`training`] — label-smoothed cross-entropy, warmup/inverse-sqrt
//!   learning rates, Adam, and the seeded training loop;
//! * [`eval`] — greedy/beam decoding, tokenized corpus BLEU, and paired
//!   bootstrap significance;
//! * [`harness`] — named experiment conditions, toy datasets, and grid
//!   execution with CSV reports.

pub mod augment;
pub mod batching;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
