//! Desk-scale Hakka (Sixian) speech-recognition toolkit.
//!
//! The crate covers the full pipeline at toy size: corpus manifests and
//! statistics, MFCC + SSL feature fusion, a multistream TDNN-F acoustic model
//! trained with chain-based discriminative-autoencoder objectives (c/hc/pc)
//! over lattice-free MMI, 4-gram + recurrent-LM lattice rescoring, and
//! character/syllable error-rate scoring.
//!
//! Batch work (featurization, per-utterance gradients, scoring) fans out on a
//! rayon pool when the `parallel` feature is enabled (the default) and runs
//! sequentially otherwise; results are merged in input order either way, so
//! outputs are identical across thread counts.

pub mod exec;
pub mod numeric;
pub mod rng;
