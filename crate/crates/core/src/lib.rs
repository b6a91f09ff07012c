//! Per-user next-event modelling for authentication logs.
//!
//! The pipeline: ingest raw auth CSV logs, dictionarize each user's event
//! triples into dense indices, cut sliding windows, train a small stacked-LSTM
//! next-event predictor per user, then rank low-confidence mispredictions as
//! anomaly candidates and score them against ground truth.

pub mod dataset;
pub mod detect;
pub mod encode;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod nn;
pub mod numerics;
pub mod synth;
pub mod train;

pub use error::Error;

/// Stable 64-bit mixer used everywhere a derived seed is needed (per-user RNG
/// streams, split priorities, per-window dropout masks). Must never change:
/// persisted artifacts depend on it.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a stream tag.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag))
}
