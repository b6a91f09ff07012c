//! Sliding windows, one-hot tensor batches and the stratified train/test
//! split.

use serde::{Deserialize, Serialize};

use crate::encode::EncodedSequence;
use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::{derive_seed, mix64};

/// One many-to-one training example: the `window_size` events immediately
/// preceding the target, the target itself, and the target's red-team label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub inputs: Vec<usize>,
    pub target: usize,
    pub target_label: bool,
    /// Offset of the target event in the source sequence (>= window_size).
    pub target_position: usize,
}

/// A batch of windows materialized as one-hot data. The logical tensor shape
/// is `window_size x vocabulary_size x batch_count`; storage is row-major
/// `[window][step][vocab]` so each time-step slice is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    one_hot: Vec<f64>,
    window_size: usize,
    vocabulary_size: usize,
    targets: Vec<usize>,
    labels: Vec<bool>,
}

impl WindowBatch {
    pub fn empty(window_size: usize, vocabulary_size: usize) -> Self {
        Self {
            one_hot: Vec::new(),
            window_size,
            vocabulary_size,
            targets: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn batch_count(&self) -> usize {
        self.targets.len()
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary_size
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    /// Flat `window_size * vocabulary_size` one-hot slice of window `b`.
    pub fn window(&self, b: usize) -> &[f64] {
        let len = self.window_size * self.vocabulary_size;
        &self.one_hot[b * len..(b + 1) * len]
    }

    /// The `vocabulary_size` slice of window `b` at time step `t`.
    pub fn step_slice(&self, b: usize, t: usize) -> &[f64] {
        let len = self.window_size * self.vocabulary_size;
        let off = b * len + t * self.vocabulary_size;
        &self.one_hot[off..off + self.vocabulary_size]
    }

    /// Recovers the event indices of window `b`; `None` if any time-step
    /// slice is not exactly one-hot.
    pub fn hot_indices(&self, b: usize) -> Option<Vec<usize>> {
        (0..self.window_size)
            .map(|t| {
                let slice = self.step_slice(b, t);
                let mut hot = None;
                for (i, &v) in slice.iter().enumerate() {
                    if v == 1.0 {
                        if hot.is_some() {
                            return None;
                        }
                        hot = Some(i);
                    } else if v != 0.0 {
                        return None;
                    }
                }
                hot
            })
            .collect()
    }
}

/// Stratified 80/20-style partition of windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: Vec<Window>,
    pub test: Vec<Window>,
    pub seed: u64,
}

/// Stride-1 sliding windows: yields `len - window_size` windows, the first
/// `window_size` events are never targets. Sequences no longer than the
/// window produce no windows (logged; signals a user too small to train).
pub fn make_windows(seq: &EncodedSequence, window_size: usize) -> Vec<Window> {
    assert!(window_size >= 1, "window_size must be >= 1");
    let n = seq.indices.len();
    if n <= window_size {
        log::warn!(
            "user {}: {} events with window {} yields no windows",
            seq.user,
            n,
            window_size
        );
        return Vec::new();
    }
    (window_size..n)
        .map(|pos| Window {
            inputs: seq.indices[pos - window_size..pos].to_vec(),
            target: seq.indices[pos],
            target_label: seq.labels[pos],
            target_position: pos,
        })
        .collect()
}

/// One-hot vector: 1.0 at `index`, 0.0 elsewhere.
pub fn one_hot(index: usize, vocabulary_size: usize) -> Result<Vector> {
    if index >= vocabulary_size {
        return Err(Error::IndexOutOfRange {
            index,
            vocabulary_size,
        });
    }
    let mut data = vec![0.0; vocabulary_size];
    data[index] = 1.0;
    Ok(Vector::new(data).expect("finite"))
}

/// Priority used to shuffle windows inside a stratum. It depends only on the
/// seed and the window's position — never on the label — so inverting every
/// red-team flag renames the strata but selects the identical partition
/// (labels must not be able to influence training).
fn split_priority(seed: u64, position: usize) -> u64 {
    mix64(derive_seed(seed, 0x5350_4c49) ^ mix64(position as u64))
}

/// Stratified split: within each stratum (stratum = target label) the test
/// share is round((1-train_fraction)*|stratum|), selected by a seeded,
/// label-free shuffle. A stratum with fewer than 2 members goes entirely to
/// train (with a warning). Both partitions come back in sequence order.
pub fn stratified_split(windows: Vec<Window>, train_fraction: f64, seed: u64) -> SplitDataset {
    assert!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train_fraction must be in (0,1)"
    );
    let mut train = Vec::new();
    let mut test = Vec::new();

    for label in [false, true] {
        let mut stratum: Vec<Window> = windows
            .iter()
            .filter(|w| w.target_label == label)
            .cloned()
            .collect();
        if stratum.is_empty() {
            continue;
        }
        if stratum.len() < 2 {
            log::warn!(
                "stratum (red_team={}) has {} window(s); assigning all to train",
                label,
                stratum.len()
            );
            train.append(&mut stratum);
            continue;
        }
        let test_count = ((1.0 - train_fraction) * stratum.len() as f64).round() as usize;
        stratum.sort_by_key(|w| (split_priority(seed, w.target_position), w.target_position));
        for (i, w) in stratum.into_iter().enumerate() {
            if i < test_count {
                test.push(w);
            } else {
                train.push(w);
            }
        }
    }

    train.sort_by_key(|w| w.target_position);
    test.sort_by_key(|w| w.target_position);
    SplitDataset { train, test, seed }
}

/// Lazily batches windows into one-hot tensors: ceil(n/batch_size) batches,
/// the last possibly short. One-hot materialization happens here.
pub fn batch_windows(
    windows: Vec<Window>,
    batch_size: usize,
    vocabulary_size: usize,
) -> impl Iterator<Item = WindowBatch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let window_size = windows.first().map(|w| w.inputs.len()).unwrap_or(0);
    let mut remaining = windows;
    std::iter::from_fn(move || {
        if remaining.is_empty() {
            return None;
        }
        let take = remaining.len().min(batch_size);
        let chunk: Vec<Window> = remaining.drain(..take).collect();
        let per = window_size * vocabulary_size;
        let mut one_hot = vec![0.0; chunk.len() * per];
        let mut targets = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for (b, w) in chunk.iter().enumerate() {
            debug_assert_eq!(w.inputs.len(), window_size);
            for (t, &idx) in w.inputs.iter().enumerate() {
                assert!(idx < vocabulary_size, "index {idx} out of vocabulary");
                one_hot[b * per + t * vocabulary_size + idx] = 1.0;
            }
            targets.push(w.target);
            labels.push(w.target_label);
        }
        Some(WindowBatch {
            one_hot,
            window_size,
            vocabulary_size,
            targets,
            labels,
        })
    })
}

/// Number of batches `batch_windows` will yield.
pub fn batch_count(n_windows: usize, batch_size: usize) -> usize {
    n_windows.div_ceil(batch_size)
}
