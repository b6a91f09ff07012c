//! Per-user training: epoch/batch scheduling over stratified windows,
//! metrics capture, and model persistence.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_windows, make_windows, stratified_split, SplitDataset, WindowBatch};
use crate::derive_seed;
use crate::encode::{EncodedSequence, EventDictionary};
use crate::error::{Error, Result};
use crate::nn::{self, LstmModel};

const TAG_TRAIN: u64 = 0x5452_4149;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub window_size: usize,
    pub hidden_size: usize,
    pub dropout_rate: f64,
    pub clip_norm: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 5000,
            learning_rate: 0.1,
            window_size: 30,
            hidden_size: 64,
            dropout_rate: 0.2,
            clip_norm: 5.0,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("window_size", self.window_size as f64),
            ("hidden_size", self.hidden_size as f64),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter("dropout_rate must be in [0,1)".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidParameter("train_fraction must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub batch_index: usize,
    pub cost: f64,
    pub batch_accuracy: f64,
    pub elapsed_ms: u64,
}

/// The per-batch trace plus totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
    pub total_duration_ms: u64,
}

impl TrainingTrace {
    pub fn last_batch_accuracy(&self) -> f64 {
        self.records.last().map(|r| r.batch_accuracy).unwrap_or(0.0)
    }

    /// Mean cost over the records of one epoch.
    pub fn epoch_mean_cost(&self, epoch: usize) -> f64 {
        let costs: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.cost)
            .collect();
        if costs.is_empty() {
            return f64::NAN;
        }
        costs.iter().sum::<f64>() / costs.len() as f64
    }

    /// CSV rows `epoch,batch,cost,accuracy,elapsed_ms`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,batch,cost,accuracy,elapsed_ms")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.epoch, r.batch_index, r.cost, r.batch_accuracy, r.elapsed_ms
            )?;
        }
        Ok(())
    }
}

/// Fraction of windows whose argmax probability equals the target, in infer
/// mode (dropout off) so the reported metric is stable.
pub fn batch_accuracy(model: &LstmModel, batch: &WindowBatch) -> Result<f64> {
    let m = batch.batch_count();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    let hits: usize = (0..m)
        .into_par_iter()
        .map(|b| {
            let indices = batch.hot_indices(b).expect("training batches are one-hot");
            let probs = nn::forward_infer_probs(model, &indices).expect("shapes match");
            let pred = argmax(&probs);
            usize::from(pred == batch.targets()[b])
        })
        .sum();
    Ok(hits as f64 / m as f64)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Trains one user's model: windows the sequence, stratified-splits it,
/// then runs `epochs` passes over the training windows (reshuffled per
/// epoch, fixed batch order) of forward / cost / backward / SGD step.
/// Red-team labels are never read by any training computation; they exist
/// only in the split strata, which are label-inversion invariant.
/// When `persist_to` is given the model is saved there at the end.
pub fn train_user(
    seq: &EncodedSequence,
    dict: &EventDictionary,
    config: &TrainingConfig,
    persist_to: Option<&Path>,
) -> Result<(LstmModel, SplitDataset, TrainingTrace)> {
    config.validate()?;
    let windows = make_windows(seq, config.window_size);
    if windows.len() < 2 {
        return Err(Error::TooFewEvents {
            user: seq.user.clone(),
            events: seq.len(),
            needed: config.window_size + 2,
        });
    }
    let split = stratified_split(windows, config.train_fraction, config.seed);
    if split.train.is_empty() {
        return Err(Error::TooFewEvents {
            user: seq.user.clone(),
            events: seq.len(),
            needed: config.window_size + 2,
        });
    }

    let mut model = nn::init_model(
        dict.vocabulary_size(),
        config.hidden_size,
        config.window_size,
        config.dropout_rate,
        config.seed,
    )?;

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, TAG_TRAIN));
    let mut trace = TrainingTrace::default();
    let started = Instant::now();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<_> = order.iter().map(|&i| split.train[i].clone()).collect();

        for (batch_index, batch) in
            batch_windows(shuffled, config.batch_size, dict.vocabulary_size()).enumerate()
        {
            let nonce: u64 = rng.gen();
            let (cost, grads) = nn::batch_gradients(&model, &batch, nonce)?;
            nn::sgd_step(&mut model, &grads, config.learning_rate, config.clip_norm)?;
            let accuracy = batch_accuracy(&model, &batch)?;
            trace.records.push(TraceRecord {
                epoch,
                batch_index,
                cost,
                batch_accuracy: accuracy,
                elapsed_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
    trace.total_duration_ms = started.elapsed().as_millis() as u64;

    if let Some(path) = persist_to {
        save_model(&model, &dict.checksum(), path)?;
    }
    Ok((model, split, trace))
}

/// On-disk model file: architecture metadata, the dictionary checksum the
/// model was trained against, and every parameter array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub schema: u32,
    pub dict_checksum: String,
    pub model: LstmModel,
}

impl SavedModel {
    /// Errors unless this model was trained against `dict`.
    pub fn verify_dictionary(&self, dict: &EventDictionary) -> Result<()> {
        let found = dict.checksum();
        if found != self.dict_checksum {
            return Err(Error::ChecksumMismatch {
                expected: self.dict_checksum.clone(),
                found,
            });
        }
        Ok(())
    }
}

const MODEL_SCHEMA: u32 = 1;

/// Atomically writes the model (temp file + rename), pairing it with the
/// dictionary checksum.
pub fn save_model(model: &LstmModel, dict_checksum: &str, path: &Path) -> Result<()> {
    let saved = SavedModel {
        schema: MODEL_SCHEMA,
        dict_checksum: dict_checksum.to_string(),
        model: model.clone(),
    };
    let mut bytes = serde_json::to_vec(&saved)?;
    bytes.push(b'\n');
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a model written by `save_model`. A corrupt or truncated file is a
/// parse error; no partial model is returned.
pub fn load_model(path: &Path) -> Result<SavedModel> {
    let bytes = std::fs::read(path)?;
    let saved: SavedModel = serde_json::from_slice(&bytes)?;
    if saved.schema != MODEL_SCHEMA {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            reason: format!("unsupported schema {}", saved.schema),
        });
    }
    Ok(saved)
}

/// Reads a trace CSV written by `TrainingTrace::write_csv`.
pub fn read_trace_csv(r: impl BufRead) -> Result<TrainingTrace> {
    let mut trace = TrainingTrace::default();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::MalformedFile {
                path: "<trace>".into(),
                reason: format!("line {}: expected 5 fields", lineno + 1),
            });
        }
        let bad = |what: &str| Error::MalformedFile {
            path: "<trace>".into(),
            reason: format!("line {}: bad {}", lineno + 1, what),
        };
        trace.records.push(TraceRecord {
            epoch: fields[0].parse().map_err(|_| bad("epoch"))?,
            batch_index: fields[1].parse().map_err(|_| bad("batch"))?,
            cost: fields[2].parse().map_err(|_| bad("cost"))?,
            batch_accuracy: fields[3].parse().map_err(|_| bad("accuracy"))?,
            elapsed_ms: fields[4].parse().map_err(|_| bad("elapsed_ms"))?,
        });
    }
    trace.total_duration_ms = trace.records.last().map(|r| r.elapsed_ms).unwrap_or(0);
    Ok(trace)
}

/// Builds the deterministic cyclic fixture used by the learnability checks:
/// `events` events cycling through `period` distinct indices.
pub fn cyclic_sequence(period: usize, events: usize) -> EncodedSequence {
    let base = crate::ingest::default_base_date();
    EncodedSequence {
        user: "UCYCLE".into(),
        indices: (0..events).map(|t| t % period).collect(),
        labels: vec![false; events],
        timestamps: (0..events)
            .map(|t| base + chrono::Duration::seconds(t as i64))
            .collect(),
    }
}

/// A dictionary fabricated to match an already-encoded sequence (test and
/// fixture plumbing: the indices are the vocabulary).
pub fn dictionary_for_indices(user: &str, indices: &[usize]) -> EventDictionary {
    use crate::ingest::AuthEvent;
    let base = crate::ingest::default_base_date();
    let events: Vec<AuthEvent> = indices
        .iter()
        .enumerate()
        .map(|(t, &i)| AuthEvent {
            timestamp: base + chrono::Duration::seconds(t as i64),
            user: user.to_string(),
            src: format!("C{i}"),
            dst: format!("C{}", i + 1000),
            is_red_team: false,
        })
        .collect();
    crate::encode::build_dictionary(&events)
}
