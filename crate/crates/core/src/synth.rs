//! Synthetic authentication-log generator: per-user first-order Markov
//! chains over event triples, with rare red-team sessions spliced in as
//! ground truth. Output is byte-reproducible per seed and parses through
//! the ingest module unchanged.
//!
//! Anomalies are injected as short sessions (2-4 consecutive replaced
//! events) drawn from a pool of triples the normal process never emits.
//! Sessions mirror how attacker activity shows up in real logs and give the
//! low-confidence ranking something to find: from the second event of a
//! session onwards the model's recent context is already contaminated.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};

const TAG_USER_STREAM: u64 = 0x5359_4e54;

/// Average red-team session length (sessions are uniform 2..=4 events), so
/// sessions start at rate anomaly_rate / SESSION_MEAN_LEN and the expected
/// share of red events stays at anomaly_rate.
const SESSION_MEAN_LEN: f64 = 3.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub users: usize,
    pub events_per_user: usize,
    pub vocab_per_user: usize,
    /// Peakedness of each state's successor distribution: successor k gets
    /// weight concentration^-k. 1.0 is uniform; 8.0 is strongly peaked.
    pub transition_concentration: f64,
    /// Expected fraction of events replaced by red-team activity.
    pub anomaly_rate: f64,
    /// Size of the per-user pool of anomalous (never normal) triples.
    pub anomaly_vocab: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 1,
            events_per_user: 20_000,
            vocab_per_user: 50,
            transition_concentration: 8.0,
            anomaly_rate: 0.002,
            anomaly_vocab: 25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_per_user < 2 {
            return Err(Error::InvalidParameter(format!(
                "vocab_per_user must be >= 2, got {}",
                self.vocab_per_user
            )));
        }
        if !(0.0..=0.1).contains(&self.anomaly_rate) {
            return Err(Error::InvalidParameter(format!(
                "anomaly_rate must be in [0, 0.1], got {}",
                self.anomaly_rate
            )));
        }
        if self.anomaly_rate > 0.0 && self.anomaly_vocab == 0 {
            return Err(Error::InvalidParameter(
                "anomaly_vocab must be > 0 when anomaly_rate > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthStats {
    pub auth_rows: u64,
    pub red_rows: u64,
}

struct Triple {
    src: String,
    dst: String,
}

/// Samples `count` distinct (src, dst) computer pairs from a bounded pool.
fn sample_triples(rng: &mut ChaCha12Rng, count: usize, computer_base: u64) -> Vec<Triple> {
    let pool = ((count as f64).sqrt().ceil() as u64 + 2).max(2);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.gen_range(0..pool);
        let b = rng.gen_range(0..pool);
        if seen.insert((a, b)) {
            out.push(Triple {
                src: format!("C{}", computer_base + a),
                dst: format!("C{}", computer_base + pool + b),
            });
        }
    }
    out
}

struct UserStream {
    user: String,
    rng: ChaCha12Rng,
    normal: Vec<Triple>,
    anomalous: Vec<Triple>,
    /// successors[state] = (state, cumulative weight) pairs.
    successors: Vec<Vec<(usize, f64)>>,
    state: usize,
    seconds: u64,
    remaining: usize,
    session_left: usize,
    session_start_prob: f64,
}

impl UserStream {
    fn new(spec: &SynthSpec, user_index: usize) -> Self {
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, TAG_USER_STREAM ^ user_index as u64));
        let vocab = spec.vocab_per_user;
        // Computer id ranges are disjoint per user and between the normal
        // and anomalous pools.
        let base = (user_index as u64 + 1) * 1_000_000;
        let normal = sample_triples(&mut rng, vocab, base);
        let anomalous = sample_triples(&mut rng, spec.anomaly_vocab.max(1), base + 500_000);

        let concentration = spec.transition_concentration.max(1.0);
        let out_degree = vocab.min(4).max(2);
        let successors = (0..vocab)
            .map(|_| {
                let mut targets: Vec<usize> = Vec::with_capacity(out_degree);
                while targets.len() < out_degree {
                    let t = rng.gen_range(0..vocab);
                    if !targets.contains(&t) {
                        targets.push(t);
                    }
                }
                let total: f64 = (0..out_degree)
                    .map(|k| concentration.powi(-(k as i32)))
                    .sum();
                let mut cum = 0.0;
                targets
                    .into_iter()
                    .enumerate()
                    .map(|(k, t)| {
                        cum += concentration.powi(-(k as i32)) / total;
                        (t, cum)
                    })
                    .collect()
            })
            .collect();

        let state = rng.gen_range(0..vocab);
        let seconds = rng.gen_range(0..3);
        let session_start_prob = if spec.anomaly_rate > 0.0 {
            spec.anomaly_rate / SESSION_MEAN_LEN
        } else {
            0.0
        };
        Self {
            user: format!("U{user_index}"),
            rng,
            normal,
            anomalous,
            successors,
            state,
            seconds,
            remaining: spec.events_per_user,
            session_left: 0,
            session_start_prob,
        }
    }

    /// Next row: (seconds, src, dst, is_red). The chain state advances under
    /// a red session too; the session only replaces what is emitted.
    fn next_row(&mut self) -> Option<(u64, &str, &str, bool)> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        self.seconds += self.rng.gen_range(1..=3);

        let roll: f64 = self.rng.gen();
        if self.session_left == 0
            && self.session_start_prob > 0.0
            && roll < self.session_start_prob
        {
            self.session_left = self.rng.gen_range(2..=4);
        }

        let cum = &self.successors[self.state];
        let draw: f64 = self.rng.gen();
        self.state = cum
            .iter()
            .find(|(_, c)| draw < *c)
            .map(|(t, _)| *t)
            .unwrap_or(cum.last().expect("non-empty successors").0);

        if self.session_left > 0 {
            self.session_left -= 1;
            let pick = self.rng.gen_range(0..self.anomalous.len());
            let t = &self.anomalous[pick];
            Some((self.seconds, &t.src, &t.dst, true))
        } else {
            let t = &self.normal[self.state];
            Some((self.seconds, &t.src, &t.dst, false))
        }
    }
}

/// Generates the auth log and the red-team ground truth as CSV streams.
/// Users are interleaved in global time order (ties broken by user index),
/// so the output is a valid time-sorted auth log. Memory is O(users).
pub fn generate(
    spec: &SynthSpec,
    mut auth_out: impl Write,
    mut red_out: impl Write,
) -> Result<SynthStats> {
    spec.validate()?;
    let mut streams: Vec<UserStream> = (0..spec.users)
        .map(|u| UserStream::new(spec, u))
        .collect();

    struct Pending {
        seconds: u64,
        src: String,
        dst: String,
        red: bool,
    }
    let mut pending: Vec<Option<Pending>> = streams
        .iter_mut()
        .map(|s| {
            s.next_row().map(|(sec, src, dst, red)| Pending {
                seconds: sec,
                src: src.to_string(),
                dst: dst.to_string(),
                red,
            })
        })
        .collect();

    let mut stats = SynthStats::default();
    loop {
        // Linear scan for the earliest pending row; user counts are small.
        let mut best: Option<(usize, u64)> = None;
        for (i, p) in pending.iter().enumerate() {
            if let Some(p) = p {
                if best.map(|(_, s)| p.seconds < s).unwrap_or(true) {
                    best = Some((i, p.seconds));
                }
            }
        }
        let Some((i, _)) = best else { break };
        let row = pending[i].take().expect("pending row");
        let user = &streams[i].user;
        writeln!(auth_out, "{},{},{},{}", row.seconds, user, row.src, row.dst)?;
        stats.auth_rows += 1;
        if row.red {
            writeln!(red_out, "{},{},{},{}", row.seconds, user, row.src, row.dst)?;
            stats.red_rows += 1;
        }
        pending[i] = streams[i].next_row().map(|(sec, src, dst, red)| Pending {
            seconds: sec,
            src: src.to_string(),
            dst: dst.to_string(),
            red,
        });
    }
    Ok(stats)
}

/// Writes `auth.csv` and `redteam.csv` under `dir`; returns their paths.
pub fn generate_to_files(spec: &SynthSpec, dir: &Path) -> Result<(PathBuf, PathBuf, SynthStats)> {
    std::fs::create_dir_all(dir)?;
    let auth_path = dir.join("auth.csv");
    let red_path = dir.join("redteam.csv");
    let mut auth = std::io::BufWriter::new(std::fs::File::create(&auth_path)?);
    let mut red = std::io::BufWriter::new(std::fs::File::create(&red_path)?);
    let stats = generate(spec, &mut auth, &mut red)?;
    auth.flush()?;
    red.flush()?;
    Ok((auth_path, red_path, stats))
}
