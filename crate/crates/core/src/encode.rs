//! Dictionarizing: mapping each unique event triple (user, source computer,
//! destination computer) to a dense integer index, plus the encoded
//! per-user sequence and its on-disk formats.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::AuthEvent;

/// One unique behavior: the same triple at different times is the same key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventKey {
    pub user: String,
    pub src: String,
    pub dst: String,
}

impl std::fmt::Display for EventKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.user, self.src, self.dst)
    }
}

impl EventKey {
    pub fn of(event: &AuthEvent) -> Self {
        Self {
            user: event.user.clone(),
            src: event.src.clone(),
            dst: event.dst.clone(),
        }
    }
}

/// Bijection between event keys and indices 0..vocabulary_size, with
/// per-index occurrence counts. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventDictionary {
    index_of: HashMap<EventKey, usize>,
    key_of: Vec<EventKey>,
    frequency: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DictEntry {
    index: usize,
    user: String,
    src: String,
    dst: String,
    frequency: u64,
}

impl EventDictionary {
    pub fn vocabulary_size(&self) -> usize {
        self.key_of.len()
    }

    pub fn index_of(&self, key: &EventKey) -> Option<usize> {
        self.index_of.get(key).copied()
    }

    pub fn key_of(&self, index: usize) -> Option<&EventKey> {
        self.key_of.get(index)
    }

    pub fn frequency(&self, index: usize) -> u64 {
        self.frequency.get(index).copied().unwrap_or(0)
    }

    pub fn total_events(&self) -> u64 {
        self.frequency.iter().sum()
    }

    /// Canonical JSON: an array of entries sorted by index.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let entries: Vec<DictEntry> = self
            .key_of
            .iter()
            .enumerate()
            .map(|(index, key)| DictEntry {
                index,
                user: key.user.clone(),
                src: key.src.clone(),
                dst: key.dst.clone(),
                frequency: self.frequency[index],
            })
            .collect();
        let mut bytes = serde_json::to_vec_pretty(&entries).expect("serializable");
        bytes.push(b'\n');
        bytes
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_json_bytes())?;
        Ok(())
    }

    pub fn read_from(r: impl std::io::Read) -> Result<Self> {
        let entries: Vec<DictEntry> = serde_json::from_reader(r)?;
        let mut dict = EventDictionary::default();
        for (i, e) in entries.iter().enumerate() {
            if e.index != i {
                return Err(Error::MalformedFile {
                    path: "<dictionary>".into(),
                    reason: format!("entry {} has index {}", i, e.index),
                });
            }
            let key = EventKey {
                user: e.user.clone(),
                src: e.src.clone(),
                dst: e.dst.clone(),
            };
            dict.index_of.insert(key.clone(), i);
            dict.key_of.push(key);
            dict.frequency.push(e.frequency);
        }
        Ok(dict)
    }

    /// SHA-256 of the canonical JSON; pairs a model with the dictionary it
    /// was trained against.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_bytes()))
    }
}

/// A per-user sequence of event indices with carried-through labels and
/// timestamps (all three the same length).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub user: String,
    pub indices: Vec<usize>,
    pub labels: Vec<bool>,
    pub timestamps: Vec<DateTime<Utc>>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// CSV rows `iso8601_timestamp,index,is_red_team`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        for ((ts, idx), label) in self.timestamps.iter().zip(&self.indices).zip(&self.labels) {
            writeln!(
                w,
                "{},{},{}",
                ts.to_rfc3339_opts(SecondsFormat::Secs, true),
                idx,
                label
            )?;
        }
        Ok(())
    }

    pub fn read_csv(user: &str, r: impl BufRead) -> Result<Self> {
        let mut seq = EncodedSequence {
            user: user.to_string(),
            indices: Vec::new(),
            labels: Vec::new(),
            timestamps: Vec::new(),
        };
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            let bad = |reason: &str| Error::MalformedFile {
                path: format!("<encoded {user}>"),
                reason: format!("line {}: {}", lineno + 1, reason),
            };
            let ts = parts.next().ok_or_else(|| bad("missing timestamp"))?;
            let idx = parts.next().ok_or_else(|| bad("missing index"))?;
            let label = parts.next().ok_or_else(|| bad("missing label"))?;
            let ts = DateTime::parse_from_rfc3339(ts)
                .map_err(|e| bad(&format!("bad timestamp: {e}")))?
                .with_timezone(&Utc);
            seq.timestamps.push(ts);
            seq.indices
                .push(idx.parse().map_err(|_| bad("bad index"))?);
            seq.labels
                .push(label.parse().map_err(|_| bad("bad label"))?);
        }
        Ok(seq)
    }
}

/// Builds the dictionary over one user's full event stream: indices are
/// assigned in order of first appearance, repeats increment the frequency.
pub fn build_dictionary(events: &[AuthEvent]) -> EventDictionary {
    let mut dict = EventDictionary::default();
    for event in events {
        let key = EventKey::of(event);
        match dict.index_of.get(&key) {
            Some(&idx) => dict.frequency[idx] += 1,
            None => {
                let idx = dict.key_of.len();
                dict.index_of.insert(key.clone(), idx);
                dict.key_of.push(key);
                dict.frequency.push(1);
            }
        }
    }
    dict
}

/// Encodes events against an existing dictionary, carrying labels and
/// timestamps through unchanged. Unknown keys are an error (the dictionary
/// and the data do not belong together).
pub fn encode_sequence(events: &[AuthEvent], dict: &EventDictionary) -> Result<EncodedSequence> {
    let user = events.first().map(|e| e.user.clone()).unwrap_or_default();
    let mut seq = EncodedSequence {
        user,
        indices: Vec::with_capacity(events.len()),
        labels: Vec::with_capacity(events.len()),
        timestamps: Vec::with_capacity(events.len()),
    };
    for event in events {
        let key = EventKey::of(event);
        let idx = dict
            .index_of(&key)
            .ok_or_else(|| Error::UnknownEvent {
                key: key.to_string(),
            })?;
        seq.indices.push(idx);
        seq.labels.push(event.is_red_team);
        seq.timestamps.push(event.timestamp);
    }
    Ok(seq)
}

/// The two dictionary statistics reported per user: vocabulary size and the
/// highest event frequency.
pub fn vocab_report(dict: &EventDictionary) -> (usize, u64) {
    (
        dict.vocabulary_size(),
        dict.frequency.iter().copied().max().unwrap_or(0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn event(user: &str, src: &str, dst: &str, sec: i64) -> AuthEvent {
        AuthEvent {
            timestamp: Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap()
                + chrono::Duration::seconds(sec),
            user: user.into(),
            src: src.into(),
            dst: dst.into(),
            is_red_team: false,
        }
    }

    #[test]
    fn build_dictionary_first_appearance_order() {
        // Five events where #2 and #5 repeat the same triple.
        let events = vec![
            event("U5080", "C23", "C24", 0),
            event("U5080", "C1", "C2", 1),
            event("U5080", "C9", "C9", 2),
            event("U5080", "C7", "C8", 3),
            event("U5080", "C1", "C2", 4),
        ];
        let dict = build_dictionary(&events);
        assert_eq!(dict.vocabulary_size(), 4);
        let repeated = EventKey {
            user: "U5080".into(),
            src: "C1".into(),
            dst: "C2".into(),
        };
        let idx = dict.index_of(&repeated).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(dict.frequency(idx), 2);
    }

    #[test]
    fn build_dictionary_single_event_repeated() {
        let events: Vec<AuthEvent> = (0..19).map(|s| event("U1", "C3", "C4", s)).collect();
        let dict = build_dictionary(&events);
        assert_eq!(dict.vocabulary_size(), 1);
        assert_eq!(dict.frequency(0), 19);
        assert_eq!(vocab_report(&dict), (1, 19));
    }

    #[test]
    fn empty_dictionary() {
        let dict = build_dictionary(&[]);
        assert_eq!(dict.vocabulary_size(), 0);
        assert_eq!(vocab_report(&dict), (0, 0));
    }

    #[test]
    fn encode_sequence_preserves_order() {
        let a = event("U1", "C1", "C2", 0);
        let b = event("U1", "C3", "C4", 1);
        let events = vec![a.clone(), b.clone(), a.clone()];
        let dict = build_dictionary(&events);
        let seq = encode_sequence(&events, &dict).unwrap();
        assert_eq!(seq.indices, vec![0, 1, 0]);
        assert_eq!(seq.labels, vec![false, false, false]);
        assert_eq!(seq.timestamps.len(), 3);
    }

    #[test]
    fn encode_sequence_empty() {
        let dict = build_dictionary(&[]);
        let seq = encode_sequence(&[], &dict).unwrap();
        assert!(seq.is_empty());
    }

    #[test]
    fn encode_unknown_key_names_the_event() {
        let known = vec![event("U1", "C1", "C2", 0)];
        let dict = build_dictionary(&known);
        let err = encode_sequence(&[event("U1", "C9", "C9", 5)], &dict).unwrap_err();
        assert!(err.to_string().contains("(U1, C9, C9)"), "{err}");
    }

    #[test]
    fn dictionary_roundtrip_and_checksum() {
        let events = vec![
            event("U2", "C5", "C6", 0),
            event("U2", "C5", "C7", 1),
            event("U2", "C5", "C6", 2),
        ];
        let dict = build_dictionary(&events);
        let mut buf = Vec::new();
        dict.write_to(&mut buf).unwrap();
        let back = EventDictionary::read_from(&buf[..]).unwrap();
        assert_eq!(dict, back);
        assert_eq!(dict.checksum(), back.checksum());

        let other = build_dictionary(&[event("U2", "C5", "C6", 0)]);
        assert_ne!(dict.checksum(), other.checksum());
    }

    #[test]
    fn encoded_csv_roundtrip() {
        let events = vec![event("U3", "C1", "C2", 0), event("U3", "C2", "C1", 61)];
        let dict = build_dictionary(&events);
        let mut seq = encode_sequence(&events, &dict).unwrap();
        seq.labels[1] = true;
        let mut buf = Vec::new();
        seq.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("2018-01-01T00:00:00Z,0,false\n"), "{text}");
        let back = EncodedSequence::read_csv("U3", &buf[..]).unwrap();
        assert_eq!(seq, back);
    }

    proptest! {
        /// key_of(index_of(k)) is the identity on every key, and frequencies
        /// count occurrences in any sequence encoded from the same events.
        #[test]
        fn decode_encode_identity(picks in proptest::collection::vec(0usize..8, 1..100)) {
            let pool: Vec<AuthEvent> = (0..8)
                .map(|i| event("U9", &format!("C{i}"), &format!("C{}", i + 10), 0))
                .collect();
            let events: Vec<AuthEvent> = picks
                .iter()
                .enumerate()
                .map(|(t, &p)| {
                    let mut e = pool[p].clone();
                    e.timestamp = e.timestamp + chrono::Duration::seconds(t as i64);
                    e
                })
                .collect();
            let dict = build_dictionary(&events);
            for idx in 0..dict.vocabulary_size() {
                let key = dict.key_of(idx).unwrap();
                prop_assert_eq!(dict.index_of(key), Some(idx));
            }
            let seq = encode_sequence(&events, &dict).unwrap();
            prop_assert_eq!(seq.len(), events.len());
            for idx in 0..dict.vocabulary_size() {
                let count = seq.indices.iter().filter(|&&i| i == idx).count() as u64;
                prop_assert_eq!(dict.frequency(idx), count);
            }
            prop_assert_eq!(dict.total_events(), events.len() as u64);

            // Determinism: rebuilding from the same events gives the same dictionary.
            prop_assert_eq!(build_dictionary(&events), dict);
        }
    }
}
