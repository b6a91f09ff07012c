//! Streaming ingestion of raw authentication logs: parse, cleanse, join
//! red-team ground truth, assign absolute timestamps and partition by user
//! with bounded memory.
//!
//! The canonical record is the 4-field form `seconds,user,src,dst`. The
//! official 9-field LANL rows are supported behind a flag that extracts
//! time / source user / source computer / destination computer and strips
//! `@DOM` suffixes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default date of the first possible record (seconds = 0).
pub fn default_base_date() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap()
}

/// Parser configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestConfig {
    pub base_date: DateTime<Utc>,
    /// Accept the official 9-field LANL format instead of the 4-field form.
    pub lanl_full: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            base_date: default_base_date(),
            lanl_full: false,
        }
    }
}

/// One parsed raw record: seconds since monitoring start plus the event
/// triple.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawRecord {
    pub seconds: u64,
    pub user: String,
    pub src: String,
    pub dst: String,
}

/// A cleansed record with an absolute timestamp and its ground-truth flag.
/// The flag is a label for evaluation only; nothing in training may read it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthEvent {
    pub timestamp: DateTime<Utc>,
    pub user: String,
    pub src: String,
    pub dst: String,
    pub is_red_team: bool,
}

/// Counters accumulated during one parse.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub total_rows: u64,
    pub dropped_rows: u64,
    pub users_seen: u64,
    pub red_team_rows: u64,
    pub per_user_counts: BTreeMap<String, u64>,
    /// Whether a ground-truth file was supplied for this run.
    pub red_team_provided: bool,
    /// Count of malformed lines in the ground-truth file.
    pub red_team_dropped: u64,
}

impl IngestStats {
    pub fn kept_rows(&self) -> u64 {
        self.total_rows - self.dropped_rows
    }
}

fn is_prefixed_id(s: &str, prefix: char) -> bool {
    let mut chars = s.chars();
    chars.next() == Some(prefix) && {
        let rest = chars.as_str();
        !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit())
    }
}

fn strip_domain(field: &str) -> &str {
    field.split('@').next().unwrap_or(field)
}

/// Parses one line into a record. `None` means the line is malformed and is
/// dropped (list-wise deletion).
fn parse_line(line: &str, lanl_full: bool) -> Option<RawRecord> {
    let line = line.trim_end_matches('\r');
    if line.is_empty() {
        return None;
    }
    let fields: Vec<&str> = line.split(',').collect();
    let (seconds, user, src, dst) = if lanl_full {
        if fields.len() != 9 {
            return None;
        }
        (fields[0], strip_domain(fields[1]), fields[3], fields[4])
    } else {
        if fields.len() != 4 {
            return None;
        }
        (fields[0], fields[1], fields[2], fields[3])
    };
    let seconds: u64 = seconds.parse().ok()?;
    if !is_prefixed_id(user, 'U') || !is_prefixed_id(src, 'C') || !is_prefixed_id(dst, 'C') {
        return None;
    }
    Some(RawRecord {
        seconds,
        user: user.to_string(),
        src: src.to_string(),
        dst: dst.to_string(),
    })
}

/// How many of the leading lines are inspected before deciding the input is
/// the wrong kind of file.
const FORMAT_PROBE_LINES: u64 = 1000;

/// Streaming parser over an auth log. Well-formed lines yield records;
/// malformed lines are counted and skipped. If more than half of the first
/// 1000 lines are malformed the stream aborts with a format error.
pub struct AuthParser<R: BufRead> {
    lines: std::io::Lines<R>,
    config: IngestConfig,
    stats: IngestStats,
    failed: bool,
}

impl<R: BufRead> AuthParser<R> {
    pub fn new(source: R, config: IngestConfig) -> Self {
        Self {
            lines: source.lines(),
            config,
            stats: IngestStats::default(),
            failed: false,
        }
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    pub fn into_stats(self) -> IngestStats {
        self.stats
    }
}

impl<R: BufRead> Iterator for AuthParser<R> {
    type Item = Result<RawRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next() {
                None => return None,
                Some(Err(e)) => {
                    self.failed = true;
                    return Some(Err(Error::Io(e)));
                }
                Some(Ok(line)) => line,
            };
            self.stats.total_rows += 1;
            let parsed = parse_line(&line, self.config.lanl_full);
            if parsed.is_none() {
                self.stats.dropped_rows += 1;
            }
            if self.stats.total_rows == FORMAT_PROBE_LINES
                && self.stats.dropped_rows * 2 > self.stats.total_rows
            {
                self.failed = true;
                return Some(Err(Error::Format {
                    malformed: self.stats.dropped_rows as usize,
                    checked: self.stats.total_rows as usize,
                }));
            }
            if let Some(record) = parsed {
                *self
                    .stats
                    .per_user_counts
                    .entry(record.user.clone())
                    .or_insert(0) += 1;
                self.stats.users_seen = self.stats.per_user_counts.len() as u64;
                return Some(Ok(record));
            }
        }
    }
}

/// Convenience wrapper: parse a whole stream into records + stats.
pub fn parse_auth_stream(
    source: impl BufRead,
    config: IngestConfig,
) -> Result<(Vec<RawRecord>, IngestStats)> {
    let mut parser = AuthParser::new(source, config);
    let mut records = Vec::new();
    for item in &mut parser {
        records.push(item?);
    }
    Ok((records, parser.into_stats()))
}

/// The set of ground-truth (red-team) rows, keyed by the exact 4-tuple.
#[derive(Debug, Clone, Default)]
pub struct RedTeamSet {
    set: HashSet<RawRecord>,
    pub dropped_lines: u64,
}

impl RedTeamSet {
    /// Loads the red-team file (same field order as the auth file; small
    /// enough to hold in memory). Malformed lines are dropped and counted.
    pub fn load(source: impl BufRead, lanl_full: bool) -> Result<Self> {
        let mut out = RedTeamSet::default();
        for line in source.lines() {
            let line = line?;
            if line.trim_end_matches('\r').is_empty() {
                continue;
            }
            match parse_line(&line, false).or_else(|| {
                // LANL red-team files are 4-field `time,user@dom,src,dst`.
                if lanl_full {
                    let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
                    if fields.len() == 4 {
                        parse_line(
                            &format!(
                                "{},{},{},{}",
                                fields[0],
                                strip_domain(fields[1]),
                                fields[2],
                                fields[3]
                            ),
                            false,
                        )
                    } else {
                        None
                    }
                } else {
                    None
                }
            }) {
                Some(rec) => {
                    out.set.insert(rec);
                }
                None => out.dropped_lines += 1,
            }
        }
        if out.dropped_lines > 0 {
            log::warn!("red-team file: dropped {} malformed lines", out.dropped_lines);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn contains(&self, record: &RawRecord) -> bool {
        self.set.contains(record)
    }
}

/// Flags each record iff its exact (seconds, user, src, dst) tuple appears in
/// the ground-truth set. Flags are labels only.
pub fn join_ground_truth<'a, I>(
    records: I,
    red: &'a RedTeamSet,
) -> impl Iterator<Item = (RawRecord, bool)> + 'a
where
    I: IntoIterator<Item = RawRecord> + 'a,
{
    records.into_iter().map(move |r| {
        let flag = red.contains(&r);
        (r, flag)
    })
}

/// timestamp = base_date + seconds. Pure.
pub fn assign_absolute_time(
    record: &RawRecord,
    base_date: DateTime<Utc>,
    is_red_team: bool,
) -> AuthEvent {
    AuthEvent {
        timestamp: base_date + Duration::seconds(record.seconds as i64),
        user: record.user.clone(),
        src: record.src.clone(),
        dst: record.dst.clone(),
        is_red_team,
    }
}

/// Per-bucket record counts (bucket width in seconds), non-empty buckets
/// only, in ascending order. An analyst aid for picking the base date.
pub fn volume_histogram(seconds: impl IntoIterator<Item = u64>, bucket: u64) -> Vec<(u64, u64)> {
    assert!(bucket > 0, "bucket must be > 0");
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for s in seconds {
        *counts.entry(s / bucket * bucket).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}

/// Groups events by user, each group stably sorted by timestamp (ties keep
/// input order). With a filter, only the requested users are materialized;
/// a requested user absent from the data maps to an empty sequence.
pub fn partition_by_user(
    events: impl IntoIterator<Item = AuthEvent>,
    users: Option<&HashSet<String>>,
) -> BTreeMap<String, Vec<AuthEvent>> {
    let mut map: BTreeMap<String, Vec<AuthEvent>> = BTreeMap::new();
    if let Some(filter) = users {
        for u in filter {
            map.insert(u.clone(), Vec::new());
        }
    }
    for event in events {
        match users {
            Some(filter) if !filter.contains(&event.user) => continue,
            _ => {}
        }
        map.entry(event.user.clone()).or_default().push(event);
    }
    for seq in map.values_mut() {
        seq.sort_by_key(|e| e.timestamp);
    }
    map
}

/// Writes events as `iso8601_timestamp,user,src,dst,is_red_team` rows.
pub fn write_events_csv(events: &[AuthEvent], mut w: impl Write) -> Result<()> {
    for e in events {
        writeln!(
            w,
            "{},{},{},{},{}",
            e.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
            e.user,
            e.src,
            e.dst,
            e.is_red_team
        )?;
    }
    Ok(())
}

/// Reads an events CSV written by `write_events_csv`.
pub fn read_events_csv(r: impl BufRead) -> Result<Vec<AuthEvent>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::MalformedFile {
            path: "<events>".into(),
            reason: format!("line {}: {}", lineno + 1, reason),
        };
        let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", fields.len())));
        }
        let ts = DateTime::parse_from_rfc3339(fields[0])
            .map_err(|e| bad(format!("bad timestamp: {e}")))?
            .with_timezone(&Utc);
        out.push(AuthEvent {
            timestamp: ts,
            user: fields[1].to_string(),
            src: fields[2].to_string(),
            dst: fields[3].to_string(),
            is_red_team: fields[4]
                .parse()
                .map_err(|_| bad("bad is_red_team flag".into()))?,
        });
    }
    Ok(out)
}

/// Maximum number of per-user output files kept open at once during a
/// streaming partition.
const MAX_OPEN_WRITERS: usize = 256;

/// Single-pass streaming ingest: parse, join ground truth, timestamp, and
/// append each record to `<user>.events.csv` under `out_dir`. Peak memory is
/// O(open writers + red-team set), independent of the input size. Input is
/// expected to be time-sorted (both the synthetic generator and the real
/// corpus are); any user whose rows arrive out of order is re-sorted with a
/// bounded per-user rewrite afterwards.
pub fn stream_ingest_to_dir(
    auth: impl BufRead,
    red: Option<&RedTeamSet>,
    config: IngestConfig,
    users: Option<&HashSet<String>>,
    out_dir: &Path,
) -> Result<IngestStats> {
    std::fs::create_dir_all(out_dir)?;
    let mut writers: HashMap<String, (BufWriter<File>, u64)> = HashMap::new();
    let mut open_order: Vec<String> = Vec::new();
    let mut last_seconds: HashMap<String, u64> = HashMap::new();
    let mut unsorted_users: HashSet<String> = HashSet::new();
    let mut red_rows = 0u64;

    let path_for = |user: &str| -> PathBuf { out_dir.join(format!("{user}.events.csv")) };

    let mut parser = AuthParser::new(auth, config.clone());
    for item in &mut parser {
        let record = item?;
        if let Some(filter) = users {
            if !filter.contains(&record.user) {
                continue;
            }
        }
        let flag = red.map(|r| r.contains(&record)).unwrap_or(false);
        if flag {
            red_rows += 1;
        }
        let event = assign_absolute_time(&record, config.base_date, flag);

        if let Some(&prev) = last_seconds.get(&record.user) {
            if record.seconds < prev {
                unsorted_users.insert(record.user.clone());
            }
        }
        last_seconds.insert(record.user.clone(), record.seconds);

        if !writers.contains_key(&record.user) {
            if writers.len() >= MAX_OPEN_WRITERS {
                // Evict the least recently opened writer; reopen in append
                // mode later if the user shows up again.
                let evict = open_order.remove(0);
                if let Some((mut w, _)) = writers.remove(&evict) {
                    w.flush()?;
                }
            }
            let file = File::options()
                .create(true)
                .append(true)
                .open(path_for(&record.user))?;
            writers.insert(record.user.clone(), (BufWriter::new(file), 0));
            open_order.push(record.user.clone());
        }
        let (w, count) = writers.get_mut(&record.user).unwrap();
        writeln!(
            w,
            "{},{},{},{},{}",
            event.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
            event.user,
            event.src,
            event.dst,
            event.is_red_team
        )?;
        *count += 1;
    }
    for (_, (mut w, _)) in writers.drain() {
        w.flush()?;
    }

    for user in unsorted_users {
        let path = path_for(&user);
        let mut events = read_events_csv(BufReader::new(File::open(&path)?))?;
        events.sort_by_key(|e| e.timestamp);
        let mut w = BufWriter::new(File::create(&path)?);
        write_events_csv(&events, &mut w)?;
        w.flush()?;
    }

    let mut stats = parser.into_stats();
    stats.red_team_rows = red_rows;
    stats.red_team_provided = red.is_some();
    stats.red_team_dropped = red.map(|r| r.dropped_lines).unwrap_or(0);
    if let Some(filter) = users {
        stats.per_user_counts.retain(|u, _| filter.contains(u));
        // An explicitly requested user with no events still gets an (empty)
        // file so downstream stages can report it.
        for u in filter {
            if !stats.per_user_counts.contains_key(u) {
                File::create(path_for(u))?;
            }
        }
    }
    Ok(stats)
}
