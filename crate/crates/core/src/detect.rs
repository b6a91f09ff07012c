//! Scoring test windows, segmenting predictions into the four
//! probability/correctness quadrants, and writing the ranked anomaly-candidate
//! reports an analyst consumes.

use std::io::{BufRead, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::encode::{EncodedSequence, EventDictionary};
use crate::error::{Error, Result};
use crate::nn::{self, LstmModel};
use crate::train::argmax;

/// Per-window prediction outcome. `anomaly_score` is 1 minus the probability
/// the model assigned to the event that actually happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub window_position: usize,
    pub timestamp: DateTime<Utc>,
    pub predicted_index: usize,
    pub predicted_probability: f64,
    pub actual_index: usize,
    pub actual_probability: f64,
    pub correct: bool,
    pub anomaly_score: f64,
    pub is_red_team: bool,
}

/// Quadrant counts at a probability threshold plus the two ranked candidate
/// lists: the k lowest-confidence and k highest-confidence mispredictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantReport {
    pub threshold: f64,
    pub high_correct: usize,
    pub high_incorrect: usize,
    pub low_correct: usize,
    pub low_incorrect: usize,
    pub ranked_low_incorrect: Vec<PredictionRecord>,
    pub ranked_high_incorrect: Vec<PredictionRecord>,
}

impl QuadrantReport {
    pub fn total(&self) -> usize {
        self.high_correct + self.high_incorrect + self.low_correct + self.low_incorrect
    }
}

/// Scores every test window in order (infer mode).
pub fn predict_all(
    model: &LstmModel,
    test: &[Window],
    seq: &EncodedSequence,
) -> Result<Vec<PredictionRecord>> {
    for w in test {
        if w.inputs.len() != model.window_size {
            return Err(Error::DimensionMismatch {
                op: "predict_all",
                left: format!("model window_size {}", model.window_size),
                right: format!("window of {}", w.inputs.len()),
            });
        }
        if w.target >= model.vocabulary_size {
            return Err(Error::IndexOutOfRange {
                index: w.target,
                vocabulary_size: model.vocabulary_size,
            });
        }
    }
    test.par_iter()
        .map(|w| {
            let probs = nn::forward_infer_probs(model, &w.inputs)?;
            let predicted_index = argmax(&probs);
            let predicted_probability = probs[predicted_index];
            let actual_probability = probs[w.target];
            Ok(PredictionRecord {
                window_position: w.target_position,
                timestamp: seq.timestamps[w.target_position],
                predicted_index,
                predicted_probability,
                actual_index: w.target,
                actual_probability,
                correct: predicted_index == w.target,
                anomaly_score: 1.0 - actual_probability,
                is_red_team: w.target_label,
            })
        })
        .collect()
}

/// Splits records into high/low confidence x correct/incorrect at
/// `threshold` and ranks the incorrect ones: `ranked_low_incorrect`
/// ascending by the model's top-guess probability, `ranked_high_incorrect`
/// descending. Ties order by window position.
pub fn segment_quadrants(
    records: &[PredictionRecord],
    threshold: f64,
    k: usize,
) -> QuadrantReport {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must be in (0,1)");
    assert!(k >= 1, "k must be >= 1");

    let mut report = QuadrantReport {
        threshold,
        high_correct: 0,
        high_incorrect: 0,
        low_correct: 0,
        low_incorrect: 0,
        ranked_low_incorrect: Vec::new(),
        ranked_high_incorrect: Vec::new(),
    };
    let mut incorrect: Vec<&PredictionRecord> = Vec::new();
    for r in records {
        let high = r.predicted_probability >= threshold;
        match (high, r.correct) {
            (true, true) => report.high_correct += 1,
            (true, false) => report.high_incorrect += 1,
            (false, true) => report.low_correct += 1,
            (false, false) => report.low_incorrect += 1,
        }
        if !r.correct {
            incorrect.push(r);
        }
    }

    let key = |r: &PredictionRecord| (r.predicted_probability, r.window_position);
    incorrect.sort_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite probabilities"));
    report.ranked_low_incorrect = incorrect.iter().take(k).map(|r| (*r).clone()).collect();
    report.ranked_high_incorrect = {
        let mut desc: Vec<&PredictionRecord> = incorrect.clone();
        desc.sort_by(|a, b| {
            b.predicted_probability
                .partial_cmp(&a.predicted_probability)
                .expect("finite probabilities")
                .then(a.window_position.cmp(&b.window_position))
        });
        desc.into_iter().take(k).cloned().collect()
    };
    report
}

fn decode(dict: &EventDictionary, index: usize) -> String {
    dict.key_of(index)
        .map(|k| format!("{}|{}|{}", k.user, k.src, k.dst))
        .unwrap_or_else(|| format!("#{index}"))
}

/// Writes the ranked candidate lists as a CSV report with decoded event
/// triples. The ground-truth column is included only when labels were
/// loaded for this run.
pub fn write_report(
    report: &QuadrantReport,
    dict: &EventDictionary,
    include_ground_truth: bool,
    mut w: impl Write,
) -> Result<()> {
    write!(
        w,
        "list,rank,window_position,timestamp,predicted_event,predicted_prob,actual_event"
    )?;
    if include_ground_truth {
        write!(w, ",is_red_team")?;
    }
    writeln!(w)?;
    let mut emit = |name: &str, records: &[PredictionRecord]| -> Result<()> {
        for (rank, r) in records.iter().enumerate() {
            write!(
                w,
                "{},{},{},{},{},{},{}",
                name,
                rank + 1,
                r.window_position,
                r.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
                decode(dict, r.predicted_index),
                r.predicted_probability,
                decode(dict, r.actual_index),
            )?;
            if include_ground_truth {
                write!(w, ",{}", r.is_red_team)?;
            }
            writeln!(w)?;
        }
        Ok(())
    };
    emit("low_incorrect", &report.ranked_low_incorrect)?;
    emit("high_incorrect", &report.ranked_high_incorrect)?;
    Ok(())
}

/// Writes the full prediction set as CSV.
pub fn write_predictions_csv(records: &[PredictionRecord], mut w: impl Write) -> Result<()> {
    writeln!(
        w,
        "window_position,timestamp,predicted_index,predicted_prob,actual_index,actual_prob,anomaly_score,correct,is_red_team"
    )?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.window_position,
            r.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
            r.predicted_index,
            r.predicted_probability,
            r.actual_index,
            r.actual_probability,
            r.anomaly_score,
            r.correct,
            r.is_red_team
        )?;
    }
    Ok(())
}

/// Reads a predictions CSV written by `write_predictions_csv`.
pub fn read_predictions_csv(r: impl BufRead) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::MalformedFile {
                path: "<predictions>".into(),
                reason: format!("line {}: expected 9 fields", lineno + 1),
            });
        }
        let bad = |what: &str| Error::MalformedFile {
            path: "<predictions>".into(),
            reason: format!("line {}: bad {}", lineno + 1, what),
        };
        out.push(PredictionRecord {
            window_position: fields[0].parse().map_err(|_| bad("window_position"))?,
            timestamp: DateTime::parse_from_rfc3339(fields[1])
                .map_err(|_| bad("timestamp"))?
                .with_timezone(&Utc),
            predicted_index: fields[2].parse().map_err(|_| bad("predicted_index"))?,
            predicted_probability: fields[3].parse().map_err(|_| bad("predicted_prob"))?,
            actual_index: fields[4].parse().map_err(|_| bad("actual_index"))?,
            actual_probability: fields[5].parse().map_err(|_| bad("actual_prob"))?,
            anomaly_score: fields[6].parse().map_err(|_| bad("anomaly_score"))?,
            correct: fields[7].parse().map_err(|_| bad("correct"))?,
            is_red_team: fields[8].parse().map_err(|_| bad("is_red_team"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::default_base_date;

    fn record(pos: usize, p_pred: f64, correct: bool, red: bool) -> PredictionRecord {
        let actual = if correct { p_pred } else { p_pred / 2.0 };
        PredictionRecord {
            window_position: pos,
            timestamp: default_base_date() + chrono::Duration::seconds(pos as i64),
            predicted_index: 0,
            predicted_probability: p_pred,
            actual_index: if correct { 0 } else { 1 },
            actual_probability: actual,
            correct,
            anomaly_score: 1.0 - actual,
            is_red_team: red,
        }
    }

    #[test]
    fn quadrants_partition_every_record() {
        let records = vec![
            record(1, 0.9, true, false),  // high correct
            record(2, 0.9, false, true),  // high incorrect
            record(3, 0.1, true, false),  // low correct
            record(4, 0.1, false, false), // low incorrect
            record(5, 0.5, true, false),  // boundary: >= threshold is high
        ];
        let report = segment_quadrants(&records, 0.5, 10);
        assert_eq!(report.high_correct, 2);
        assert_eq!(report.high_incorrect, 1);
        assert_eq!(report.low_correct, 1);
        assert_eq!(report.low_incorrect, 1);
        assert_eq!(report.total(), records.len());
    }

    #[test]
    fn ranked_lists_order_and_truncate() {
        let records = vec![
            record(1, 0.40, false, false),
            record(2, 0.10, false, true),
            record(3, 0.80, false, false),
            record(4, 0.10, false, false), // tie with pos 2: position breaks it
            record(5, 0.95, true, false),
        ];
        let report = segment_quadrants(&records, 0.5, 3);
        let lows: Vec<usize> = report
            .ranked_low_incorrect
            .iter()
            .map(|r| r.window_position)
            .collect();
        assert_eq!(lows, vec![2, 4, 1]);
        let highs: Vec<usize> = report
            .ranked_high_incorrect
            .iter()
            .map(|r| r.window_position)
            .collect();
        assert_eq!(highs, vec![3, 1, 2]);

        let report2 = segment_quadrants(&records, 0.5, 2);
        assert_eq!(report2.ranked_low_incorrect.len(), 2);
    }

    #[test]
    fn report_csv_shape_and_ground_truth_column() {
        let dict = crate::train::dictionary_for_indices("U1", &[0, 1, 2]);
        let records: Vec<PredictionRecord> =
            (0..15).map(|i| record(i, 0.3, false, i == 3)).collect();
        let report = segment_quadrants(&records, 0.5, 10);

        let mut with = Vec::new();
        write_report(&report, &dict, true, &mut with).unwrap();
        let text = String::from_utf8(with).unwrap();
        assert!(text.lines().next().unwrap().ends_with(",is_red_team"));
        // header + 10 low + 10 high
        assert_eq!(text.lines().count(), 21);
        assert!(text.contains("U1|C0|C1000"));

        let mut without = Vec::new();
        write_report(&report, &dict, false, &mut without).unwrap();
        let text = String::from_utf8(without).unwrap();
        assert!(!text.contains("is_red_team"));

        let empty = segment_quadrants(&[], 0.5, 10);
        let mut buf = Vec::new();
        write_report(&empty, &dict, true, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }

    #[test]
    fn predictions_csv_roundtrip() {
        let records = vec![record(1, 0.9375, true, false), record(2, 0.1, false, true)];
        let mut buf = Vec::new();
        write_predictions_csv(&records, &mut buf).unwrap();
        let back = read_predictions_csv(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn predict_all_contracts() {
        use crate::dataset::{make_windows, stratified_split};
        use crate::train::{cyclic_sequence, dictionary_for_indices, train_user, TrainingConfig};

        let seq = cyclic_sequence(4, 400);
        let dict = dictionary_for_indices(&seq.user, &seq.indices);
        let config = TrainingConfig {
            epochs: 60,
            batch_size: 64,
            window_size: 8,
            hidden_size: 16,
            dropout_rate: 0.0,
            seed: 2,
            ..TrainingConfig::default()
        };
        let (model, split, _) = train_user(&seq, &dict, &config, None).unwrap();
        let records = predict_all(&model, &split.test, &seq).unwrap();
        assert_eq!(records.len(), split.test.len());

        for (r, w) in records.iter().zip(&split.test) {
            assert_eq!(r.window_position, w.target_position);
            assert!(r.predicted_probability >= r.actual_probability);
            assert!(r.correct == (r.predicted_index == r.actual_index));
            assert!((0.0..1.0).contains(&r.anomaly_score));
        }

        // The cyclic sequence is fully learnable: everything is predicted
        // correctly with anomaly scores near zero.
        let accuracy =
            records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64;
        assert!(accuracy > 0.99, "accuracy {accuracy}");
        let mean_score: f64 =
            records.iter().map(|r| r.anomaly_score).sum::<f64>() / records.len() as f64;
        assert!(mean_score < 0.05, "mean anomaly score {mean_score}");

        // Window/model mismatch errors.
        let other = make_windows(&cyclic_sequence(4, 40), 5);
        let bad = stratified_split(other, 0.8, 0);
        assert!(predict_all(&model, &bad.test, &seq).is_err());
    }
}
