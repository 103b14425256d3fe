//! Sleep-stage annotations: EDF+ TAL records and `onset_sec,stage` CSV.

use super::StageLabel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub onset: f64,
    pub duration: Option<f64>,
    pub text: String,
}

/// Raw stage tokens we know how to map; anything else is `UnknownStage`.
///
/// Returns `Ok(None)` for tokens whose epochs must be dropped.
pub fn map_stage(token: &str) -> Result<Option<StageLabel>> {
    let t = token.trim();
    let lower = t.to_lowercase();
    let core = lower.strip_prefix("sleep stage").map(str::trim).unwrap_or(&lower);
    let label = match core {
        "w" | "wake" | "0" => Some(StageLabel::Wake),
        "1" | "n1" | "s1" => Some(StageLabel::N1),
        "2" | "n2" | "s2" => Some(StageLabel::N2),
        "3" | "4" | "n3" | "n4" | "s3" | "s4" => Some(StageLabel::N3),
        "r" | "rem" | "5" => Some(StageLabel::Rem),
        "m" | "?" | "movement" | "movement time" | "unknown" | "unscored" => None,
        _ => return Err(Error::UnknownStage(t.to_string())),
    };
    Ok(label)
}

fn is_stage_text(text: &str) -> bool {
    let lower = text.trim().to_lowercase();
    lower.starts_with("sleep stage") || lower.starts_with("movement")
}

/// Parses the time-stamped annotation lists of one or more EDF+ records.
pub fn parse_tal(bytes: &[u8]) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for tal in bytes.split(|&b| b == 0).filter(|t| !t.is_empty()) {
        let mut parts = tal.split(|&b| b == 0x14);
        let head = parts.next().unwrap_or_default();
        let head = String::from_utf8_lossy(head);
        let (onset, duration) = match head.split_once('\u{15}') {
            Some((o, d)) => (o, Some(d)),
            None => (head.as_ref(), None),
        };
        let onset: f64 = onset.trim().parse().map_err(|_| Error::HeaderField("tal_onset".into()))?;
        let duration = match duration {
            Some(d) => Some(d.trim().parse().map_err(|_| Error::HeaderField("tal_duration".into()))?),
            None => None,
        };
        for text in parts {
            if text.is_empty() {
                continue;
            }
            out.push(Annotation {
                onset,
                duration,
                text: String::from_utf8_lossy(text).into_owned(),
            });
        }
    }
    Ok(out)
}

/// Encodes annotations as one TAL block (inverse of [`parse_tal`]).
pub fn encode_tal(onset_of_record: f64, annotations: &[Annotation]) -> Vec<u8> {
    let mut out = format!("+{onset_of_record}\u{14}\u{14}\u{0}").into_bytes();
    for a in annotations {
        out.extend_from_slice(format!("+{}", a.onset).as_bytes());
        if let Some(d) = a.duration {
            out.extend_from_slice(format!("\u{15}{d}").as_bytes());
        }
        out.push(0x14);
        out.extend_from_slice(a.text.as_bytes());
        out.extend_from_slice(&[0x14, 0]);
    }
    out
}

/// Parses `onset_sec,stage` rows; a non-numeric first row is taken as a header.
pub fn parse_csv(text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (onset, stage) = line
            .split_once(',')
            .ok_or_else(|| Error::HeaderField(format!("csv line {}", i + 1)))?;
        let stage = stage.trim().trim_matches('"');
        match onset.trim().parse::<f64>() {
            Ok(onset) => out.push(Annotation {
                onset,
                duration: None,
                text: stage.to_string(),
            }),
            Err(_) if out.is_empty() && i == 0 => continue,
            Err(_) => return Err(Error::HeaderField(format!("csv line {}", i + 1))),
        }
    }
    Ok(out)
}

/// Assigns one raw stage token per epoch over `[0, span_sec)`.
///
/// Annotations without a duration last until the next stage onset (or the
/// span end). Where annotations overlap, the one with the latest onset wins.
/// Each epoch takes the label in force at its midpoint. Non-stage EDF+
/// events (anything not starting with "Sleep stage"/"Movement") are ignored
/// when `stages_only` is set.
pub fn stage_labels_per_epoch(
    annotations: &[Annotation],
    span_sec: f64,
    epoch_sec: f64,
    stages_only: bool,
) -> Result<Vec<String>> {
    let mut stages: Vec<&Annotation> = annotations
        .iter()
        .filter(|a| !stages_only || is_stage_text(&a.text))
        .collect();
    stages.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    let mut intervals: Vec<(f64, f64, &str)> = Vec::with_capacity(stages.len());
    for (i, a) in stages.iter().enumerate() {
        let end = match a.duration {
            Some(d) if d > 0.0 => a.onset + d,
            _ => stages[i + 1..]
                .iter()
                .find(|b| b.onset > a.onset)
                .map_or(span_sec, |b| b.onset),
        };
        intervals.push((a.onset, end, a.text.trim()));
    }
    let n = (span_sec / epoch_sec + 1e-9).floor() as usize;
    let mut labels = Vec::with_capacity(n);
    for e in 0..n {
        let mid = (e as f64 + 0.5) * epoch_sec;
        // latest onset among covering intervals
        let hit = intervals.iter().rev().find(|(s, t, _)| *s <= mid && mid < *t);
        match hit {
            Some((_, _, text)) => labels.push(text.to_string()),
            None => {
                let start = intervals
                    .iter()
                    .filter(|(_, t, _)| *t <= mid)
                    .map(|(_, t, _)| *t)
                    .fold(0.0, f64::max);
                let end = intervals
                    .iter()
                    .filter(|(s, _, _)| *s > mid)
                    .map(|(s, _, _)| *s)
                    .fold(span_sec, f64::min);
                return Err(Error::CoverageGap {
                    start_sec: start,
                    end_sec: end,
                });
            }
        }
    }
    Ok(labels)
}

/// Latest time covered by any stage annotation.
pub fn annotated_end(annotations: &[Annotation], stages_only: bool) -> Option<f64> {
    let stages: Vec<&Annotation> = annotations
        .iter()
        .filter(|a| !stages_only || is_stage_text(&a.text))
        .collect();
    stages.iter().filter_map(|a| a.duration.map(|d| a.onset + d)).reduce(f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_map_one_per_epoch() {
        let ann = parse_csv("onset_sec,stage\n0,W\n30,N1\n60,N2\n").unwrap();
        let labels = stage_labels_per_epoch(&ann, 90.0, 30.0, false).unwrap();
        assert_eq!(labels, ["W", "N1", "N2"]);
    }

    #[test]
    fn merges_and_drops() {
        assert_eq!(map_stage("N3").unwrap(), Some(StageLabel::N3));
        assert_eq!(map_stage("N4").unwrap(), Some(StageLabel::N3));
        assert_eq!(map_stage("Sleep stage 4").unwrap(), Some(StageLabel::N3));
        assert_eq!(map_stage("Sleep stage R").unwrap(), Some(StageLabel::Rem));
        for t in ["M", "?", "Movement", "Unknown", "Sleep stage ?", "Movement time"] {
            assert_eq!(map_stage(t).unwrap(), None, "{t}");
        }
        assert!(matches!(map_stage("N7"), Err(Error::UnknownStage(t)) if t == "N7"));
    }

    #[test]
    fn latest_onset_wins_on_overlap() {
        let ann = vec![
            Annotation {
                onset: 0.0,
                duration: Some(90.0),
                text: "W".into(),
            },
            Annotation {
                onset: 30.0,
                duration: Some(30.0),
                text: "N2".into(),
            },
        ];
        assert_eq!(stage_labels_per_epoch(&ann, 90.0, 30.0, false).unwrap(), ["W", "N2", "W"]);
    }

    #[test]
    fn gap_is_reported() {
        let ann = vec![
            Annotation {
                onset: 0.0,
                duration: Some(30.0),
                text: "W".into(),
            },
            Annotation {
                onset: 60.0,
                duration: Some(30.0),
                text: "N1".into(),
            },
        ];
        match stage_labels_per_epoch(&ann, 90.0, 30.0, false) {
            Err(Error::CoverageGap { start_sec, end_sec }) => assert_eq!((start_sec, end_sec), (30.0, 60.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tal_round_trip() {
        let ann = vec![
            Annotation {
                onset: 0.0,
                duration: Some(60.0),
                text: "Sleep stage W".into(),
            },
            Annotation {
                onset: 60.0,
                duration: Some(30.0),
                text: "Sleep stage 2".into(),
            },
        ];
        let bytes = encode_tal(0.0, &ann);
        let parsed = parse_tal(&bytes).unwrap();
        assert_eq!(parsed, ann);
        let labels = stage_labels_per_epoch(&parsed, 90.0, 30.0, true).unwrap();
        assert_eq!(labels, ["Sleep stage W", "Sleep stage W", "Sleep stage 2"]);
    }
}
