//! Time-aligned phonetic segmentations and the phoneme inventory.
//!
//! Annotations are exchanged as a strict tab-separated file with the header
//! `utt_id\tspeaker_id\tstart_s\tend_s\tlabel`. Rows belonging to one
//! utterance must be adjacent and time-ordered, and the segments of an
//! utterance must tile its span without gaps or overlaps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Header line of the segmentation TSV.
pub const SEGMENTATION_HEADER: &str = "utt_id\tspeaker_id\tstart_s\tend_s\tlabel";

/// Default rare-label threshold for [`build_inventory`].
pub const DEFAULT_MIN_COUNT: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("MalformedLine: line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("NonContiguous: utterance {utt_id}: segment ending at {end} followed by segment starting at {next_start}")]
    NonContiguous { utt_id: String, end: f64, next_start: f64 },
    #[error("EmptyUtterance: utterance {0} has no segments")]
    EmptyUtterance(String),
    #[error("NonPositiveDuration: utterance {utt_id}: segment {label} [{start}, {end})")]
    NonPositiveDuration { utt_id: String, label: String, start: f64, end: f64 },
    #[error("EmptyInventory: no symbol occurs at least {min_count} times")]
    EmptyInventory { min_count: usize },
    #[error("InvalidMinCount: min_count must be at least 1")]
    InvalidMinCount,
}

/// One labelled phonetic segment, covering the half-open interval `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: String,
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(label: impl Into<String>, start: f64, end: f64) -> Self {
        Self { label: label.into(), start, end }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// The segmentation of a single recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceAnnotation {
    pub utt_id: String,
    pub speaker_id: String,
    pub segments: Vec<Segment>,
}

impl UtteranceAnnotation {
    /// Builds an annotation and checks the contiguity invariants.
    pub fn new(
        utt_id: impl Into<String>,
        speaker_id: impl Into<String>,
        segments: Vec<Segment>,
    ) -> Result<Self, AnnotationError> {
        let ann = Self { utt_id: utt_id.into(), speaker_id: speaker_id.into(), segments };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        if self.segments.is_empty() {
            return Err(AnnotationError::EmptyUtterance(self.utt_id.clone()));
        }
        for seg in &self.segments {
            // `!(a > b)` also rejects NaN endpoints.
            if !(seg.end > seg.start) || !seg.start.is_finite() || !seg.end.is_finite() || seg.start < 0.0
            {
                return Err(AnnotationError::NonPositiveDuration {
                    utt_id: self.utt_id.clone(),
                    label: seg.label.clone(),
                    start: seg.start,
                    end: seg.end,
                });
            }
        }
        for pair in self.segments.windows(2) {
            if pair[0].end != pair[1].start {
                return Err(AnnotationError::NonContiguous {
                    utt_id: self.utt_id.clone(),
                    end: pair[0].end,
                    next_start: pair[1].start,
                });
            }
        }
        Ok(())
    }

    pub fn start(&self) -> f64 {
        self.segments.first().map_or(0.0, |s| s.start)
    }

    pub fn end(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end)
    }

    pub fn duration(&self) -> f64 {
        self.end() - self.start()
    }

    /// Index of the segment containing `t`.
    ///
    /// Membership is half-open (`start <= t < end`). Instants within
    /// [`TIME_SNAP`] of a segment edge are treated as lying on that edge, so
    /// decimal times that do not round-trip through binary (0.04 + 0.01) still
    /// land on the side of the boundary they denote.
    pub fn segment_index_at(&self, t: f64) -> Option<usize> {
        let first = self.segments.first()?;
        if t < first.start - TIME_SNAP {
            return None;
        }
        // First segment whose (snapped) end lies strictly after t.
        let idx = self.segments.partition_point(|s| s.end - TIME_SNAP <= t);
        (idx < self.segments.len()).then_some(idx)
    }

    pub fn label_at(&self, t: f64) -> Option<&str> {
        self.segment_index_at(t).map(|i| self.segments[i].label.as_str())
    }

    /// Serializes this utterance as TSV data rows (no header).
    pub fn write_rows(&self, out: &mut String) {
        for seg in &self.segments {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                self.utt_id,
                self.speaker_id,
                format_seconds(seg.start),
                format_seconds(seg.end),
                seg.label
            );
        }
    }
}

/// Tolerance used when comparing instants against segment edges, in seconds.
pub const TIME_SNAP: f64 = 1e-9;

/// Formats seconds with at least six fractional digits while keeping the
/// exact binary value recoverable on re-parse.
pub fn format_seconds(t: f64) -> String {
    let fixed = format!("{t:.6}");
    if fixed.parse::<f64>().ok() == Some(t) {
        fixed
    } else {
        format!("{t}")
    }
}

/// Parses a segmentation TSV document into one annotation per utterance.
pub fn parse_segmentation(text: &str) -> Result<Vec<UtteranceAnnotation>, AnnotationError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r') == SEGMENTATION_HEADER => {}
        Some((_, other)) => {
            return Err(AnnotationError::MalformedLine {
                line: 1,
                reason: format!("expected header {SEGMENTATION_HEADER:?}, found {other:?}"),
            })
        }
        None => {
            return Err(AnnotationError::MalformedLine { line: 1, reason: "missing header".into() })
        }
    }

    let mut out: Vec<UtteranceAnnotation> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(AnnotationError::MalformedLine {
                line: line_no,
                reason: format!("expected 5 columns, found {}", cols.len()),
            });
        }
        let parse_time = |s: &str, what: &str| {
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| AnnotationError::MalformedLine {
                line: line_no,
                reason: format!("{what} {s:?} is not a finite number"),
            })
        };
        let start = parse_time(cols[2], "start_s")?;
        let end = parse_time(cols[3], "end_s")?;
        if cols[0].is_empty() || cols[4].is_empty() {
            return Err(AnnotationError::MalformedLine {
                line: line_no,
                reason: "empty utt_id or label".into(),
            });
        }
        let segment = Segment::new(cols[4], start, end);

        match out.last_mut() {
            Some(cur) if cur.utt_id == cols[0] => {
                if cur.speaker_id != cols[1] {
                    return Err(AnnotationError::MalformedLine {
                        line: line_no,
                        reason: format!("speaker changes within utterance {}", cur.utt_id),
                    });
                }
                cur.segments.push(segment);
            }
            _ => {
                if !seen.insert(cols[0].to_string()) {
                    return Err(AnnotationError::MalformedLine {
                        line: line_no,
                        reason: format!("rows of utterance {} are not adjacent", cols[0]),
                    });
                }
                out.push(UtteranceAnnotation {
                    utt_id: cols[0].to_string(),
                    speaker_id: cols[1].to_string(),
                    segments: vec![segment],
                });
            }
        }
    }
    for ann in &out {
        ann.validate()?;
    }
    Ok(out)
}

/// Serializes annotations (with header) in the segmentation TSV format.
pub fn write_segmentation(annotations: &[UtteranceAnnotation]) -> String {
    let mut out = String::new();
    out.push_str(SEGMENTATION_HEADER);
    out.push('\n');
    for ann in annotations {
        ann.write_rows(&mut out);
    }
    out
}

/// Retained phoneme symbols; a symbol's position is its class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    counts: Vec<u64>,
}

impl PhonemeInventory {
    /// Builds an inventory from explicit symbols, keeping the given order.
    /// Duplicate symbols are dropped after their first occurrence.
    pub fn from_symbols<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Self { symbols: Vec::new(), counts: Vec::new() };
        for s in symbols {
            let s = s.into();
            if !out.symbols.contains(&s) {
                out.symbols.push(s);
                out.counts.push(0);
            }
        }
        out
    }

    pub(crate) fn from_parts(symbols: Vec<String>, counts: Vec<u64>) -> Self {
        debug_assert_eq!(symbols.len(), counts.len());
        Self { symbols, counts }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.id_of(symbol).is_some()
    }

    /// The symbols of `self` that are also in `keep`, with their counts and
    /// in their original order.
    pub fn restricted_to(&self, keep: &BTreeSet<String>) -> Self {
        let (symbols, counts) = self
            .symbols
            .iter()
            .zip(&self.counts)
            .filter(|(s, _)| keep.contains(*s))
            .map(|(s, &c)| (s.clone(), c))
            .unzip();
        Self { symbols, counts }
    }
}

/// Counts segments per symbol and keeps those occurring at least `min_count`
/// times, sorted lexicographically.
pub fn build_inventory(
    annotations: &[UtteranceAnnotation],
    min_count: usize,
) -> Result<PhonemeInventory, AnnotationError> {
    if min_count == 0 {
        return Err(AnnotationError::InvalidMinCount);
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for seg in annotations.iter().flat_map(|a| &a.segments) {
        *counts.entry(seg.label.as_str()).or_default() += 1;
    }
    let (symbols, counts): (Vec<String>, Vec<u64>) = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count as u64)
        .map(|(s, c)| (s.to_string(), c))
        .unzip();
    if symbols.is_empty() {
        return Err(AnnotationError::EmptyInventory { min_count });
    }
    Ok(PhonemeInventory::from_parts(symbols, counts))
}
