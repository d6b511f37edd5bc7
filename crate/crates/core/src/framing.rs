//! Frame alignment and triplet labelling.
//!
//! Frames tile an utterance from t = 0 in non-overlapping windows of
//! `frame_ms` milliseconds; frame `i` covers `[i·frame_ms, (i+1)·frame_ms)`.
//! Each frame is labelled with the phonemes present at its first instant,
//! its midpoint and its last instant.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{UtteranceAnnotation, TIME_SNAP};

/// Default frame duration of the upstream embedding extractor.
pub const DEFAULT_FRAME_MS: u32 = 20;

/// Offset subtracted from a window's end so that the last instant still lies
/// inside the half-open window.
pub const END_EPSILON_S: f64 = 1e-6;

/// Header line of the frame label dump.
pub const FRAME_LABEL_HEADER: &str = "utt_id\tframe_index\tstart\tcentre\tend\tkind";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FramingError {
    #[error("WindowOutOfRange: window [{start}, {end}) is not covered by utterance {utt_id}")]
    WindowOutOfRange { utt_id: String, start: f64, end: f64 },
    #[error("MalformedLine: line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
}

/// Window positions a label refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Start,
    Centre,
    End,
}

impl Position {
    pub const ALL: [Position; 3] = [Position::Start, Position::Centre, Position::End];

    pub fn index(self) -> usize {
        match self {
            Position::Start => 0,
            Position::Centre => 1,
            Position::End => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Position::Start => "s",
            Position::Centre => "c",
            Position::End => "e",
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Position::Start => "start",
            Position::Centre => "centre",
            Position::End => "end",
        })
    }
}

impl FromStr for Position {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "start" | "s" => Ok(Position::Start),
            "centre" | "center" | "c" => Ok(Position::Centre),
            "end" | "e" => Ok(Position::End),
            other => Err(format!("unknown position {other:?} (expected start, centre or end)")),
        }
    }
}

/// Labels at a window's start, centre and end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet<T> {
    pub start: T,
    pub centre: T,
    pub end: T,
}

/// A triplet of phoneme symbols.
pub type TripletLabel = Triplet<String>;

impl<T> Triplet<T> {
    pub fn new(start: T, centre: T, end: T) -> Self {
        Self { start, centre, end }
    }

    pub fn get(&self, position: Position) -> &T {
        match position {
            Position::Start => &self.start,
            Position::Centre => &self.centre,
            Position::End => &self.end,
        }
    }

    pub fn as_array(&self) -> [&T; 3] {
        [&self.start, &self.centre, &self.end]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Triplet<U> {
        Triplet { start: f(&self.start), centre: f(&self.centre), end: f(&self.end) }
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&T) -> Result<U, E>) -> Result<Triplet<U>, E> {
        Ok(Triplet { start: f(&self.start)?, centre: f(&self.centre)?, end: f(&self.end)? })
    }
}

impl<T: Clone> Triplet<T> {
    pub fn uniform(v: T) -> Self {
        Self { start: v.clone(), centre: v.clone(), end: v }
    }
}

impl TripletLabel {
    /// Parses the `a_p_p` notation.
    pub fn parse_underscored(s: &str) -> Option<Self> {
        let mut parts = s.split('_');
        let t = Triplet::new(parts.next()?, parts.next()?, parts.next()?);
        parts.next().is_none().then(|| t.map(|p| p.to_string()))
    }
}

impl<T: fmt::Display> fmt::Display for Triplet<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.start, self.centre, self.end)
    }
}

/// How many phoneme boundaries a frame contains, read off its triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Central,
    Border,
    TwoBorder,
}

impl FrameKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameKind::Central => "central",
            FrameKind::Border => "border",
            FrameKind::TwoBorder => "two_border",
        }
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FrameKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "central" => Ok(FrameKind::Central),
            "border" => Ok(FrameKind::Border),
            "two_border" | "two-border" => Ok(FrameKind::TwoBorder),
            other => Err(format!("unknown frame kind {other:?}")),
        }
    }
}

pub fn classify_triplet<T: PartialEq>(t: &Triplet<T>) -> FrameKind {
    if t.start == t.centre && t.centre == t.end {
        FrameKind::Central
    } else if t.centre != t.start && t.centre != t.end {
        FrameKind::TwoBorder
    } else {
        FrameKind::Border
    }
}

/// One labelled frame of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabelSet {
    pub utt_id: String,
    pub speaker_id: String,
    pub frame_index: usize,
    pub window: (f64, f64),
    pub triplet: TripletLabel,
    pub kind: FrameKind,
}

/// Start time in seconds of frame `index`.
pub fn frame_start_s(index: usize, frame_ms: u32) -> f64 {
    (index as f64 * frame_ms as f64) / 1000.0
}

pub fn frame_window(index: usize, frame_ms: u32) -> (f64, f64) {
    (frame_start_s(index, frame_ms), frame_start_s(index + 1, frame_ms))
}

/// Labels the window `[window_start, window_end)` from the annotation.
pub fn triplet_for_window(
    annotation: &UtteranceAnnotation,
    window_start: f64,
    window_end: f64,
) -> Result<TripletLabel, FramingError> {
    let out_of_range = || FramingError::WindowOutOfRange {
        utt_id: annotation.utt_id.clone(),
        start: window_start,
        end: window_end,
    };
    if !(window_end > window_start)
        || window_start < annotation.start() - TIME_SNAP
        || window_end > annotation.end() + TIME_SNAP
    {
        return Err(out_of_range());
    }
    let centre = window_start + (window_end - window_start) / 2.0;
    let at = |t: f64| annotation.label_at(t).map(str::to_string).ok_or_else(out_of_range);
    Ok(Triplet::new(at(window_start)?, at(centre)?, at(window_end - END_EPSILON_S)?))
}

/// Number of whole frames that fit before `end_s`.
pub fn whole_frames(end_s: f64, frame_ms: u32) -> usize {
    ((end_s + TIME_SNAP) * 1000.0 / frame_ms as f64).floor().max(0.0) as usize
}

/// Labels every whole frame of an utterance that the annotation covers.
/// A trailing partial window is dropped.
pub fn label_utterance_frames(annotation: &UtteranceAnnotation, frame_ms: u32) -> Vec<FrameLabelSet> {
    assert!(frame_ms > 0, "frame_ms must be positive");
    let n = whole_frames(annotation.end(), frame_ms);
    (0..n)
        .filter_map(|i| {
            let window = frame_window(i, frame_ms);
            let triplet = triplet_for_window(annotation, window.0, window.1).ok()?;
            Some(FrameLabelSet {
                utt_id: annotation.utt_id.clone(),
                speaker_id: annotation.speaker_id.clone(),
                frame_index: i,
                window,
                kind: classify_triplet(&triplet),
                triplet,
            })
        })
        .collect()
}

/// Labels the frames of many utterances, ordered by `(utt_id, frame_index)`.
pub fn label_corpus(annotations: &[UtteranceAnnotation], frame_ms: u32) -> Vec<FrameLabelSet> {
    let mut sorted: Vec<&UtteranceAnnotation> = annotations.iter().collect();
    sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    sorted.into_iter().flat_map(|a| label_utterance_frames(a, frame_ms)).collect()
}

/// Keeps frames whose three symbols are all targets, optionally dropping
/// two-border frames.
pub fn filter_frames(
    frames: &[FrameLabelSet],
    targets: &BTreeSet<String>,
    exclude_two_border: bool,
) -> Vec<FrameLabelSet> {
    frames
        .iter()
        .filter(|f| !(exclude_two_border && f.kind == FrameKind::TwoBorder))
        .filter(|f| f.triplet.as_array().iter().all(|s| targets.contains(s.as_str())))
        .cloned()
        .collect()
}

/// Writes the frame label dump (with header).
pub fn write_frame_labels(frames: &[FrameLabelSet]) -> String {
    let mut out = String::from(FRAME_LABEL_HEADER);
    out.push('\n');
    for f in frames {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            f.utt_id, f.frame_index, f.triplet.start, f.triplet.centre, f.triplet.end, f.kind
        ));
    }
    out
}

/// A row of the frame label dump; speaker and window are attached later
/// from the embedding manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabelRow {
    pub utt_id: String,
    pub frame_index: usize,
    pub triplet: TripletLabel,
    pub kind: FrameKind,
}

impl FrameLabelRow {
    pub fn into_label_set(self, speaker_id: impl Into<String>, frame_ms: u32) -> FrameLabelSet {
        FrameLabelSet {
            window: frame_window(self.frame_index, frame_ms),
            utt_id: self.utt_id,
            speaker_id: speaker_id.into(),
            frame_index: self.frame_index,
            triplet: self.triplet,
            kind: self.kind,
        }
    }
}

pub fn parse_frame_labels(text: &str) -> Result<Vec<FrameLabelRow>, FramingError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == FRAME_LABEL_HEADER => {}
        _ => {
            return Err(FramingError::MalformedLine {
                line: 1,
                reason: format!("expected header {FRAME_LABEL_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, raw) in lines {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| FramingError::MalformedLine { line: idx + 1, reason };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(bad(format!("expected 6 columns, found {}", cols.len())));
        }
        let frame_index = cols[1].parse().map_err(|_| bad(format!("bad frame index {:?}", cols[1])))?;
        let triplet = Triplet::new(cols[2].to_string(), cols[3].to_string(), cols[4].to_string());
        let kind: FrameKind = cols[5].parse().map_err(bad)?;
        if kind != classify_triplet(&triplet) {
            return Err(bad(format!("kind {kind} does not match triplet {triplet}")));
        }
        out.push(FrameLabelRow { utt_id: cols[0].to_string(), frame_index, triplet, kind });
    }
    Ok(out)
}
