//! Frame-by-frame decoding of a continuous utterance, probability tracks and
//! argmax-based boundary localization.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{format_seconds, PhonemeInventory, UtteranceAnnotation};
use crate::embedio::EmbeddingFile;
use crate::framing::{frame_start_s, frame_window, triplet_for_window, FramingError, Position, Triplet, TripletLabel};
use crate::metrics::{ordered_accuracy, MetricsError};
use crate::probe::{ProbeError, ProbeModel};

pub const TRACK_HEADER: &str = "frame_index,time_s,head,symbol,probability";

/// Rows per forward pass when decoding long files.
const DECODE_CHUNK: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("DimensionMismatch: model expects {expected}-dimensional frames, file has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("NotTripletModel: decoding needs a three-head probe, model has {0} head(s)")]
    NotTripletModel(usize),
    #[error("UnorderedInput: frame {found} follows frame {previous}")]
    UnorderedInput { previous: usize, found: usize },
    #[error(transparent)]
    Framing(#[from] FramingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

/// Decoded output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDecode {
    pub frame_index: usize,
    /// Window start in seconds.
    pub time_s: f64,
    /// Class probabilities per head, indexed by inventory id.
    pub probabilities: Triplet<Vec<f64>>,
    pub argmax: TripletLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Evidence {
    WithinFrame,
    BetweenFrames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEvent {
    pub time_s: f64,
    pub left: String,
    pub right: String,
    pub evidence: Evidence,
}

/// Runs the probe over every frame of `emb`, in order.
pub fn decode_frames(model: &ProbeModel, emb: &EmbeddingFile) -> Result<Vec<FrameDecode>, DecoderError> {
    if model.heads() != 3 {
        return Err(DecoderError::NotTripletModel(model.heads()));
    }
    if emb.dim() != model.config.input_dim {
        return Err(DecoderError::DimensionMismatch { expected: model.config.input_dim, found: emb.dim() });
    }
    let symbol = |c: u32| model.inventory.symbol(c as usize).expect("argmax within inventory").to_string();
    let mut out = Vec::with_capacity(emb.n_frames());
    let data = emb.data();
    for start in (0..emb.n_frames()).step_by(DECODE_CHUNK) {
        let end = (start + DECODE_CHUNK).min(emb.n_frames());
        let pred = model.predict(data.slice(ndarray::s![start..end, ..]))?;
        for i in 0..end - start {
            let head = |h: usize| pred.probabilities[h].row(i).to_vec();
            out.push(FrameDecode {
                frame_index: start + i,
                time_s: frame_start_s(start + i, emb.frame_ms),
                probabilities: Triplet::new(head(0), head(1), head(2)),
                argmax: Triplet::new(
                    symbol(pred.classes[[i, 0]]),
                    symbol(pred.classes[[i, 1]]),
                    symbol(pred.classes[[i, 2]]),
                ),
            });
        }
    }
    Ok(out)
}

fn check_order(decodes: &[FrameDecode]) -> Result<(), DecoderError> {
    for w in decodes.windows(2) {
        if w[1].frame_index <= w[0].frame_index {
            return Err(DecoderError::UnorderedInput { previous: w[0].frame_index, found: w[1].frame_index });
        }
    }
    Ok(())
}

fn same_pair(a: (&str, &str), b: (&str, &str)) -> bool {
    a == b || a == (b.1, b.0)
}

fn within_pair(d: &FrameDecode) -> Option<(&str, &str)> {
    (d.argmax.start != d.argmax.end).then_some((d.argmax.start.as_str(), d.argmax.end.as_str()))
}

/// Boundary events from argmax triplets.
///
/// A frame whose start and end labels differ yields a `WithinFrame` event at
/// its midpoint. Two adjacent frames whose facing labels differ yield a
/// `BetweenFrames` event at the shared edge, unless either frame already
/// reports a within-frame change between the same two labels.
pub fn locate_boundaries(decodes: &[FrameDecode], frame_ms: u32) -> Result<Vec<BoundaryEvent>, DecoderError> {
    check_order(decodes)?;
    let mut events = Vec::new();
    for (i, d) in decodes.iter().enumerate() {
        if let Some((left, right)) = within_pair(d) {
            let (s, e) = frame_window(d.frame_index, frame_ms);
            events.push(BoundaryEvent {
                time_s: s + (e - s) / 2.0,
                left: left.into(),
                right: right.into(),
                evidence: Evidence::WithinFrame,
            });
        }
        let Some(next) = decodes.get(i + 1) else { continue };
        if next.frame_index != d.frame_index + 1 || d.argmax.end == next.argmax.start {
            continue;
        }
        let change = (d.argmax.end.as_str(), next.argmax.start.as_str());
        let covered = [within_pair(d), within_pair(next)].into_iter().flatten().any(|p| same_pair(p, change));
        if !covered {
            events.push(BoundaryEvent {
                time_s: frame_start_s(next.frame_index, frame_ms),
                left: change.0.into(),
                right: change.1.into(),
                evidence: Evidence::BetweenFrames,
            });
        }
    }
    events.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
    Ok(events)
}

/// Ordered accuracy of the argmax triplets against triplets labelled from
/// `reference` over the same windows.
pub fn sequence_ordered_accuracy(
    decodes: &[FrameDecode],
    reference: &UtteranceAnnotation,
    frame_ms: u32,
) -> Result<f64, DecoderError> {
    let truths = decodes
        .iter()
        .map(|d| {
            let (s, e) = frame_window(d.frame_index, frame_ms);
            triplet_for_window(reference, s, e)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let preds: Vec<TripletLabel> = decodes.iter().map(|d| d.argmax.clone()).collect();
    Ok(ordered_accuracy(&preds, &truths)?)
}

/// Long-format probability track, optionally restricted to `targets`.
pub fn export_track(decodes: &[FrameDecode], inventory: &PhonemeInventory, targets: Option<&BTreeSet<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACK_HEADER.split(',')).expect("in-memory write");
    for d in decodes {
        for pos in Position::ALL {
            for (c, p) in d.probabilities.get(pos).iter().enumerate() {
                let symbol = inventory.symbol(c).unwrap_or("?");
                if targets.is_some_and(|t| !t.contains(symbol)) {
                    continue;
                }
                w.write_record([
                    d.frame_index.to_string(),
                    format_seconds(d.time_s),
                    pos.short().to_string(),
                    symbol.to_string(),
                    p.to_string(),
                ])
                .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn boundaries_json(events: &[BoundaryEvent]) -> String {
    serde_json::to_string_pretty(events).expect("events serialize")
}
