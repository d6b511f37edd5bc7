//! Embedding containers, dataset assembly and speaker-independent splits.
//!
//! An embedding file (`FEMB`) is little-endian:
//!
//! ```text
//! magic "FEMB" | version u16 = 1 | reserved u16 = 0 | dim u32 | n_frames u32
//! | frame_ms u32 | utt_id_len u16 | utt_id (UTF-8) | f32 data, row-major
//! ```

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{PhonemeInventory, UtteranceAnnotation};
use crate::framing::{FrameKind, FrameLabelSet, Triplet};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"FEMB";
pub const EMBEDDING_VERSION: u16 = 1;
pub const DATASET_MAGIC: &[u8; 4] = b"PDS1";

const FEMB_FIXED_HEADER: usize = 4 + 2 + 2 + 4 + 4 + 4 + 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("BadMagic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("TruncatedPayload: need {needed} bytes, found {found}")]
    TruncatedPayload { needed: usize, found: usize },
    #[error("TrailingBytes: {0} bytes after the declared payload")]
    TrailingBytes(usize),
    #[error("UnsupportedVersion: {0}")]
    UnsupportedVersion(u16),
    #[error("NonFiniteValue: element {index} is not finite")]
    NonFiniteValue { index: usize },
    #[error("InvalidHeader: {0}")]
    InvalidHeader(String),
    #[error("MissingUtterance: no embeddings for utterance {0}")]
    MissingUtterance(String),
    #[error("DuplicateUtterance: utterance {0} appears in more than one file")]
    DuplicateUtterance(String),
    #[error("FrameIndexOutOfRange: utterance {utt_id} frame {frame_index} (file has {n_frames} frames)")]
    FrameIndexOutOfRange { utt_id: String, frame_index: usize, n_frames: usize },
    #[error("UnknownSymbol: {0:?} is not in the phoneme inventory")]
    UnknownSymbol(String),
    #[error("FrameRateMismatch: {found} ms frames where {expected} ms were expected")]
    FrameRateMismatch { expected: u32, found: u32 },
    #[error("DimensionMismatch: {found}-dimensional embeddings where {expected} were expected")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("EmptySide: the {0} side of the split would be empty")]
    EmptySide(&'static str),
    #[error("UnknownSpeaker: {0} does not occur in the dataset")]
    UnknownSpeaker(String),
    #[error("Manifest: {0}")]
    Manifest(String),
}

/// Embeddings of one utterance: one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub utt_id: String,
    pub frame_ms: u32,
    data: Array2<f32>,
}

impl EmbeddingFile {
    pub fn new(utt_id: impl Into<String>, frame_ms: u32, data: Array2<f32>) -> Result<Self, EmbedError> {
        if data.ncols() == 0 {
            return Err(EmbedError::InvalidHeader("dim must be positive".into()));
        }
        if frame_ms == 0 {
            return Err(EmbedError::InvalidHeader("frame_ms must be positive".into()));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFiniteValue { index });
        }
        Ok(Self { utt_id: utt_id.into(), frame_ms, data: data.as_standard_layout().into_owned() })
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn frame(&self, i: usize) -> ArrayView1<'_, f32> {
        self.data.row(i)
    }
}

pub fn write_embeddings(file: &EmbeddingFile) -> Vec<u8> {
    let id = file.utt_id.as_bytes();
    let mut out = Vec::with_capacity(FEMB_FIXED_HEADER + id.len() + file.data.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(file.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(file.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&file.frame_ms.to_le_bytes());
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    for v in file.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbedError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            EmbedError::TruncatedPayload { needed: self.pos.saturating_add(n), found: self.bytes.len() },
        )?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, EmbedError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, EmbedError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_embeddings(bytes: &[u8]) -> Result<EmbeddingFile, EmbedError> {
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(EmbedError::BadMagic { expected: "FEMB".into() });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u16()?;
    if version != EMBEDDING_VERSION {
        return Err(EmbedError::UnsupportedVersion(version));
    }
    let _reserved = cur.u16()?;
    let dim = cur.u32()? as usize;
    let n_frames = cur.u32()? as usize;
    let frame_ms = cur.u32()?;
    let id_len = cur.u16()? as usize;
    let utt_id = std::str::from_utf8(cur.take(id_len)?)
        .map_err(|_| EmbedError::InvalidHeader("utt_id is not valid UTF-8".into()))?
        .to_string();
    let n_values = dim
        .checked_mul(n_frames)
        .ok_or_else(|| EmbedError::InvalidHeader("dim × n_frames overflows".into()))?;
    let payload = cur.take(n_values.checked_mul(4).ok_or_else(|| {
        EmbedError::InvalidHeader("payload size overflows".into())
    })?)?;
    if cur.pos != bytes.len() {
        return Err(EmbedError::TrailingBytes(bytes.len() - cur.pos));
    }
    let values: Vec<f32> =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let data = Array2::from_shape_vec((n_frames, dim), values).expect("shape checked above");
    EmbeddingFile::new(utt_id, frame_ms, data)
}

/// One entry of the embedding manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub utt_id: String,
    pub speaker_id: String,
}

pub fn parse_manifest(json: &str) -> Result<Vec<ManifestEntry>, EmbedError> {
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(json).map_err(|e| EmbedError::Manifest(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.utt_id.as_str()) {
            return Err(EmbedError::DuplicateUtterance(e.utt_id.clone()));
        }
    }
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = serde_json::to_string_pretty(entries).expect("manifest serializes");
    s.push('\n');
    s
}

/// Per-frame metadata of a [`ProbeDataset`] row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRow {
    pub utt_id: String,
    pub speaker_id: String,
    pub frame_index: usize,
    pub kind: FrameKind,
    pub label: Triplet<u32>,
}

/// Frame embeddings paired with class-id triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub inventory: PhonemeInventory,
    pub frame_ms: u32,
    features: Array2<f32>,
    rows: Vec<FrameRow>,
}

/// Per-segment metadata of a [`SegmentAveragedDataset`] row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub utt_id: String,
    pub speaker_id: String,
    pub segment_index: usize,
    pub label: u32,
}

/// One mean embedding per phoneme segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAveragedDataset {
    pub inventory: PhonemeInventory,
    pub frame_ms: u32,
    features: Array2<f32>,
    rows: Vec<SegmentRow>,
}

/// Common access to the two dataset flavours.
pub trait SpeakerDataset: Sized {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn speaker(&self, i: usize) -> &str;
    fn features(&self) -> ArrayView2<'_, f32>;
    /// Class-id targets, one column per head.
    fn targets(&self) -> Array2<u32>;
    fn inventory(&self) -> &PhonemeInventory;
    /// Rows at `indices`, in that order.
    fn select(&self, indices: &[usize]) -> Self;

    fn speakers(&self) -> BTreeSet<&str> {
        (0..self.len()).map(|i| self.speaker(i)).collect()
    }
}

impl ProbeDataset {
    pub fn new(
        inventory: PhonemeInventory,
        frame_ms: u32,
        features: Array2<f32>,
        rows: Vec<FrameRow>,
    ) -> Result<Self, EmbedError> {
        if features.nrows() != rows.len() {
            return Err(EmbedError::InvalidHeader(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                rows.len()
            )));
        }
        let k = inventory.len() as u32;
        if let Some(r) = rows.iter().find(|r| r.label.as_array().iter().any(|&&c| c >= k)) {
            return Err(EmbedError::UnknownSymbol(format!("class id in {}", r.label)));
        }
        Ok(Self { inventory, frame_ms, features: features.as_standard_layout().into_owned(), rows })
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn rows(&self) -> &[FrameRow] {
        &self.rows
    }

    pub fn labels(&self) -> Vec<Triplet<u32>> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn kinds(&self) -> Vec<FrameKind> {
        self.rows.iter().map(|r| r.kind).collect()
    }

    /// Same rows with features and labels unchanged but triplets reassigned
    /// by `perm` (row `i` gets the label of row `perm[i]`).
    pub fn with_permuted_labels(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.rows.len());
        let mut out = self.clone();
        for (i, &j) in perm.iter().enumerate() {
            out.rows[i].label = self.rows[j].label;
            out.rows[i].kind = self.rows[j].kind;
        }
        out
    }

    /// Keeps rows for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(&FrameRow) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.rows.len()).filter(|&i| keep(&self.rows[i])).collect();
        self.select(&idx)
    }
}

impl SpeakerDataset for ProbeDataset {
    fn len(&self) -> usize {
        self.rows.len()
    }
    fn speaker(&self, i: usize) -> &str {
        &self.rows[i].speaker_id
    }
    fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }
    fn targets(&self) -> Array2<u32> {
        let mut t = Array2::zeros((self.rows.len(), 3));
        for (i, r) in self.rows.iter().enumerate() {
            t[[i, 0]] = r.label.start;
            t[[i, 1]] = r.label.centre;
            t[[i, 2]] = r.label.end;
        }
        t
    }
    fn inventory(&self) -> &PhonemeInventory {
        &self.inventory
    }
    fn select(&self, indices: &[usize]) -> Self {
        Self {
            inventory: self.inventory.clone(),
            frame_ms: self.frame_ms,
            features: self.features.select(Axis(0), indices),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

impl SegmentAveragedDataset {
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn rows(&self) -> &[SegmentRow] {
        &self.rows
    }

    pub fn labels(&self) -> Vec<u32> {
        self.rows.iter().map(|r| r.label).collect()
    }
}

impl SpeakerDataset for SegmentAveragedDataset {
    fn len(&self) -> usize {
        self.rows.len()
    }
    fn speaker(&self, i: usize) -> &str {
        &self.rows[i].speaker_id
    }
    fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }
    fn targets(&self) -> Array2<u32> {
        Array2::from_shape_fn((self.rows.len(), 1), |(i, _)| self.rows[i].label)
    }
    fn inventory(&self) -> &PhonemeInventory {
        &self.inventory
    }
    fn select(&self, indices: &[usize]) -> Self {
        Self {
            inventory: self.inventory.clone(),
            frame_ms: self.frame_ms,
            features: self.features.select(Axis(0), indices),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

fn index_files(files: &[EmbeddingFile]) -> Result<(BTreeMap<&str, &EmbeddingFile>, u32, usize), EmbedError> {
    let mut by_id = BTreeMap::new();
    let frame_ms = files.first().map_or(crate::framing::DEFAULT_FRAME_MS, |f| f.frame_ms);
    let dim = files.first().map_or(0, EmbeddingFile::dim);
    for f in files {
        if f.frame_ms != frame_ms {
            return Err(EmbedError::FrameRateMismatch { expected: frame_ms, found: f.frame_ms });
        }
        if f.dim() != dim {
            return Err(EmbedError::DimensionMismatch { expected: dim, found: f.dim() });
        }
        if by_id.insert(f.utt_id.as_str(), f).is_some() {
            return Err(EmbedError::DuplicateUtterance(f.utt_id.clone()));
        }
    }
    Ok((by_id, frame_ms, dim))
}

/// Drops labelled frames past the end of their embedding file when the
/// overshoot is at most `tolerance` frames (extractors differ by one frame at
/// the edges). Larger overshoots are left for [`assemble_dataset`] to reject.
pub fn truncate_to_embeddings(
    frames: &[FrameLabelSet],
    files: &[EmbeddingFile],
    tolerance: usize,
) -> Vec<FrameLabelSet> {
    let lens: BTreeMap<&str, usize> = files.iter().map(|f| (f.utt_id.as_str(), f.n_frames())).collect();
    frames
        .iter()
        .filter(|f| match lens.get(f.utt_id.as_str()) {
            Some(&n) => f.frame_index < n || f.frame_index >= n + tolerance,
            None => true,
        })
        .cloned()
        .collect()
}

/// Pairs each labelled frame with its embedding row. Output rows are ordered
/// by `(utt_id, frame_index)`.
pub fn assemble_dataset(
    files: &[EmbeddingFile],
    frames: &[FrameLabelSet],
    inventory: &PhonemeInventory,
) -> Result<ProbeDataset, EmbedError> {
    let (by_id, frame_ms, dim) = index_files(files)?;
    let mut order: Vec<&FrameLabelSet> = frames.iter().collect();
    order.sort_by(|a, b| (a.utt_id.as_str(), a.frame_index).cmp(&(b.utt_id.as_str(), b.frame_index)));

    let mut features = Array2::<f32>::zeros((order.len(), dim));
    let mut rows = Vec::with_capacity(order.len());
    for (i, f) in order.into_iter().enumerate() {
        let file = by_id.get(f.utt_id.as_str()).ok_or_else(|| EmbedError::MissingUtterance(f.utt_id.clone()))?;
        let expected_window = crate::framing::frame_window(f.frame_index, frame_ms);
        if (f.window.1 - f.window.0 - (expected_window.1 - expected_window.0)).abs() > 1e-9 {
            return Err(EmbedError::FrameRateMismatch {
                expected: frame_ms,
                found: ((f.window.1 - f.window.0) * 1000.0).round() as u32,
            });
        }
        if f.frame_index >= file.n_frames() {
            return Err(EmbedError::FrameIndexOutOfRange {
                utt_id: f.utt_id.clone(),
                frame_index: f.frame_index,
                n_frames: file.n_frames(),
            });
        }
        let label = f.triplet.try_map(|s| {
            inventory.id_of(s).map(|id| id as u32).ok_or_else(|| EmbedError::UnknownSymbol(s.clone()))
        })?;
        features.row_mut(i).assign(&file.frame(f.frame_index));
        rows.push(FrameRow {
            utt_id: f.utt_id.clone(),
            speaker_id: f.speaker_id.clone(),
            frame_index: f.frame_index,
            kind: f.kind,
            label,
        });
    }
    ProbeDataset::new(inventory.clone(), frame_ms, features, rows)
}

/// Averages, for every segment whose label is in the inventory, the frames
/// whose window midpoint falls inside the segment. Segments that contain no
/// frame midpoint are skipped.
pub fn average_segments(
    files: &[EmbeddingFile],
    annotations: &[UtteranceAnnotation],
    inventory: &PhonemeInventory,
) -> Result<SegmentAveragedDataset, EmbedError> {
    let (by_id, frame_ms, dim) = index_files(files)?;
    let mut sorted: Vec<&UtteranceAnnotation> = annotations.iter().collect();
    sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));

    let mut means: Vec<f32> = Vec::new();
    let mut rows = Vec::new();
    for ann in sorted {
        let file = by_id.get(ann.utt_id.as_str()).ok_or_else(|| EmbedError::MissingUtterance(ann.utt_id.clone()))?;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); ann.segments.len()];
        for i in 0..file.n_frames() {
            let (s, e) = crate::framing::frame_window(i, frame_ms);
            if let Some(k) = ann.segment_index_at(s + (e - s) / 2.0) {
                members[k].push(i);
            }
        }
        for (k, (seg, idx)) in ann.segments.iter().zip(&members).enumerate() {
            let Some(label) = inventory.id_of(&seg.label) else { continue };
            if idx.is_empty() {
                continue;
            }
            let mut acc = vec![0f64; dim];
            for &i in idx {
                for (a, &v) in acc.iter_mut().zip(file.frame(i)) {
                    *a += v as f64;
                }
            }
            means.extend(acc.iter().map(|a| (a / idx.len() as f64) as f32));
            rows.push(SegmentRow {
                utt_id: ann.utt_id.clone(),
                speaker_id: ann.speaker_id.clone(),
                segment_index: k,
                label: label as u32,
            });
        }
    }
    let features = Array2::from_shape_vec((rows.len(), dim), means).expect("one mean per row");
    Ok(SegmentAveragedDataset { inventory: inventory.clone(), frame_ms, features, rows })
}

/// Partitions rows by speaker: rows of `train_speakers` on the left, the rest
/// on the right.
pub fn speaker_split<D: SpeakerDataset>(
    dataset: &D,
    train_speakers: &BTreeSet<String>,
) -> Result<(D, D), EmbedError> {
    let observed = dataset.speakers();
    if let Some(s) = train_speakers.iter().find(|s| !observed.contains(s.as_str())) {
        return Err(EmbedError::UnknownSpeaker(s.clone()));
    }
    let (train, test): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| train_speakers.contains(dataset.speaker(i)));
    if train.is_empty() {
        return Err(EmbedError::EmptySide("train"));
    }
    if test.is_empty() {
        return Err(EmbedError::EmptySide("test"));
    }
    Ok((dataset.select(&train), dataset.select(&test)))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DatasetRows {
    Triplet { rows: Vec<FrameRow> },
    Averaged { rows: Vec<SegmentRow> },
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    dim: usize,
    frame_ms: u32,
    inventory: PhonemeInventory,
    #[serde(flatten)]
    rows: DatasetRows,
}

/// A dataset as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum PackedDataset {
    Triplet(ProbeDataset),
    Averaged(SegmentAveragedDataset),
}

impl From<ProbeDataset> for PackedDataset {
    fn from(d: ProbeDataset) -> Self {
        PackedDataset::Triplet(d)
    }
}

impl From<SegmentAveragedDataset> for PackedDataset {
    fn from(d: SegmentAveragedDataset) -> Self {
        PackedDataset::Averaged(d)
    }
}

/// Serializes a dataset: `"PDS1" | u32 header_len | JSON header | f32 LE features`.
pub fn write_dataset(dataset: &PackedDataset) -> Vec<u8> {
    let (header, features) = match dataset {
        PackedDataset::Triplet(d) => (
            DatasetHeader {
                version: 1,
                dim: d.dim(),
                frame_ms: d.frame_ms,
                inventory: d.inventory.clone(),
                rows: DatasetRows::Triplet { rows: d.rows.clone() },
            },
            d.features.view(),
        ),
        PackedDataset::Averaged(d) => (
            DatasetHeader {
                version: 1,
                dim: d.dim(),
                frame_ms: d.frame_ms,
                inventory: d.inventory.clone(),
                rows: DatasetRows::Averaged { rows: d.rows.clone() },
            },
            d.features.view(),
        ),
    };
    let json = serde_json::to_vec(&header).expect("dataset header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + features.len() * 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_dataset(bytes: &[u8]) -> Result<PackedDataset, EmbedError> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(EmbedError::BadMagic { expected: "PDS1".into() });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let len = cur.u32()? as usize;
    let header: DatasetHeader = serde_json::from_slice(cur.take(len)?)
        .map_err(|e| EmbedError::InvalidHeader(e.to_string()))?;
    if header.version != 1 {
        return Err(EmbedError::UnsupportedVersion(header.version as u16));
    }
    let n = match &header.rows {
        DatasetRows::Triplet { rows } => rows.len(),
        DatasetRows::Averaged { rows } => rows.len(),
    };
    let payload = cur.take(n * header.dim * 4)?;
    if cur.pos != bytes.len() {
        return Err(EmbedError::TrailingBytes(bytes.len() - cur.pos));
    }
    let values: Vec<f32> =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(EmbedError::NonFiniteValue { index });
    }
    let features = Array2::from_shape_vec((n, header.dim), values).expect("sized above");
    Ok(match header.rows {
        DatasetRows::Triplet { rows } => {
            PackedDataset::Triplet(ProbeDataset::new(header.inventory, header.frame_ms, features, rows)?)
        }
        DatasetRows::Averaged { rows } => {
            if rows.iter().any(|r| r.label as usize >= header.inventory.len()) {
                return Err(EmbedError::UnknownSymbol("class id out of range".into()));
            }
            PackedDataset::Averaged(SegmentAveragedDataset {
                inventory: header.inventory,
                frame_ms: header.frame_ms,
                features,
                rows,
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::Segment;
    use crate::framing::{label_utterance_frames, TripletLabel};
    use proptest::prelude::*;

    fn matrix(rows: usize, cols: usize, seed: f32) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |(i, j)| seed + i as f32 * 10.0 + j as f32 * 0.25)
    }

    fn label(utt: &str, spk: &str, idx: usize, t: &str) -> FrameLabelSet {
        let triplet = TripletLabel::parse_underscored(t).unwrap();
        FrameLabelSet {
            utt_id: utt.into(),
            speaker_id: spk.into(),
            frame_index: idx,
            window: crate::framing::frame_window(idx, 20),
            kind: crate::framing::classify_triplet(&triplet),
            triplet,
        }
    }

    #[test]
    fn empty_file_is_valid() {
        let f = EmbeddingFile::new("u", 20, Array2::zeros((0, 4))).unwrap();
        let back = read_embeddings(&write_embeddings(&f)).unwrap();
        assert_eq!(back.dim(), 4);
        assert_eq!(back.n_frames(), 0);
    }

    #[test]
    fn header_layout() {
        let f = EmbeddingFile::new("ab", 20, matrix(1, 2, 1.0)).unwrap();
        let b = write_embeddings(&f);
        assert_eq!(&b[..4], b"FEMB");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &20u32.to_le_bytes());
        assert_eq!(&b[20..22], &2u16.to_le_bytes());
        assert_eq!(&b[22..24], b"ab");
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn read_errors() {
        let f = EmbeddingFile::new("u", 20, matrix(3, 8, 0.5)).unwrap();
        let b = write_embeddings(&f);
        assert!(matches!(read_embeddings(&b[..b.len() - 1]), Err(EmbedError::TruncatedPayload { .. })));
        assert!(matches!(read_embeddings(&b[..10]), Err(EmbedError::TruncatedPayload { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read_embeddings(&bad), Err(EmbedError::BadMagic { .. })));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert_eq!(read_embeddings(&v2), Err(EmbedError::UnsupportedVersion(2)));
        let mut nan = b.clone();
        let off = b.len() - 4;
        nan[off..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(read_embeddings(&nan), Err(EmbedError::NonFiniteValue { index: 23 }));
        let mut long = b.clone();
        long.push(0);
        assert_eq!(read_embeddings(&long), Err(EmbedError::TrailingBytes(1)));
    }

    #[test]
    fn manifest_round_trip() {
        let m = vec![
            ManifestEntry { file: "a.femb".into(), utt_id: "a".into(), speaker_id: "S1".into() },
            ManifestEntry { file: "b.femb".into(), utt_id: "b".into(), speaker_id: "S2".into() },
        ];
        assert_eq!(parse_manifest(&write_manifest(&m)).unwrap(), m);
        let dup = r#"[{"file":"x","utt_id":"a","speaker_id":"s"},{"file":"y","utt_id":"a","speaker_id":"s"}]"#;
        assert!(matches!(parse_manifest(dup), Err(EmbedError::DuplicateUtterance(_))));
    }

    #[test]
    fn assemble_in_frame_order() {
        let f = EmbeddingFile::new("u", 20, matrix(2, 3, 0.0)).unwrap();
        let inv = PhonemeInventory::from_symbols(["a", "p"]);
        let ds = assemble_dataset(
            std::slice::from_ref(&f),
            &[label("u", "A", 1, "a_p_p"), label("u", "A", 0, "a_a_a")],
            &inv,
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.features().row(0), f.frame(0));
        assert_eq!(ds.features().row(1), f.frame(1));
        assert_eq!(ds.labels(), vec![Triplet::new(0, 0, 0), Triplet::new(0, 1, 1)]);
        assert_eq!(ds.kinds(), vec![FrameKind::Central, FrameKind::Border]);
    }

    #[test]
    fn assemble_errors() {
        let f = EmbeddingFile::new("u", 20, matrix(3, 2, 0.0)).unwrap();
        let inv = PhonemeInventory::from_symbols(["a"]);
        let files = std::slice::from_ref(&f);
        assert!(matches!(
            assemble_dataset(files, &[label("u", "A", 5, "a_a_a")], &inv),
            Err(EmbedError::FrameIndexOutOfRange { frame_index: 5, n_frames: 3, .. })
        ));
        assert_eq!(
            assemble_dataset(files, &[label("u", "A", 0, "a_q_q")], &inv),
            Err(EmbedError::UnknownSymbol("q".into()))
        );
        assert_eq!(
            assemble_dataset(files, &[label("v", "A", 0, "a_a_a")], &inv),
            Err(EmbedError::MissingUtterance("v".into()))
        );
        let g = EmbeddingFile::new("v", 10, matrix(3, 2, 0.0)).unwrap();
        assert!(matches!(
            assemble_dataset(&[f.clone(), g], &[], &inv),
            Err(EmbedError::FrameRateMismatch { expected: 20, found: 10 })
        ));
    }

    #[test]
    fn truncation_tolerates_one_frame() {
        let f = EmbeddingFile::new("u", 20, matrix(3, 2, 0.0)).unwrap();
        let frames = vec![label("u", "A", 2, "a_a_a"), label("u", "A", 3, "a_a_a"), label("u", "A", 4, "a_a_a")];
        let kept = truncate_to_embeddings(&frames, std::slice::from_ref(&f), 1);
        let idx: Vec<usize> = kept.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, [2, 4]);
    }

    fn annotation(segs: &[(&str, f64, f64)]) -> UtteranceAnnotation {
        UtteranceAnnotation::new("u", "A", segs.iter().map(|&(l, s, e)| Segment::new(l, s, e)).collect())
            .unwrap()
    }

    #[test]
    fn averaging_rules() {
        // Frames of 20 ms: a covers frames 0-2, r is 5 ms with no midpoint, b a single frame.
        let ann = annotation(&[("a", 0.0, 0.06), ("r", 0.06, 0.065), ("b", 0.065, 0.08)]);
        let data = matrix(4, 3, 1.0);
        let f = EmbeddingFile::new("u", 20, data.clone()).unwrap();
        let inv = PhonemeInventory::from_symbols(["a", "b", "r"]);
        let ds = average_segments(&[f], &[ann], &inv).unwrap();
        assert_eq!(ds.len(), 2);
        let mean = (&data.row(0) + &data.row(1) + data.row(2)) / 3.0;
        for (a, b) in ds.features().row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(ds.features().row(1), data.row(3));
        assert_eq!(ds.labels(), vec![0, 1]);
        assert_eq!(ds.rows()[1].segment_index, 2);
    }

    #[test]
    fn averaging_skips_symbols_outside_inventory() {
        let ann = annotation(&[("a", 0.0, 0.04), ("b", 0.04, 0.08)]);
        let f = EmbeddingFile::new("u", 20, matrix(4, 2, 0.0)).unwrap();
        let ds = average_segments(&[f], &[ann], &PhonemeInventory::from_symbols(["b"])).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.rows()[0].segment_index, 1);
    }

    fn two_speaker_dataset() -> ProbeDataset {
        let files = vec![
            EmbeddingFile::new("u1", 20, matrix(2, 2, 0.0)).unwrap(),
            EmbeddingFile::new("u2", 20, matrix(3, 2, 100.0)).unwrap(),
        ];
        let frames = vec![
            label("u1", "A", 0, "a_a_a"),
            label("u1", "A", 1, "a_a_a"),
            label("u2", "B", 0, "a_a_a"),
            label("u2", "B", 1, "a_a_a"),
            label("u2", "B", 2, "a_a_a"),
        ];
        assemble_dataset(&files, &frames, &PhonemeInventory::from_symbols(["a"])).unwrap()
    }

    #[test]
    fn split_by_speaker() {
        let ds = two_speaker_dataset();
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let (train, test) = speaker_split(&ds, &set(&["A"])).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 3);
        assert!(train.rows().iter().all(|r| r.speaker_id == "A"));
        assert!(test.rows().iter().all(|r| r.speaker_id == "B"));
        assert_eq!(speaker_split(&ds, &set(&["A", "B"])).unwrap_err(), EmbedError::EmptySide("test"));
        assert_eq!(speaker_split(&ds, &set(&["C"])).unwrap_err(), EmbedError::UnknownSpeaker("C".into()));
        assert_eq!(speaker_split(&ds, &set(&[])).unwrap_err(), EmbedError::EmptySide("train"));
    }

    #[test]
    fn eight_speakers_four_four() {
        let speakers: Vec<String> = (0..8).map(|i| format!("S{i}")).collect();
        let files: Vec<EmbeddingFile> = speakers
            .iter()
            .map(|s| EmbeddingFile::new(format!("u{s}"), 20, matrix(2, 2, 0.0)).unwrap())
            .collect();
        let frames: Vec<FrameLabelSet> = speakers
            .iter()
            .flat_map(|s| (0..2).map(move |i| label(&format!("u{s}"), s, i, "a_a_a")))
            .collect();
        let ds = assemble_dataset(&files, &frames, &PhonemeInventory::from_symbols(["a"])).unwrap();
        let train_set: BTreeSet<String> = speakers[..4].iter().cloned().collect();
        let (train, test) = speaker_split(&ds, &train_set).unwrap();
        assert_eq!(train.speakers().len(), 4);
        assert_eq!(test.speakers().len(), 4);
        assert!(train.speakers().is_disjoint(&test.speakers()));
        assert_eq!(train.len() + test.len(), ds.len());
    }

    #[test]
    fn packed_dataset_round_trip() {
        let ds = two_speaker_dataset();
        let packed = PackedDataset::from(ds);
        let bytes = write_dataset(&packed);
        assert_eq!(read_dataset(&bytes).unwrap(), packed);
        assert!(matches!(read_dataset(&bytes[..bytes.len() - 2]), Err(EmbedError::TruncatedPayload { .. })));

        let ann = annotation(&[("a", 0.0, 0.04), ("b", 0.04, 0.08)]);
        let f = EmbeddingFile::new("u", 20, matrix(4, 2, 0.0)).unwrap();
        let avg = average_segments(&[f], &[ann], &PhonemeInventory::from_symbols(["a", "b"])).unwrap();
        let packed = PackedDataset::from(avg);
        assert_eq!(read_dataset(&write_dataset(&packed)).unwrap(), packed);
    }

    /// Groups frames by containing segment by scanning every segment for
    /// every frame.
    fn brute_force_average(file: &EmbeddingFile, ann: &UtteranceAnnotation) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::new();
        for (k, seg) in ann.segments.iter().enumerate() {
            let mut sum = vec![0f64; file.dim()];
            let mut n = 0;
            for i in 0..file.n_frames() {
                // Midpoint in integer microseconds to stay exact.
                let mid_us = i as i64 * 20_000 + 10_000;
                let (s_us, e_us) = ((seg.start * 1e6).round() as i64, (seg.end * 1e6).round() as i64);
                if s_us <= mid_us && mid_us < e_us {
                    n += 1;
                    for (acc, v) in sum.iter_mut().zip(file.frame(i)) {
                        *acc += *v as f64;
                    }
                }
            }
            if n > 0 {
                out.push((k, sum.into_iter().map(|x| x / n as f64).collect()));
            }
        }
        out
    }

    proptest! {
        #[test]
        fn container_round_trip(rows in 0usize..6, cols in 1usize..9, seed in any::<u64>()) {
            let data = Array2::from_shape_fn((rows, cols), |(i, j)| {
                let bits = (seed ^ ((i * 31 + j) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)) as u32;
                let v = f32::from_bits(bits);
                if v.is_finite() { v } else { bits as f32 }
            });
            let f = EmbeddingFile::new("utt-ü", 20, data).unwrap();
            let bytes = write_embeddings(&f);
            let back = read_embeddings(&bytes).unwrap();
            prop_assert_eq!(write_embeddings(&back), bytes);
            prop_assert!(back.data().iter().zip(f.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn split_preserves_rows(mask in prop::collection::vec(any::<bool>(), 8)) {
            let speakers: Vec<String> = (0..8).map(|i| format!("S{i}")).collect();
            let files: Vec<EmbeddingFile> = (0..8)
                .map(|i| EmbeddingFile::new(format!("u{i}"), 20, matrix(i % 3 + 1, 2, i as f32)).unwrap())
                .collect();
            let frames: Vec<FrameLabelSet> = (0..8)
                .flat_map(|i| (0..(i % 3 + 1)).map(move |k| (i, k)))
                .map(|(i, k)| label(&format!("u{i}"), &speakers[i], k, "a_a_a"))
                .collect();
            let ds = assemble_dataset(&files, &frames, &PhonemeInventory::from_symbols(["a"])).unwrap();
            let train: BTreeSet<String> =
                speakers.iter().zip(&mask).filter(|(_, &m)| m).map(|(s, _)| s.clone()).collect();
            match speaker_split(&ds, &train) {
                Ok((a, b)) => {
                    prop_assert!(a.speakers().is_disjoint(&b.speakers()));
                    let mut all: Vec<FrameRow> = a.rows().iter().chain(b.rows()).cloned().collect();
                    let mut orig = ds.rows().to_vec();
                    all.sort_by(|x, y| (&x.utt_id, x.frame_index).cmp(&(&y.utt_id, y.frame_index)));
                    orig.sort_by(|x, y| (&x.utt_id, x.frame_index).cmp(&(&y.utt_id, y.frame_index)));
                    prop_assert_eq!(all, orig);
                }
                Err(e) => prop_assert!(matches!(e, EmbedError::EmptySide(_))),
            }
        }

        #[test]
        fn averaging_matches_brute_force(durs in prop::collection::vec(1u32..30, 1..12)) {
            // Durations in 5 ms units so segment edges are exact in microseconds.
            let mut t = 0u32;
            let segs: Vec<Segment> = durs.iter().enumerate().map(|(i, d)| {
                let s = Segment::new(format!("p{}", i % 3), t as f64 * 0.005, (t + d) as f64 * 0.005);
                t += d;
                s
            }).collect();
            let ann = UtteranceAnnotation::new("u", "A", segs).unwrap();
            let n = crate::framing::whole_frames(ann.end(), 20);
            let f = EmbeddingFile::new("u", 20, matrix(n, 3, 0.5)).unwrap();
            let inv = PhonemeInventory::from_symbols(["p0", "p1", "p2"]);
            let ds = average_segments(std::slice::from_ref(&f), std::slice::from_ref(&ann), &inv).unwrap();
            let oracle = brute_force_average(&f, &ann);
            prop_assert_eq!(ds.len(), oracle.len());
            for (row, (k, _)) in ds.rows().iter().zip(&oracle) {
                prop_assert_eq!(row.segment_index, *k);
            }
            for (i, (_, mean)) in oracle.iter().enumerate() {
                for (a, b) in ds.features().row(i).iter().zip(mean) {
                    prop_assert!((*a as f64 - b).abs() <= 1e-4 * b.abs().max(1.0));
                }
            }
            // Frames labelled by the framing module always land in some file row.
            let labels = label_utterance_frames(&ann, 20);
            prop_assert!(labels.iter().all(|l| l.frame_index < f.n_frames()));
        }
    }
}
