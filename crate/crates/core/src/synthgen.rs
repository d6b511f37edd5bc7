//! Synthetic annotated corpora with controllable separability.
//!
//! Each phoneme has a unit-norm prototype and each speaker an additive
//! offset. A frame's vector is the concatenation of the occupancy-weighted
//! prototype means over the first and second halves of its window, each half
//! with its own Gaussian noise, so the output dimension is `2 · dim`. The
//! split halves carry the order of the phonemes inside a boundary frame.
//!
//! Segment times are whole multiples of 5 ms and are computed in integer
//! microseconds before conversion to seconds.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{Segment, UtteranceAnnotation};
use crate::embedio::{EmbeddingFile, ManifestEntry};
use crate::framing::{whole_frames, DEFAULT_FRAME_MS};

/// Duration quantum in microseconds.
const QUANTUM_US: u64 = 5_000;
/// Minimum pairwise prototype distance.
const MIN_PROTOTYPE_DISTANCE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_phonemes: usize,
    /// Prototype dimension; frames have twice this many components.
    pub dim: usize,
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub segments_per_utterance: usize,
    /// Inclusive `[min_s, max_s]`, snapped inward to 5 ms multiples.
    pub segment_duration_range: [f64; 2],
    pub noise_sigma: f64,
    pub speaker_shift_sigma: f64,
    pub frame_ms: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_phonemes: 20,
            dim: 32,
            n_speakers: 8,
            utterances_per_speaker: 10,
            segments_per_utterance: 12,
            segment_duration_range: [0.03, 0.12],
            noise_sigma: 0.05,
            speaker_shift_sigma: 0.05,
            frame_ms: DEFAULT_FRAME_MS,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Duration bounds in quanta.
    fn quanta(&self) -> (u64, u64) {
        let [lo, hi] = self.segment_duration_range;
        let q = QUANTUM_US as f64 / 1e6;
        ((lo / q - 1e-9).ceil() as u64, (hi / q + 1e-9).floor() as u64)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.n_phonemes == 0 || self.dim == 0 || self.n_speakers == 0 {
            return bad("n_phonemes, dim and n_speakers must be positive");
        }
        if self.utterances_per_speaker == 0 || self.segments_per_utterance == 0 {
            return bad("utterances_per_speaker and segments_per_utterance must be positive");
        }
        if self.segments_per_utterance > 1 && self.n_phonemes < 2 {
            return bad("sequences without repeats need at least two phonemes");
        }
        let [lo, hi] = self.segment_duration_range;
        if !(lo >= 0.005) || !(hi >= lo) {
            return bad("segment_duration_range needs 0.005 <= min_s <= max_s");
        }
        let (qlo, qhi) = self.quanta();
        if qlo > qhi {
            return bad("segment_duration_range contains no 5 ms multiple");
        }
        if !(self.noise_sigma >= 0.0) || !(self.speaker_shift_sigma >= 0.0) {
            return bad("noise_sigma and speaker_shift_sigma must be non-negative");
        }
        if self.frame_ms == 0 {
            return bad("frame_ms must be positive");
        }
        Ok(())
    }
}

pub fn phoneme_symbol(k: usize) -> String {
    format!("ph{k:02}")
}

pub fn speaker_id(s: usize) -> String {
    format!("spk{s}")
}

/// A generated corpus. Annotations and embeddings are index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub prototypes: Array2<f64>,
    pub speaker_offsets: Array2<f64>,
    pub annotations: Vec<UtteranceAnnotation>,
    pub embeddings: Vec<EmbeddingFile>,
}

impl SynthCorpus {
    /// Manifest entries naming each embedding file `<utt_id>.femb`.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.annotations
            .iter()
            .map(|a| ManifestEntry {
                file: format!("{}.femb", a.utt_id),
                utt_id: a.utt_id.clone(),
                speaker_id: a.speaker_id.clone(),
            })
            .collect()
    }
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn prototypes<R: Rng>(k: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    loop {
        let mut p = Array2::zeros((k, dim));
        for i in 0..k {
            p.row_mut(i).assign(&unit_vector(dim, rng));
        }
        let separated = (0..k).all(|i| {
            (i + 1..k).all(|j| {
                let d = &p.row(i) - &p.row(j);
                d.dot(&d).sqrt() > MIN_PROTOTYPE_DISTANCE
            })
        });
        if separated {
            return p;
        }
    }
}

/// Occupancy-weighted mean of `means` rows over `[a, b)` (microseconds),
/// given segments as `(start_us, end_us, class)`.
fn half_window_mean(segments: &[(u64, u64, usize)], a: u64, b: u64, means: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(means.ncols());
    let width = (b - a) as f64;
    for &(s, e, k) in segments {
        let overlap = e.min(b).saturating_sub(s.max(a));
        if overlap > 0 {
            out.scaled_add(overlap as f64 / width, &means.row(k));
        }
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = prototypes(cfg.n_phonemes, cfg.dim, &mut rng);
    let shift = Normal::new(0.0, cfg.speaker_shift_sigma).expect("validated sigma");
    let offsets = Array2::from_shape_simple_fn((cfg.n_speakers, cfg.dim), || shift.sample(&mut rng));
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let (qlo, qhi) = cfg.quanta();
    let frame_us = cfg.frame_ms as u64 * 1000;
    let half_us = frame_us / 2;

    let mut annotations = Vec::new();
    let mut embeddings = Vec::new();
    for spk in 0..cfg.n_speakers {
        let means = &protos + &offsets.row(spk);
        for u in 0..cfg.utterances_per_speaker {
            let mut segments = Vec::with_capacity(cfg.segments_per_utterance);
            let mut t = 0u64;
            let mut prev: Option<usize> = None;
            for _ in 0..cfg.segments_per_utterance {
                let k = match prev {
                    None => rng.random_range(0..cfg.n_phonemes),
                    Some(p) => {
                        let k = rng.random_range(0..cfg.n_phonemes - 1);
                        if k >= p { k + 1 } else { k }
                    }
                };
                let d = rng.random_range(qlo..=qhi) * QUANTUM_US;
                segments.push((t, t + d, k));
                t += d;
                prev = Some(k);
            }
            let utt_id = format!("{}_u{u:03}", speaker_id(spk));
            let ann = UtteranceAnnotation::new(
                utt_id.clone(),
                speaker_id(spk),
                segments
                    .iter()
                    .map(|&(s, e, k)| Segment::new(phoneme_symbol(k), s as f64 / 1e6, e as f64 / 1e6))
                    .collect(),
            )
            .expect("generated segments are contiguous and positive");
            let n_frames = whole_frames(ann.end(), cfg.frame_ms);
            let mut data = Array2::<f32>::zeros((n_frames, 2 * cfg.dim));
            for i in 0..n_frames {
                let w0 = i as u64 * frame_us;
                // The second half absorbs the odd microsecond of odd frame widths.
                let halves = [(w0, w0 + half_us), (w0 + half_us, w0 + frame_us)];
                for (h, &(a, b)) in halves.iter().enumerate() {
                    let m = half_window_mean(&segments, a, b, &means);
                    for j in 0..cfg.dim {
                        let v = m[j] + if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        data[[i, h * cfg.dim + j]] = v as f32;
                    }
                }
            }
            embeddings.push(EmbeddingFile::new(utt_id, cfg.frame_ms, data).expect("finite values"));
            annotations.push(ann);
        }
    }
    Ok(SynthCorpus { prototypes: protos, speaker_offsets: offsets, annotations, embeddings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framing::{label_corpus, FrameKind};

    fn quiet() -> SynthConfig {
        SynthConfig {
            n_phonemes: 6,
            dim: 8,
            n_speakers: 2,
            utterances_per_speaker: 3,
            noise_sigma: 0.0,
            speaker_shift_sigma: 0.0,
            seed: 4,
            ..Default::default()
        }
    }

    fn close(a: f32, b: f64) -> bool {
        (a as f64 - b).abs() < 1e-6
    }

    #[test]
    fn annotations_are_valid_and_aligned() {
        let c = generate(&quiet()).unwrap();
        assert_eq!(c.annotations.len(), 6);
        for (a, e) in c.annotations.iter().zip(&c.embeddings) {
            a.validate().unwrap();
            assert_eq!(a.utt_id, e.utt_id);
            assert_eq!(e.n_frames(), whole_frames(a.end(), 20));
            assert_eq!(e.dim(), 16);
            for w in a.segments.windows(2) {
                assert_ne!(w[0].label, w[1].label);
            }
            for s in &a.segments {
                let ms = s.duration() * 1000.0;
                assert!((ms / 5.0 - (ms / 5.0).round()).abs() < 1e-6);
                assert!((30.0 - 1e-6..=120.0 + 1e-6).contains(&ms));
            }
        }
    }

    #[test]
    fn prototypes_are_unit_and_separated() {
        let c = generate(&SynthConfig { n_phonemes: 20, ..quiet() }).unwrap();
        for i in 0..20 {
            let r = c.prototypes.row(i);
            assert!((r.dot(&r) - 1.0).abs() < 1e-12);
            for j in i + 1..20 {
                let d = &r - &c.prototypes.row(j);
                assert!(d.dot(&d).sqrt() > MIN_PROTOTYPE_DISTANCE);
            }
        }
    }

    #[test]
    fn clean_central_frames_equal_prototypes() {
        let c = generate(&quiet()).unwrap();
        let frames = label_corpus(&c.annotations, 20);
        let mut checked = 0;
        for f in frames.iter().filter(|f| f.kind == FrameKind::Central) {
            let (a, e) = c
                .annotations
                .iter()
                .zip(&c.embeddings)
                .find(|(a, _)| a.utt_id == f.utt_id)
                .unwrap();
            let k: usize = f.triplet.start[2..].parse().unwrap();
            // A Central triplet can hide a boundary only when a segment is shorter than 10 ms.
            assert!(a.segments.iter().all(|s| s.duration() >= 0.03 - 1e-9));
            let v = e.frame(f.frame_index);
            for j in 0..8 {
                assert!(close(v[j], c.prototypes[[k, j]]) && close(v[8 + j], c.prototypes[[k, j]]));
            }
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn half_and_half_frame_is_the_mean() {
        let means = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let segs = [(0, 15_000, 0), (15_000, 40_000, 1)];
        // Second half [10, 20) ms is split 50/50.
        let m = half_window_mean(&segs, 10_000, 20_000, &means);
        assert_eq!(m, ndarray::array![0.5, 0.5]);
        let first = half_window_mean(&segs, 0, 10_000, &means);
        assert_eq!(first, ndarray::array![1.0, 0.0]);
    }

    #[test]
    fn nearest_prototype_is_perfect_without_noise() {
        let c = generate(&SynthConfig { n_phonemes: 12, utterances_per_speaker: 6, ..quiet() }).unwrap();
        let frames = label_corpus(&c.annotations, 20);
        for f in frames.iter().filter(|f| f.kind == FrameKind::Central) {
            let e = c.embeddings.iter().find(|e| e.utt_id == f.utt_id).unwrap();
            let v = e.frame(f.frame_index);
            let nearest = (0..12)
                .min_by(|&a, &b| {
                    let d = |k: usize| (0..8).map(|j| (v[j] as f64 - c.prototypes[[k, j]]).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert_eq!(phoneme_symbol(nearest), f.triplet.start);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig { noise_sigma: 0.1, speaker_shift_sigma: 0.2, ..quiet() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        assert_ne!(generate(&cfg).unwrap(), generate(&SynthConfig { seed: 5, ..cfg }).unwrap());
    }

    fn border_fraction(range: [f64; 2]) -> f64 {
        let c = generate(&SynthConfig { segment_duration_range: range, utterances_per_speaker: 10, ..quiet() }).unwrap();
        let frames = label_corpus(&c.annotations, 20);
        frames.iter().filter(|f| f.kind != FrameKind::Central).count() as f64 / frames.len() as f64
    }

    #[test]
    fn shorter_segments_mean_more_border_frames() {
        assert!(border_fraction([0.03, 0.06]) > border_fraction([0.1, 0.2]));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SynthConfig { segment_duration_range: [0.004, 0.1], ..quiet() },
            SynthConfig { segment_duration_range: [0.05, 0.04], ..quiet() },
            SynthConfig { segment_duration_range: [0.031, 0.034], ..quiet() },
            SynthConfig { n_phonemes: 1, ..quiet() },
            SynthConfig { dim: 0, ..quiet() },
            SynthConfig { noise_sigma: -1.0, ..quiet() },
        ];
        for cfg in bad {
            assert!(matches!(generate(&cfg), Err(SynthError::InvalidConfig(_))), "{cfg:?}");
        }
        let single = SynthConfig { n_phonemes: 1, segments_per_utterance: 1, ..quiet() };
        assert!(generate(&single).is_ok());
    }
}
