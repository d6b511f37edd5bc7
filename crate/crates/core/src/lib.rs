//! Probing frame-level speech embeddings for phoneme identity and order at
//! segment boundaries.
//!
//! Frames are labelled with start/centre/end phoneme triplets
//! ([`framing`]), paired with embeddings ([`embedio`]), and used to train a
//! three-head feed-forward probe ([`probe`]). Predictions are scored with
//! order-sensitive metrics ([`metrics`]) against a random-order chance level
//! ([`baseline`]), and continuous recordings can be decoded into probability
//! tracks and boundary estimates ([`decoder`]). [`synthgen`] produces
//! synthetic corpora for exercising the whole pipeline.

// `!(x >= 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotations;
pub mod baseline;
pub mod decoder;
pub mod embedio;
pub mod framing;
pub mod metrics;
pub mod probe;
pub mod synthgen;

pub use annotations::{AnnotationError, PhonemeInventory, Segment, UtteranceAnnotation};
pub use baseline::{BaselineConfig, BaselineError, Protocol};
pub use decoder::{BoundaryEvent, DecoderError, Evidence, FrameDecode};
pub use embedio::{EmbedError, EmbeddingFile, ProbeDataset, SegmentAveragedDataset, SpeakerDataset};
pub use framing::{FrameKind, FrameLabelSet, FramingError, Position, Triplet, TripletLabel};
pub use metrics::{ConfusionMatrix, MetricsError, MetricsReport};
pub use probe::{Precision, ProbeConfig, ProbeError, ProbeModel, TrainConfig};
pub use synthgen::{SynthConfig, SynthCorpus, SynthError};
