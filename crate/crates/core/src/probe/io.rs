//! Model file: `"PRB1" | u32 metadata_len | JSON metadata | parameter blob`.
//!
//! The blob holds trunk layers 1..3 (weights row-major `out × in`, then
//! bias) followed by the heads in start, centre, end order, as little-endian
//! floats of the declared precision.

use serde::{Deserialize, Serialize};

use super::network::{Network, Real};
use super::{Precision, ProbeConfig, ProbeError, ProbeModel};
use crate::annotations::PhonemeInventory;

pub const MODEL_MAGIC: &[u8; 4] = b"PRB1";

#[derive(Serialize, Deserialize)]
struct Metadata {
    version: u32,
    input_dim: usize,
    hidden_dims: Vec<usize>,
    n_classes: usize,
    heads: usize,
    dropout: f64,
    inventory: Vec<String>,
    inventory_counts: Vec<u64>,
    precision: Precision,
}

pub fn save_model(model: &ProbeModel) -> Vec<u8> {
    let meta = Metadata {
        version: 1,
        input_dim: model.config.input_dim,
        hidden_dims: model.config.hidden_dims.to_vec(),
        n_classes: model.config.n_classes,
        heads: model.config.heads,
        dropout: model.config.dropout,
        inventory: model.inventory.symbols().to_vec(),
        inventory_counts: model.inventory.counts().to_vec(),
        precision: model.precision,
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    match model.precision {
        Precision::Single => write_params::<f32>(&model.network(), &mut out),
        Precision::Double => write_params::<f64>(&model.network(), &mut out),
    }
    out
}

fn write_params<T: Real>(net: &Network<T>, out: &mut Vec<u8>) {
    out.reserve(net.n_params() * T::BYTES);
    for v in net.flat() {
        v.write_le(out);
    }
}

fn read_params<T: Real>(cfg: &ProbeConfig, blob: &[u8]) -> Result<Network<T>, ProbeError> {
    let mut net = Network::<T>::zeros(cfg);
    let expected = net.n_params() * T::BYTES;
    if blob.len() != expected {
        return Err(ProbeError::ArchitectureMismatch(format!(
            "declared architecture needs {expected} parameter bytes, file has {}",
            blob.len()
        )));
    }
    let values: Vec<T> = blob.chunks_exact(T::BYTES).map(T::read_le).collect();
    net.set_flat(&values);
    Ok(net)
}

pub fn load_model(bytes: &[u8]) -> Result<ProbeModel, ProbeError> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(ProbeError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(ProbeError::TruncatedPayload { needed: 8, found: bytes.len() });
    }
    let meta_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let blob_start = 8 + meta_len;
    if bytes.len() < blob_start {
        return Err(ProbeError::TruncatedPayload { needed: blob_start, found: bytes.len() });
    }
    let meta: Metadata = serde_json::from_slice(&bytes[8..blob_start])
        .map_err(|e| ProbeError::ArchitectureMismatch(format!("unreadable metadata: {e}")))?;
    if meta.version != 1 {
        return Err(ProbeError::ArchitectureMismatch(format!("unsupported model version {}", meta.version)));
    }
    let hidden_dims: [usize; 3] = meta.hidden_dims.as_slice().try_into().map_err(|_| {
        ProbeError::ArchitectureMismatch(format!("expected 3 hidden layers, found {}", meta.hidden_dims.len()))
    })?;
    if meta.inventory.len() != meta.inventory_counts.len() {
        return Err(ProbeError::ArchitectureMismatch("inventory counts do not match symbols".into()));
    }
    let config = ProbeConfig {
        input_dim: meta.input_dim,
        hidden_dims,
        n_classes: meta.n_classes,
        dropout: meta.dropout,
        heads: meta.heads,
    };
    config.validate().map_err(|e| ProbeError::ArchitectureMismatch(e.to_string()))?;
    let inventory = PhonemeInventory::from_parts(meta.inventory, meta.inventory_counts);
    let blob = &bytes[blob_start..];
    match meta.precision {
        Precision::Single => {
            let net = read_params::<f32>(&config, blob)?;
            ProbeModel::from_network(config, inventory, Precision::Single, &net)
        }
        Precision::Double => {
            let net = read_params::<f64>(&config, blob)?;
            ProbeModel::from_network(config, inventory, Precision::Double, &net)
        }
    }
}
