//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `FSRLCKPT`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the JSON manifest, then the payload. The
//! payload is every tensor's values as little-endian `f32`, concatenated in
//! manifest order. The manifest records the SHA-256 of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{FrozenLm, LmConfig, LmParams, LmWeights};
use crate::sae::SparseAutoencoder;
use crate::scalar::Scalar;
use crate::steering::{SteeringAdapter, Variant};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FSRLCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Length in bytes.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: u64,
    pub payload_sha256: String,
    pub meta: BTreeMap<String, Value>,
    /// Snapshot of the configuration that produced the file.
    pub config: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    tensors: BTreeMap<String, Tensor<f32>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| corrupt(format!("missing tensor {name:?}")))?;
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| T::of(f64::from(v))).collect())
    }

    pub fn meta(&self, key: &str) -> Result<&Value> {
        self.manifest
            .meta
            .get(key)
            .ok_or_else(|| corrupt(format!("missing metadata {key:?}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(corrupt(format!("expected a {kind} checkpoint, found {}", self.manifest.kind)));
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    kind: &str,
    tensors: &[(&str, &Tensor<T>)],
    meta: BTreeMap<String, Value>,
    config: Value,
) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: (*name).to_owned(),
            shape: t.shape().to_vec(),
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_owned(),
        dtype: "f32".into(),
        tensors: entries,
        payload_len: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        meta,
        config,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("file shorter than the header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    let manifest_len = usize::try_from(manifest_len)
        .ok()
        .filter(|&n| n <= body.len())
        .ok_or_else(|| corrupt("manifest length exceeds file size"))?;
    let manifest: Manifest =
        serde_json::from_slice(&body[..manifest_len]).map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "manifest format version {} disagrees with header",
            manifest.format_version
        )));
    }
    if manifest.dtype != "f32" {
        return Err(corrupt(format!("unsupported dtype {}", manifest.dtype)));
    }
    let payload = &body[manifest_len..];
    if payload.len() as u64 != manifest.payload_len {
        return Err(corrupt(format!(
            "payload is {} bytes, manifest says {}",
            payload.len(),
            manifest.payload_len
        )));
    }
    if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(corrupt("payload hash mismatch"));
    }
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.len as usize);
        if len != n * 4 || start.checked_add(len).is_none_or(|end| end > payload.len()) {
            return Err(corrupt(format!("tensor {:?} lies outside the payload", e.name)));
        }
        let data = payload[start..start + len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(err.to_string()))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor {:?}", e.name)));
        }
    }
    Ok(Checkpoint { manifest, tensors })
}

fn meta_value<S: Serialize>(pairs: &[(&str, S)]) -> BTreeMap<String, Value> {
    pairs
        .iter()
        .map(|(k, v)| ((*k).to_owned(), serde_json::to_value(v).expect("metadata serializes")))
        .collect()
}

pub fn save_lm<T: Scalar>(path: &Path, model: &FrozenLm<T>, config: Value) -> Result<()> {
    let names = LmWeights::<()>::names(model.config().n_layers);
    let params = model.params().iter();
    let tensors: Vec<(&str, &Tensor<T>)> = names.iter().map(String::as_str).zip(params).collect();
    save_checkpoint(path, "lm", &tensors, meta_value(&[("lm_config", model.config())]), config)
}

pub fn load_lm<T: Scalar>(path: &Path) -> Result<FrozenLm<T>> {
    let ck = load_checkpoint(path)?;
    ck.expect_kind("lm")?;
    let cfg: LmConfig = serde_json::from_value(ck.meta("lm_config")?.clone())
        .map_err(|e| corrupt(format!("bad lm_config: {e}")))?;
    let values = LmWeights::<()>::names(cfg.n_layers)
        .iter()
        .map(|n| ck.tensor(n))
        .collect::<Result<Vec<_>>>()?;
    let params: LmParams<T> =
        LmWeights::from_vec(cfg.n_layers, values).ok_or_else(|| corrupt("wrong number of model tensors"))?;
    FrozenLm::new(cfg, params).map_err(|e| corrupt(e.to_string()))
}

pub fn save_sae<T: Scalar>(path: &Path, sae: &SparseAutoencoder<T>, hook_layer: usize, config: Value) -> Result<()> {
    let tensors: Vec<(&str, &Tensor<T>)> = SparseAutoencoder::<T>::TENSOR_NAMES
        .into_iter()
        .zip(sae.tensors())
        .collect();
    save_checkpoint(path, "sae", &tensors, meta_value(&[("hook_layer", hook_layer)]), config)
}

/// The SAE and the hook layer it was trained on.
pub fn load_sae<T: Scalar>(path: &Path) -> Result<(SparseAutoencoder<T>, usize)> {
    let ck = load_checkpoint(path)?;
    ck.expect_kind("sae")?;
    let [w_enc, b_enc, w_dec, b_dec] = SparseAutoencoder::<T>::TENSOR_NAMES.map(|n| ck.tensor(n));
    let sae = SparseAutoencoder::new(w_enc?, b_enc?, w_dec?, b_dec?).map_err(|e| corrupt(e.to_string()))?;
    let layer = ck
        .meta("hook_layer")?
        .as_u64()
        .ok_or_else(|| corrupt("hook_layer is not an integer"))?;
    Ok((sae, layer as usize))
}

pub fn save_adapter<T: Scalar>(path: &Path, adapter: &SteeringAdapter<T>, config: Value) -> Result<()> {
    let tensors: Vec<(&str, &Tensor<T>)> = SteeringAdapter::<T>::TENSOR_NAMES
        .into_iter()
        .zip(adapter.tensors())
        .collect();
    save_checkpoint(path, "adapter", &tensors, meta_value(&[("variant", adapter.variant)]), config)
}

pub fn load_adapter<T: Scalar>(path: &Path) -> Result<SteeringAdapter<T>> {
    let ck = load_checkpoint(path)?;
    ck.expect_kind("adapter")?;
    let variant: Variant = serde_json::from_value(ck.meta("variant")?.clone())
        .map_err(|e| corrupt(format!("bad variant tag: {e}")))?;
    let [w_a, b_a, theta] = SteeringAdapter::<T>::TENSOR_NAMES.map(|n| ck.tensor(n));
    SteeringAdapter::new(w_a?, b_a?, theta?, variant).map_err(|e| corrupt(e.to_string()))
}
