//! Binary model archive.
//!
//! Layout: the 8-byte magic `AFINECKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a UTF-8 JSON header, then the raw
//! little-endian `f64` data of every tensor in header order (sorted by name).
//! Saving the same parameters twice yields identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::fidelity::FidelityWeights;
use crate::model::{AdaptiveScale, CalibrationParams, ModelParameters, FORMAT_VERSION};
use crate::naturalness::NaturalnessHead;
use crate::tape::Tensor;

pub const MAGIC: &[u8; 8] = b"AFINECKP";

#[derive(Serialize, Deserialize)]
struct Header {
    backbone: BackboneConfig,
    naturalness_embed_dim: usize,
    naturalness_stages: usize,
    fidelity_c1: f64,
    fidelity_c2: f64,
    fidelity_stage_channels: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn named_tensors(params: &ModelParameters) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, t) in &params.backbone.tensors {
        out.insert(format!("backbone.{name}"), t.clone());
    }
    for (name, t) in params.naturalness.tensors() {
        out.insert(format!("naturalness.{name}"), t.clone());
    }
    out.insert("fidelity.alpha_logits".into(), params.fidelity.alpha_logits.clone());
    out.insert("fidelity.beta_logits".into(), params.fidelity.beta_logits.clone());
    out.insert("scale.k_raw".into(), scalar(params.scale.k_raw));
    let c = &params.calibration;
    out.insert("calibration.eta3".into(), scalar(c.eta3));
    out.insert("calibration.eta4".into(), scalar(c.eta4));
    out.insert("calibration.gamma3".into(), scalar(c.gamma3));
    out.insert("calibration.gamma4".into(), scalar(c.gamma4));
    out
}

/// Serializes parameters into archive bytes.
pub fn to_bytes(params: &ModelParameters) -> Result<Vec<u8>> {
    params.validate()?;
    let tensors = named_tensors(params);
    let header = Header {
        backbone: params.backbone.config.clone(),
        naturalness_embed_dim: params.naturalness.embed_dim,
        naturalness_stages: params.naturalness.num_stages,
        fidelity_c1: params.fidelity.c1,
        fidelity_c2: params.fidelity.c2,
        fidelity_stage_channels: params.fidelity.stage_channels.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Parameter(format!("header encoding: {e}")))?;
    let data_len: usize = tensors.values().map(|t| t.len() * 8).sum();
    let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + data_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&params.format_version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Parameter(format!("corrupt checkpoint: {}", msg.into()))
}

/// Parses archive bytes and validates the result.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelParameters> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Parameter(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| corrupt(format!("header: {e}")))?;

    let mut cursor = header_end;
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let end = cursor
            .checked_add(len * 8)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(format!("truncated data for {}", entry.name)))?;
        let values: Vec<f64> = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor = end;
        let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("shape/len agree");
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", entry.name)));
        }
    }
    if cursor != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }

    let take = |tensors: &mut BTreeMap<String, Tensor>, name: &str| -> Result<Tensor> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Parameter(format!("checkpoint lacks tensor {name}")))
    };
    let take_scalar = |tensors: &mut BTreeMap<String, Tensor>, name: &str| -> Result<f64> {
        let t = take(tensors, name)?;
        if t.ndim() != 0 {
            return Err(Error::Parameter(format!("{name} must be a scalar")));
        }
        Ok(t[[]])
    };
    let t = &mut tensors;
    let scale = AdaptiveScale {
        k_raw: take_scalar(t, "scale.k_raw")?,
    };
    let calibration = CalibrationParams {
        eta3: take_scalar(t, "calibration.eta3")?,
        eta4: take_scalar(t, "calibration.eta4")?,
        gamma3: take_scalar(t, "calibration.gamma3")?,
        gamma4: take_scalar(t, "calibration.gamma4")?,
    };
    let fidelity = FidelityWeights {
        alpha_logits: take(t, "fidelity.alpha_logits")?,
        beta_logits: take(t, "fidelity.beta_logits")?,
        c1: header.fidelity_c1,
        c2: header.fidelity_c2,
        stage_channels: header.fidelity_stage_channels,
    };
    let naturalness = NaturalnessHead {
        projection_weight: take(t, "naturalness.projection_weight")?,
        projection_bias: take(t, "naturalness.projection_bias")?,
        hidden_weight: take(t, "naturalness.hidden_weight")?,
        hidden_bias: take(t, "naturalness.hidden_bias")?,
        output_weight: take(t, "naturalness.output_weight")?,
        output_bias: take(t, "naturalness.output_bias")?,
        embed_dim: header.naturalness_embed_dim,
        num_stages: header.naturalness_stages,
    };
    let mut backbone_tensors = BTreeMap::new();
    for (name, t) in std::mem::take(&mut tensors) {
        match name.strip_prefix("backbone.") {
            Some(rest) => {
                backbone_tensors.insert(rest.to_owned(), t);
            }
            None => return Err(Error::Parameter(format!("unexpected tensor {name} in checkpoint"))),
        }
    }
    let params = ModelParameters {
        format_version: version,
        backbone: BackboneParams {
            config: header.backbone,
            tensors: backbone_tensors,
        },
        naturalness,
        fidelity,
        scale,
        calibration,
    };
    params.validate()?;
    Ok(params)
}

pub fn save(params: &ModelParameters, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(params)?;
    Error::write_file(path, bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParameters> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// FNV-1a digest of the archive bytes; identifies a parameter set in reports.
pub fn fingerprint(params: &ModelParameters) -> Result<String> {
    Ok(format!("{:016x}", fnv1a(&to_bytes(params)?)))
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
