//! Manifest (JSON) + weight blob (raw little-endian f32) persistence.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{BlockKind, BlockSpec, LayerKind, LayerSpec, ModelSnapshot};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Serialize, Deserialize)]
struct RawLayer {
    id: String,
    kind: String,
    in_channels: usize,
    out_channels: usize,
    #[serde(default = "unit_pair")]
    kernel: (usize, usize),
    #[serde(default = "unit_pair")]
    stride: (usize, usize),
    #[serde(default)]
    padding: (usize, usize),
    #[serde(default)]
    has_bias: bool,
    #[serde(default)]
    prunable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skip: Option<String>,
}

fn unit_pair() -> (usize, usize) {
    (1, 1)
}

#[derive(Serialize, Deserialize)]
struct RawBlock {
    id: String,
    kind: String,
    layer_ids: Vec<String>,
    prunable_bn_ids: Vec<String>,
    internal_prunable_layer_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arch_name: String,
    input_shape: [usize; 3],
    num_classes: usize,
    blocks: Vec<RawBlock>,
    layers: Vec<RawLayer>,
    tensors: Vec<TensorRecord>,
}

fn shape_bytes(name: &str, shape: &[usize]) -> Result<u64> {
    shape
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| Error::ShapeOffsetMismatch {
            name: name.to_string(),
            detail: format!("shape {shape:?} overflows"),
        })
}

fn decode(manifest: Manifest, blob: &[u8]) -> Result<ModelSnapshot> {
    let mut layers = IndexMap::with_capacity(manifest.layers.len());
    for raw in manifest.layers {
        let kind = LayerKind::parse(&raw.kind).ok_or_else(|| Error::UnknownLayerKind {
            id: raw.id.clone(),
            kind: raw.kind.clone(),
        })?;
        let spec = LayerSpec {
            id: raw.id,
            kind,
            in_channels: raw.in_channels,
            out_channels: raw.out_channels,
            kernel: raw.kernel,
            stride: raw.stride,
            padding: raw.padding,
            has_bias: raw.has_bias,
            prunable: raw.prunable,
            input: raw.input,
            skip: raw.skip,
        };
        if layers.contains_key(&spec.id) {
            return Err(Error::InvalidLayer {
                id: spec.id,
                detail: "duplicate layer id".into(),
            });
        }
        layers.insert(spec.id.clone(), spec);
    }

    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for raw in manifest.blocks {
        let kind = BlockKind::parse(&raw.kind).ok_or_else(|| Error::InvalidBlock {
            id: raw.id.clone(),
            detail: format!("unknown block kind `{}`", raw.kind),
        })?;
        blocks.push(BlockSpec {
            id: raw.id,
            kind,
            layer_ids: raw.layer_ids,
            prunable_bn_ids: raw.prunable_bn_ids,
            internal_prunable_layer_ids: raw.internal_prunable_layer_ids,
        });
    }

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        if rec.dtype != "f32" {
            return Err(Error::InvalidTensor {
                name: rec.name.clone(),
                detail: format!("dtype `{}` is not f32", rec.dtype),
            });
        }
        let expect = shape_bytes(&rec.name, &rec.shape)?;
        if rec.byte_length != expect {
            return Err(Error::ShapeOffsetMismatch {
                name: rec.name.clone(),
                detail: format!("byte_length {} but shape {:?} needs {}", rec.byte_length, rec.shape, expect),
            });
        }
        if rec.byte_offset % 4 != 0 {
            return Err(Error::ShapeOffsetMismatch {
                name: rec.name.clone(),
                detail: format!("byte_offset {} is not 4-byte aligned", rec.byte_offset),
            });
        }
        let end = rec.byte_offset.checked_add(rec.byte_length).ok_or_else(|| Error::ShapeOffsetMismatch {
            name: rec.name.clone(),
            detail: "offset + length overflows".into(),
        })?;
        if end > blob.len() as u64 {
            return Err(Error::ShapeOffsetMismatch {
                name: rec.name.clone(),
                detail: format!("ends at byte {end} but blob has {} bytes", blob.len()),
            });
        }
        spans.push((rec.byte_offset, end, &rec.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::ShapeOffsetMismatch {
                name: w[1].2.to_string(),
                detail: format!("overlaps tensor `{}`", w[0].2),
            });
        }
    }

    let mut tensors = IndexMap::with_capacity(manifest.tensors.len());
    for rec in manifest.tensors {
        let bytes = &blob[rec.byte_offset as usize..(rec.byte_offset + rec.byte_length) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors.contains_key(&rec.name) {
            return Err(Error::InvalidTensor {
                name: rec.name,
                detail: "duplicate tensor record".into(),
            });
        }
        tensors.insert(rec.name, Tensor { shape: rec.shape, data });
    }

    let snap = ModelSnapshot {
        format_version: manifest.format_version,
        arch_name: manifest.arch_name,
        input_shape: manifest.input_shape,
        num_classes: manifest.num_classes,
        blocks,
        layers,
        tensors,
    };
    snap.validate()?;
    Ok(snap)
}

/// Parses and validates a manifest held in memory.
pub fn decode_snapshot(manifest_json: &str, blob: &[u8]) -> Result<ModelSnapshot> {
    let manifest: Manifest =
        serde_json::from_str(manifest_json).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    decode(manifest, blob)
}

pub fn load_snapshot(manifest_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<ModelSnapshot> {
    let (mp, bp) = (manifest_path.as_ref(), blob_path.as_ref());
    let text = fs::read_to_string(mp).map_err(|e| Error::io(mp, e))?;
    let blob = fs::read(bp).map_err(|e| Error::io(bp, e))?;
    decode_snapshot(&text, &blob)
}

/// Serializes to (manifest JSON, blob bytes). Tensors are packed in map order.
pub fn encode_snapshot(s: &ModelSnapshot) -> Result<(String, Vec<u8>)> {
    s.validate()?;
    let total: usize = s.tensors.values().map(|t| t.data.len() * 4).sum();
    let mut blob = Vec::with_capacity(total);
    let mut records = Vec::with_capacity(s.tensors.len());
    for (name, t) in &s.tensors {
        let offset = blob.len() as u64;
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        records.push(TensorRecord {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape.clone(),
            byte_offset: offset,
            byte_length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: s.format_version,
        arch_name: s.arch_name.clone(),
        input_shape: s.input_shape,
        num_classes: s.num_classes,
        blocks: s
            .blocks
            .iter()
            .map(|b| RawBlock {
                id: b.id.clone(),
                kind: b.kind.as_str().into(),
                layer_ids: b.layer_ids.clone(),
                prunable_bn_ids: b.prunable_bn_ids.clone(),
                internal_prunable_layer_ids: b.internal_prunable_layer_ids.clone(),
            })
            .collect(),
        layers: s
            .layers
            .values()
            .map(|l| RawLayer {
                id: l.id.clone(),
                kind: l.kind.as_str().into(),
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                stride: l.stride,
                padding: l.padding,
                has_bias: l.has_bias,
                prunable: l.prunable,
                input: l.input.clone(),
                skip: l.skip.clone(),
            })
            .collect(),
        tensors: records,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    Ok((text, blob))
}

pub fn save_snapshot(s: &ModelSnapshot, manifest_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<()> {
    let (mp, bp) = (manifest_path.as_ref(), blob_path.as_ref());
    let (text, blob) = encode_snapshot(s)?;
    fs::write(mp, text).map_err(|e| Error::io(mp, e))?;
    fs::write(bp, blob).map_err(|e| Error::io(bp, e))?;
    Ok(())
}
