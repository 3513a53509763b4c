//! Checkpoint persistence.
//!
//! A checkpoint is `DDRCKPT\0`, a little-endian u64 meta length, a JSON
//! meta block (format version, module kind, configs, creation seed, tensor
//! manifest), then the raw tensor blob: little-endian f32 in manifest
//! order. DAM and REM serialize as separate artifacts so one trained REM
//! can ride along with any number of adapted backbones; the `full` kind
//! exists for the entangled baselines.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderBackbone, EncoderConfig};
use crate::error::{DdrError, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::rem::{insert_rem, AssembledModel, RemConfig, RemModule};

const MAGIC: &[u8; 8] = b"DDRCKPT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Dam,
    Rem,
    Full,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointKind::Dam => write!(f, "dam"),
            CheckpointKind::Rem => write!(f, "rem"),
            CheckpointKind::Full => write!(f, "full"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RemDims {
    config: RemConfig,
    num_layers: usize,
    hidden_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in elements.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    kind: CheckpointKind,
    encoder: Option<EncoderConfig>,
    rem: Option<RemDims>,
    seed: u64,
    manifest: Vec<TensorEntry>,
}

/// A module on its way to or from disk.
pub enum CheckpointModule {
    Dam(EncoderBackbone<f32>),
    Rem(RemModule<f32>),
    Full(AssembledModel<f32>),
}

impl CheckpointModule {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            CheckpointModule::Dam(_) => CheckpointKind::Dam,
            CheckpointModule::Rem(_) => CheckpointKind::Rem,
            CheckpointModule::Full(_) => CheckpointKind::Full,
        }
    }

    fn params(&self) -> &ParamSet<f32> {
        match self {
            CheckpointModule::Dam(m) => m.params(),
            CheckpointModule::Rem(m) => m.params(),
            CheckpointModule::Full(m) => m.params(),
        }
    }
}

pub fn save_checkpoint(module: &CheckpointModule, seed: u64, path: &Path) -> Result<()> {
    let params = module.params();
    let mut manifest = Vec::with_capacity(params.len());
    let mut offset = 0usize;
    for (name, p) in params.iter() {
        manifest.push(TensorEntry {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            offset,
            len: p.tensor.numel(),
        });
        offset += p.tensor.numel();
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: module.kind(),
        encoder: match module {
            CheckpointModule::Dam(m) => Some(m.config().clone()),
            CheckpointModule::Full(m) => Some(m.config().clone()),
            CheckpointModule::Rem(_) => None,
        },
        rem: match module {
            CheckpointModule::Dam(_) => None,
            CheckpointModule::Rem(m) => Some(RemDims {
                config: m.config().clone(),
                num_layers: m.num_layers(),
                hidden_dim: m.hidden_dim(),
            }),
            CheckpointModule::Full(m) => Some(RemDims {
                config: m.rem_config().clone(),
                num_layers: m.config().num_layers,
                hidden_dim: m.config().hidden_dim,
            }),
        },
        seed,
        manifest,
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&meta_bytes)?;
    for (_, p) in params.iter() {
        for v in p.tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_meta_and_blob(path: &Path) -> Result<(CheckpointMeta, Vec<f32>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(DdrError::CheckpointCorrupt(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob_start = 16usize
        .checked_add(meta_len)
        .filter(|&s| s <= bytes.len())
        .ok_or_else(|| DdrError::CheckpointCorrupt("truncated meta block".to_string()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..blob_start])?;
    if meta.format_version != FORMAT_VERSION {
        return Err(DdrError::CheckpointVersion {
            found: meta.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let total_elems: usize = meta.manifest.iter().map(|e| e.len).sum();
    let blob_bytes = bytes.len() - blob_start;
    if blob_bytes != total_elems * 4 {
        return Err(DdrError::CheckpointCorrupt(format!(
            "blob is {blob_bytes} bytes but the manifest accounts for {}",
            total_elems * 4
        )));
    }
    let mut expected_offset = 0usize;
    for e in &meta.manifest {
        let numel: usize = e.shape.iter().product();
        if numel != e.len || e.offset != expected_offset {
            return Err(DdrError::CheckpointCorrupt(format!(
                "manifest entry `{}` is inconsistent",
                e.name
            )));
        }
        expected_offset += e.len;
    }
    let blob: Vec<f32> = bytes[blob_start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((meta, blob))
}

fn params_from(meta: &CheckpointMeta, blob: &[f32]) -> Result<ParamSet<f32>> {
    let mut params = ParamSet::new();
    for e in &meta.manifest {
        let data = blob[e.offset..e.offset + e.len].to_vec();
        params.insert(&e.name, Tensor::from_vec(&e.shape, data)?, true)?;
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointModule> {
    let (meta, blob) = read_meta_and_blob(path)?;
    let params = params_from(&meta, &blob)?;
    match meta.kind {
        CheckpointKind::Dam => {
            let cfg = meta.encoder.ok_or_else(|| {
                DdrError::CheckpointCorrupt("dam checkpoint without encoder config".to_string())
            })?;
            Ok(CheckpointModule::Dam(EncoderBackbone::from_params(
                cfg, params,
            )?))
        }
        CheckpointKind::Rem => {
            let dims = meta.rem.ok_or_else(|| {
                DdrError::CheckpointCorrupt("rem checkpoint without rem config".to_string())
            })?;
            if params.names().iter().any(|n| !n.starts_with("rem.")) {
                return Err(DdrError::CheckpointCorrupt(
                    "rem checkpoint contains non-rem tensors".to_string(),
                ));
            }
            Ok(CheckpointModule::Rem(RemModule::from_params(
                dims.config,
                dims.num_layers,
                dims.hidden_dim,
                params,
            )?))
        }
        CheckpointKind::Full => {
            let cfg = meta.encoder.ok_or_else(|| {
                DdrError::CheckpointCorrupt("full checkpoint without encoder config".to_string())
            })?;
            let dims = meta.rem.ok_or_else(|| {
                DdrError::CheckpointCorrupt("full checkpoint without rem config".to_string())
            })?;
            let backbone = EncoderBackbone::from_params(cfg, params.subset("dam."))?;
            let rem = RemModule::from_params(
                dims.config,
                dims.num_layers,
                dims.hidden_dim,
                params.subset("rem."),
            )?;
            Ok(CheckpointModule::Full(insert_rem(&backbone, &rem)?))
        }
    }
}

fn kind_mismatch(found: CheckpointKind, expected: CheckpointKind) -> DdrError {
    DdrError::CheckpointKind {
        found: found.to_string(),
        expected: expected.to_string(),
    }
}

pub fn load_dam(path: &Path) -> Result<EncoderBackbone<f32>> {
    match load_checkpoint(path)? {
        CheckpointModule::Dam(m) => Ok(m),
        other => Err(kind_mismatch(other.kind(), CheckpointKind::Dam)),
    }
}

pub fn load_rem(path: &Path) -> Result<RemModule<f32>> {
    match load_checkpoint(path)? {
        CheckpointModule::Rem(m) => Ok(m),
        other => Err(kind_mismatch(other.kind(), CheckpointKind::Rem)),
    }
}

pub fn load_full(path: &Path) -> Result<AssembledModel<f32>> {
    match load_checkpoint(path)? {
        CheckpointModule::Full(m) => Ok(m),
        other => Err(kind_mismatch(other.kind(), CheckpointKind::Full)),
    }
}

/// SHA-256 of a file, hex-encoded. Used for index provenance.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(bytes_checksum(&bytes))
}

/// SHA-256 of a byte slice, hex-encoded.
pub fn bytes_checksum(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Checksum over a model's tensors without touching disk.
pub fn params_checksum(params: &ParamSet<f32>) -> String {
    let mut hasher = Sha256::new();
    for (name, p) in params.iter() {
        hasher.update(name.as_bytes());
        for v in p.tensor.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
