//! Checkpoints: `PREFIX.manifest.json` describing every tensor, and
//! `PREFIX.bin` holding them as concatenated little-endian `f32`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::encoder::{Encoder, EncoderConfig, LayerSpec};
use crate::error::{Error, Result};
use crate::numkit::{Parameterized, Scalar, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub byte_length: u64,
}

/// Routing metadata of one converted layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertMeta {
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_experts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Original expert indices kept by pruning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub layer_kinds: Vec<String>,
    pub moe_meta: Vec<ExpertMeta>,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(prefix: impl AsRef<Path>) -> PathBuf {
    with_suffix(prefix.as_ref(), ".manifest.json")
}

pub fn blob_path(prefix: impl AsRef<Path>) -> PathBuf {
    with_suffix(prefix.as_ref(), ".bin")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn layer_meta(specs: &[LayerSpec]) -> (Vec<String>, Vec<ExpertMeta>) {
    let kinds = specs.iter().map(|s| s.kind_name().to_string()).collect();
    let meta = specs
        .iter()
        .enumerate()
        .filter_map(|(layer, spec)| match spec {
            LayerSpec::Standard => None,
            LayerSpec::Moe { n_experts, k } => Some(ExpertMeta {
                layer,
                k: Some(*k),
                n_experts: Some(*n_experts),
                m: None,
                retained: None,
            }),
            LayerSpec::Deterministic { retained } => Some(ExpertMeta {
                layer,
                k: None,
                n_experts: None,
                m: Some(retained.len()),
                retained: Some(retained.clone()),
            }),
        })
        .collect();
    (kinds, meta)
}

/// Manifest and blob bytes for `model`; identical models give identical bytes.
pub fn encode<T: Scalar>(model: &Encoder<T>) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for p in model.parameters() {
        let offset = blob.len() as u64;
        for &v in p.value().data() {
            let f = v.to_f32().ok_or_else(|| Error::Checkpoint {
                tensor: p.name().to_string(),
                reason: "value not representable as f32".into(),
            })?;
            blob.extend_from_slice(&f.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            dtype: "f32".into(),
            offset,
            byte_length: blob.len() as u64 - offset,
        });
    }
    let (layer_kinds, moe_meta) = layer_meta(&model.layer_specs());
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        layer_kinds,
        moe_meta,
        tensors,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    Ok((json, blob))
}

/// Writes both files, each through a temp file and rename.
pub fn save<T: Scalar>(model: &Encoder<T>, prefix: impl AsRef<Path>) -> Result<()> {
    let (manifest, blob) = encode(model)?;
    write_atomic(&blob_path(&prefix), &blob)?;
    write_atomic(&manifest_path(&prefix), &manifest)
}

fn specs_from(manifest: &Manifest) -> Result<Vec<LayerSpec>> {
    let meta: HashMap<usize, &ExpertMeta> = manifest.moe_meta.iter().map(|m| (m.layer, m)).collect();
    if meta.len() != manifest.moe_meta.len() {
        return Err(Error::Format("moe_meta lists a layer twice".into()));
    }
    let missing = |i: usize, what: &str| Error::Format(format!("layer {i}: moe_meta lacks `{what}`"));
    let specs = manifest
        .layer_kinds
        .iter()
        .enumerate()
        .map(|(i, kind)| match kind.as_str() {
            "standard" => Ok(LayerSpec::Standard),
            "moe" => {
                let m = meta.get(&i).ok_or_else(|| missing(i, "entry"))?;
                Ok(LayerSpec::Moe {
                    n_experts: m.n_experts.ok_or_else(|| missing(i, "n_experts"))?,
                    k: m.k.ok_or_else(|| missing(i, "k"))?,
                })
            }
            "deterministic" => {
                let m = meta.get(&i).ok_or_else(|| missing(i, "entry"))?;
                let retained = m.retained.clone().ok_or_else(|| missing(i, "retained"))?;
                if m.m.is_some_and(|count| count != retained.len()) {
                    return Err(Error::Format(format!("layer {i}: m disagrees with retained")));
                }
                Ok(LayerSpec::Deterministic { retained })
            }
            other => Err(Error::Format(format!("layer {i}: unknown kind `{other}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(stray) = manifest.moe_meta.iter().find(|m| specs.get(m.layer).is_none_or(|s| *s == LayerSpec::Standard)) {
        return Err(Error::Format(format!("moe_meta entry for non-routed layer {}", stray.layer)));
    }
    Ok(specs)
}

/// Rebuilds a model from manifest and blob bytes, validating every tensor.
pub fn decode<T: Scalar>(manifest: &[u8], blob: &[u8]) -> Result<Encoder<T>> {
    let manifest: Manifest = serde_json::from_slice(manifest)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let specs = specs_from(&manifest)?;
    let mut model = Encoder::<T>::skeleton(manifest.config.clone(), &specs)?;

    let mut next_offset = 0u64;
    for entry in &manifest.tensors {
        let bad = |reason: String| Error::Checkpoint {
            tensor: entry.name.clone(),
            reason,
        };
        if entry.dtype != "f32" {
            return Err(bad(format!("dtype `{}` is not f32", entry.dtype)));
        }
        if entry.offset != next_offset {
            return Err(bad(format!("offset {} but previous tensor ended at {next_offset}", entry.offset)));
        }
        let want = entry.shape.iter().product::<usize>() as u64 * 4;
        if entry.byte_length != want {
            return Err(bad(format!("byte_length {} but shape {:?} needs {want}", entry.byte_length, entry.shape)));
        }
        next_offset += entry.byte_length;
        if next_offset > blob.len() as u64 {
            return Err(bad(format!("blob truncated: needs {next_offset} bytes, has {}", blob.len())));
        }
    }
    if next_offset != blob.len() as u64 {
        return Err(Error::Format(format!(
            "blob has {} bytes, manifest accounts for {next_offset}",
            blob.len()
        )));
    }

    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if by_name.insert(entry.name.as_str(), entry).is_some() {
            return Err(Error::Checkpoint {
                tensor: entry.name.clone(),
                reason: "listed twice".into(),
            });
        }
    }
    let mut used = 0usize;
    for p in model.parameters_mut() {
        let entry = by_name.get(p.name()).ok_or_else(|| Error::Checkpoint {
            tensor: p.name().to_string(),
            reason: "missing from manifest".into(),
        })?;
        if entry.shape != p.value().shape() {
            return Err(Error::Checkpoint {
                tensor: entry.name.clone(),
                reason: format!("shape {:?} but the model expects {:?}", entry.shape, p.value().shape()),
            });
        }
        let bytes = &blob[entry.offset as usize..(entry.offset + entry.byte_length) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        *p.value_mut() = Tensor::new(entry.shape.clone(), data)?;
        used += 1;
    }
    if used != manifest.tensors.len() {
        let known: std::collections::HashSet<String> = model.parameters().iter().map(|p| p.name().to_string()).collect();
        let stray = manifest.tensors.iter().find(|t| !known.contains(&t.name)).expect("count mismatch");
        return Err(Error::Checkpoint {
            tensor: stray.name.clone(),
            reason: "not a parameter of the described model".into(),
        });
    }
    Ok(model)
}

pub fn load<T: Scalar>(prefix: impl AsRef<Path>) -> Result<Encoder<T>> {
    let (mp, bp) = (manifest_path(&prefix), blob_path(&prefix));
    let manifest = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    decode(&manifest, &blob)
}

pub fn read_manifest(prefix: impl AsRef<Path>) -> Result<Manifest> {
    let mp = manifest_path(prefix);
    let bytes = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
