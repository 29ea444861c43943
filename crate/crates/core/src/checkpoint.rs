//! Checkpoint archives.
//!
//! The on-disk layout is the safetensors container: an 8-byte little-endian
//! header length, a JSON header mapping tensor names to dtype, shape and byte
//! offsets, then the raw little-endian tensor bytes. The header's
//! `__metadata__` entry carries the format tag, the model and schedule
//! configuration, the parameter groups and the training provenance, each as
//! a JSON string. Keys are written in sorted order so equal checkpoints
//! serialize to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore, Tensor};

pub const FORMAT_TAG: &str = "anchorframe-checkpoint/1";

/// How a checkpoint came to be.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// `init`, or the training mode that produced the weights.
    pub stage: String,
    pub steps: usize,
    pub seed: u64,
    /// Hash of the checkpoint training started from.
    pub parent: Option<String>,
    /// Crate version that wrote the file.
    pub code_version: String,
    /// Every training stage applied so far, oldest first.
    #[serde(default)]
    pub lineage: Vec<String>,
}

impl Provenance {
    pub fn init(seed: u64) -> Self {
        Self {
            stage: "init".into(),
            steps: 0,
            seed,
            parent: None,
            code_version: env!("CARGO_PKG_VERSION").into(),
            lineage: Vec::new(),
        }
    }

    /// The most recent stage that trained the temporal layers.
    pub fn temporal_stage(&self) -> Option<&str> {
        self.lineage
            .iter()
            .rev()
            .map(String::as_str)
            .find(|s| matches!(*s, "baseline_motion" | "anchor_motion"))
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub provenance: Provenance,
    pub params: ParamStore,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn from_denoiser(model: &Denoiser, schedule: ScheduleParams, provenance: Provenance) -> Self {
        Self {
            config: model.config().clone(),
            schedule,
            provenance,
            params: model.store().clone(),
        }
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::from_params(self.config.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = serde_json::Map::new();
        meta.insert("format".into(), json!(FORMAT_TAG));
        meta.insert("config".into(), json!(serde_json::to_string(&self.config)?));
        meta.insert("schedule".into(), json!(serde_json::to_string(&self.schedule)?));
        meta.insert("provenance".into(), json!(serde_json::to_string(&self.provenance)?));
        encode_archive(&self.params, meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = decode_archive(bytes, FORMAT_TAG)?;
        Ok(Self {
            config: serde_json::from_str(meta_str(&meta, "config")?)?,
            schedule: serde_json::from_str(meta_str(&meta, "schedule")?)?,
            provenance: serde_json::from_str(meta_str(&meta, "provenance")?)?,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized archive.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub(crate) fn meta_str<'a>(meta: &'a Metadata, key: &str) -> Result<&'a str> {
    meta.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| format_err(format!("metadata field {key} missing")))
}

pub(crate) type Metadata = serde_json::Map<String, Value>;

/// Serialize `params` with `meta` (which must carry a `format` tag) into the
/// archive layout. Parameter groups are added to the metadata.
pub(crate) fn encode_archive(params: &ParamStore, mut meta: Metadata) -> Result<Vec<u8>> {
    let mut order: Vec<(&str, usize)> = params.entries().iter().enumerate().map(|(i, e)| (e.name.as_str(), i)).collect();
    order.sort_unstable();
    let groups: BTreeMap<&str, &str> = params.entries().iter().map(|e| (e.name.as_str(), e.group.as_str())).collect();
    meta.insert("groups".into(), json!(serde_json::to_string(&groups)?));

    let mut header = serde_json::Map::new();
    header.insert("__metadata__".into(), Value::Object(meta));
    let mut offset = 0usize;
    for &(name, i) in &order {
        let t = &params.entries()[i].value;
        let len = t.numel() * 4;
        header.insert(
            name.into(),
            json!({"dtype": "F32", "shape": t.shape(), "data_offsets": [offset, offset + len]}),
        );
        offset += len;
    }
    let mut head = serde_json::to_vec(&Value::Object(header))?;
    // pad with spaces so the data section starts 8-byte aligned
    while head.len() % 8 != 0 {
        head.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + head.len() + offset);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for &(_, i) in &order {
        for v in params.entries()[i].value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse an archive whose `format` tag must equal `tag`.
pub(crate) fn decode_archive(bytes: &[u8], tag: &str) -> Result<(Metadata, ParamStore)> {
    if bytes.len() < 8 {
        return Err(format_err("archive shorter than its length prefix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if 8 + n > bytes.len() {
        return Err(format_err("header length exceeds file size"));
    }
    let mut header: serde_json::Map<String, Value> = serde_json::from_slice(&bytes[8..8 + n])?;
    let data = &bytes[8 + n..];
    let meta = match header.remove("__metadata__") {
        Some(Value::Object(m)) => m,
        _ => return Err(format_err("missing __metadata__")),
    };
    let found = meta_str(&meta, "format")?;
    if found != tag {
        return Err(format_err(format!("archive format {found} is not {tag}")));
    }
    let groups: BTreeMap<String, String> = serde_json::from_str(meta_str(&meta, "groups")?)?;
    if header.len() != groups.len() {
        return Err(format_err("header tensors and parameter groups disagree"));
    }
    let mut params = ParamStore::new();
    for (name, group) in &groups {
        let entry = header
            .get(name)
            .ok_or_else(|| format_err(format!("tensor {name} listed in groups but not stored")))?;
        let info: TensorInfo = serde_json::from_value(entry.clone())?;
        if info.dtype != "F32" {
            return Err(format_err(format!("tensor {name} has unsupported dtype {}", info.dtype)));
        }
        let [lo, hi] = info.data_offsets;
        let numel: usize = info.shape.iter().product();
        if hi < lo || hi > data.len() || hi - lo != numel * 4 {
            return Err(format_err(format!("tensor {name} has inconsistent offsets")));
        }
        let vals = data[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let group = ParamGroup::parse(group).ok_or_else(|| format_err(format!("unknown group {group}")))?;
        params.add(name.clone(), group, Tensor::from_vec(&info.shape, vals));
    }
    Ok((meta, params))
}

#[derive(Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = DenoiserConfig {
            adapter_enabled: true,
            ..DenoiserConfig::tiny()
        };
        let model = Denoiser::new(cfg, 3).unwrap();
        Checkpoint::from_denoiser(&model, ScheduleParams::default(), Provenance::init(3))
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let path2 = dir.path().join("b.safetensors");
        back.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        assert_eq!(back.params.checksum(None), ck.params.checksum(None));
        assert_eq!(back.config, ck.config);
        assert_eq!(back.provenance, ck.provenance);
        back.denoiser().unwrap();
    }

    #[test]
    fn rejects_other_versions() {
        let bytes = sample().to_bytes().unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let head = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
        let forged = head.replacen(FORMAT_TAG, "anchorframe-checkpoint/0", 1);
        assert_eq!(forged.len(), head.len());
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(forged.as_bytes());
        out.extend_from_slice(&bytes[8 + n..]);
        let err = Checkpoint::from_bytes(&out).unwrap_err();
        assert!(err.to_string().contains("format"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }
}
