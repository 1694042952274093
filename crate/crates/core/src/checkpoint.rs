//! Binary checkpoint container.
//!
//! ```text
//! "ICLR1" | header length: u64 LE | header: JSON | payload: f32 LE
//! ```
//!
//! The header carries the format version, what the checkpoint holds, the
//! configs needed to rebuild it, and a manifest of named tensors with shape,
//! dtype, byte offset into the payload and byte length. Tensors are written in
//! name order with contiguous offsets; readers look tensors up by name.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dit::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig, LoraFactors};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"ICLR1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Lora,
    Tensors,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

/// Everything in the header except the tensor manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    /// Free-form training state (step, config echo) owned by the trainer.
    #[serde(default)]
    pub train: Option<serde_json::Value>,
}

impl CheckpointMeta {
    pub fn tensors_only() -> Self {
        Self {
            kind: CheckpointKind::Tensors,
            model: None,
            lora: None,
            train: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Serializes `tensors` (in name order) under `meta`.
pub fn encode_checkpoint(meta: &CheckpointMeta, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let nbytes = 4 * t.numel() as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint image, validating magic, version and manifest.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, BTreeMap<String, Tensor<f32>>)> {
    let fmt = |m: String| Error::Format(m);
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt("not an ICLR1 checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let body = &bytes[13..];
    if hlen > body.len() {
        return Err(fmt("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| fmt(format!("bad checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fmt(format!(
            "checkpoint format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &body[hlen..];
    let mut entries: Vec<&TensorEntry> = header.tensors.iter().collect();
    entries.sort_by_key(|e| (e.offset, e.nbytes));
    let mut expect = 0u64;
    let mut tensors = BTreeMap::new();
    for e in entries {
        if e.dtype != "f32" {
            return Err(fmt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.offset != expect || e.nbytes != 4 * numel as u64 {
            return Err(fmt(format!("{}: manifest offsets are inconsistent", e.name)));
        }
        let end = (e.offset + e.nbytes) as usize;
        if end > payload.len() {
            return Err(fmt(format!("truncated payload at tensor {}", e.name)));
        }
        let data = payload[e.offset as usize..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors
            .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
            .is_some()
        {
            return Err(fmt(format!("duplicate tensor {}", e.name)));
        }
        expect = e.offset + e.nbytes;
    }
    if expect as usize != payload.len() {
        return Err(fmt("payload length does not match the manifest".into()));
    }
    Ok((header.meta, tensors))
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(meta, tensors)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Hash of named tensors' names, shapes and values, independent of file layout.
pub fn tensors_digest(tensors: &BTreeMap<String, Tensor<f32>>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub const OPTIM_M: &str = "optim.m.";
pub const OPTIM_V: &str = "optim.v.";
const LORA_PREFIX: &str = "lora.";

/// Splits `optim.m.*` / `optim.v.*` entries from the rest.
pub fn split_optimizer(
    mut tensors: BTreeMap<String, Tensor<f32>>,
) -> (BTreeMap<String, Tensor<f32>>, BTreeMap<String, Tensor<f32>>) {
    let optim: BTreeMap<_, _> = tensors
        .keys()
        .filter(|k| k.starts_with(OPTIM_M) || k.starts_with(OPTIM_V))
        .cloned()
        .collect::<Vec<_>>()
        .into_iter()
        .map(|k| {
            let v = tensors.remove(&k).expect("listed");
            (k, v)
        })
        .collect();
    (tensors, optim)
}

pub fn save_model(
    path: &Path,
    params: &ModelParams,
    train: Option<serde_json::Value>,
    extra: &BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    let mut tensors = params.tensors.clone();
    tensors.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
    let meta = CheckpointMeta {
        kind: CheckpointKind::Base,
        model: Some(params.config.clone()),
        lora: None,
        train,
    };
    save_checkpoint(path, &meta, &tensors)
}

/// Base model plus any optimizer tensors stored with it.
pub fn load_model(path: &Path) -> Result<(ModelParams, CheckpointMeta, BTreeMap<String, Tensor<f32>>)> {
    let (meta, tensors) = load_checkpoint(path)?;
    if meta.kind != CheckpointKind::Base {
        return Err(Error::Format(format!(
            "{} is not a base model checkpoint",
            path.display()
        )));
    }
    let cfg = meta
        .model
        .clone()
        .ok_or_else(|| Error::Format("base checkpoint without model config".into()))?;
    let (tensors, optim) = split_optimizer(tensors);
    Ok((ModelParams::new(cfg, tensors)?, meta, optim))
}

pub fn adapter_tensors(adapter: &LoraAdapter) -> BTreeMap<String, Tensor<f32>> {
    let mut out = BTreeMap::new();
    for (name, f) in &adapter.factors {
        out.insert(format!("{LORA_PREFIX}{name}.A"), f.a.clone());
        out.insert(format!("{LORA_PREFIX}{name}.B"), f.b.clone());
    }
    out
}

pub fn save_adapter(
    path: &Path,
    adapter: &LoraAdapter,
    model: &ModelConfig,
    train: Option<serde_json::Value>,
    extra: &BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    let mut tensors = adapter_tensors(adapter);
    tensors.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
    let meta = CheckpointMeta {
        kind: CheckpointKind::Lora,
        model: Some(model.clone()),
        lora: Some(adapter.config.clone()),
        train,
    };
    save_checkpoint(path, &meta, &tensors)
}

pub fn load_adapter(path: &Path) -> Result<(LoraAdapter, CheckpointMeta, BTreeMap<String, Tensor<f32>>)> {
    let (meta, tensors) = load_checkpoint(path)?;
    if meta.kind != CheckpointKind::Lora {
        return Err(Error::Format(format!(
            "{} is not an adapter checkpoint",
            path.display()
        )));
    }
    let config = meta
        .lora
        .clone()
        .ok_or_else(|| Error::Format("adapter checkpoint without lora config".into()))?;
    let (mut tensors, optim) = split_optimizer(tensors);
    let mut factors = BTreeMap::new();
    for name in &config.targets {
        let mut take = |suffix: &str| {
            tensors
                .remove(&format!("{LORA_PREFIX}{name}.{suffix}"))
                .ok_or_else(|| Error::Format(format!("adapter lacks {name}.{suffix}")))
        };
        let a = take("A")?;
        let b = take("B")?;
        factors.insert(name.clone(), LoraFactors { a, b });
    }
    if let Some(k) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {k} in adapter checkpoint")));
    }
    Ok((LoraAdapter { config, factors }, meta, optim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::init_params;
    use crate::lora::init_adapter;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn random_tensors(rng: &mut Rng, n: usize) -> BTreeMap<String, Tensor<f32>> {
        (0..n)
            .map(|i| {
                let shape: Vec<usize> = (0..1 + rng.below(3)).map(|_| rng.below(5)).collect();
                let numel: usize = shape.iter().product();
                let data = (0..numel)
                    .map(|_| f32::from_bits(rng.next_u64() as u32 & 0x7f7f_ffff))
                    .collect();
                (format!("t{}", i * 7 % 11), Tensor::new(shape, data).unwrap())
            })
            .collect()
    }

    #[test]
    fn magic_version_and_truncation() {
        let mut rng = Rng::new(1);
        let t = random_tensors(&mut rng, 4);
        let bytes = encode_checkpoint(&CheckpointMeta::tensors_only(), &t).unwrap();
        assert_eq!(&bytes[..5], b"ICLR1");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("\"format_version\":1", "\"format_version\":7");
        assert!(decode_checkpoint(text.as_bytes()).is_err());
    }

    #[test]
    fn manifest_order_does_not_matter() {
        let mut rng = Rng::new(2);
        let t = random_tensors(&mut rng, 5);
        let bytes = encode_checkpoint(&CheckpointMeta::tensors_only(), &t).unwrap();
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[13..13 + hlen]).unwrap();
        header["tensors"].as_array_mut().unwrap().reverse();
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = b"ICLR1".to_vec();
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&bytes[13 + hlen..]);
        assert_eq!(decode_checkpoint(&out).unwrap().1, t);
        // a gap in the offsets is rejected
        header["tensors"][0]["offset"] = serde_json::json!(1u64 << 20);
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = b"ICLR1".to_vec();
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&bytes[13 + hlen..]);
        assert!(decode_checkpoint(&out).is_err());
    }

    #[test]
    fn model_and_adapter_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            heads: 2,
            blocks: 1,
            max_height: 16,
            max_width: 16,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, &mut Rng::new(3)).unwrap();
        let p = dir.path().join("base.ckpt");
        save_model(&p, &params, None, &BTreeMap::new()).unwrap();
        let (back, meta, optim) = load_model(&p).unwrap();
        assert_eq!(back, params);
        assert_eq!(meta.kind, CheckpointKind::Base);
        assert!(optim.is_empty());
        let ad = init_adapter(&LoraConfig::all_projections(&cfg, 2), &params, &mut Rng::new(4)).unwrap();
        let q = dir.path().join("a.lora");
        save_adapter(&q, &ad, &cfg, Some(serde_json::json!({"step": 3})), &BTreeMap::new()).unwrap();
        let (ad2, meta, _) = load_adapter(&q).unwrap();
        assert_eq!(ad2, ad);
        assert_eq!(meta.train.unwrap()["step"], 3);
        assert!(load_model(&q).is_err());
        assert!(load_adapter(&p).is_err());
        let first = fs::read(&p).unwrap();
        save_model(&p, &params, None, &BTreeMap::new()).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn roundtrip_is_bitwise(seed: u64, n in 0usize..6) {
            let mut rng = Rng::new(seed);
            let t = random_tensors(&mut rng, n);
            let bytes = encode_checkpoint(&CheckpointMeta::tensors_only(), &t).unwrap();
            let (meta, back) = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(meta, CheckpointMeta::tensors_only());
            prop_assert_eq!(back.len(), t.len());
            for (k, v) in &t {
                let w = &back[k];
                prop_assert_eq!(v.shape(), w.shape());
                prop_assert!(v.data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }
}
