//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header,
//! then every tensor as little-endian `f32` in header order. The header
//! names each tensor `<component>.<parameter path>` and records its shape
//! and element offset, so readers can check compatibility before copying.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{NetConfig, NetworkBundle, COMPONENTS};

pub const MAGIC: &[u8; 8] = b"SSCVAE\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Last stage that wrote the bundle ("init", "stage1", ...).
    pub stage: String,
    pub parameter_version: u64,
    pub net_config: NetConfig,
    /// Echo of the training configuration that produced the weights.
    pub config_echo: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

fn collect(bundle: &NetworkBundle<f32>) -> (Vec<TensorEntry>, Vec<f32>) {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for name in COMPONENTS {
        bundle.component(name).expect("known component").visit(name, &mut |path, p| {
            entries.push(TensorEntry { name: path.to_string(), shape: p.shape.clone(), offset: data.len(), len: p.len() });
            data.extend_from_slice(&p.value);
        });
    }
    (entries, data)
}

pub fn encode(bundle: &NetworkBundle<f32>, stage: &str, config_echo: &BTreeMap<String, String>) -> Vec<u8> {
    let (tensors, data) = collect(bundle);
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        stage: stage.to_string(),
        parameter_version: bundle.parameter_version,
        net_config: bundle.config.clone(),
        config_echo: config_echo.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<(NetworkBundle<f32>, CheckpointHeader)> {
    let bad = |why: &str| Error::format(origin, why);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::format(origin, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(origin, format!("unsupported format version {}", header.format_version)));
    }
    let raw = &bytes[16 + hlen..];
    if raw.len() % 4 != 0 {
        return Err(bad("tensor data is not a whole number of f32 values"));
    }
    let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();

    let mut bundle = NetworkBundle::<f32>::new(header.net_config.clone())?;
    let by_name: BTreeMap<&str, &TensorEntry> = header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut problem = None;
    let mut used = 0usize;
    for name in COMPONENTS {
        bundle.component_mut(name).expect("known component").visit_mut(name, &mut |path, p| {
            if problem.is_some() {
                return;
            }
            match by_name.get(path) {
                Some(t) if t.offset + t.len > data.len() => problem = Some(format!("tensor {path} is truncated")),
                Some(t) if t.shape == p.shape && t.len == p.len() => {
                    p.value.copy_from_slice(&data[t.offset..t.offset + t.len]);
                    used += 1;
                }
                Some(t) => problem = Some(format!("tensor {path}: stored shape {:?}, expected {:?}", t.shape, p.shape)),
                None => problem = Some(format!("tensor {path} missing")),
            }
        });
    }
    if let Some(p) = problem {
        return Err(Error::format(origin, p));
    }
    if used != header.tensors.len() {
        return Err(Error::format(origin, format!("{} stored tensors are unknown", header.tensors.len() - used)));
    }
    bundle.parameter_version = header.parameter_version;
    Ok((bundle, header))
}

pub fn save(path: &Path, bundle: &NetworkBundle<f32>, stage: &str, config_echo: &BTreeMap<String, String>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = encode(bundle, stage, config_echo);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(NetworkBundle<f32>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// SHA-256 over one component's parameter bytes, in visiting order.
pub fn component_hash(bundle: &NetworkBundle<f32>, name: &str) -> String {
    let mut h = Sha256::new();
    for v in bundle.flat_params(name) {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;

    #[test]
    fn round_trip_is_exact() {
        let mut net = NetworkBundle::<f32>::new(NetConfig::miniature()).unwrap();
        net.parameter_version = 17;
        let mut echo = BTreeMap::new();
        echo.insert("lambda1".to_string(), "10".to_string());
        let bytes = encode(&net, "stage1", &echo);
        let (back, header) = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(header.stage, "stage1");
        assert_eq!(header.config_echo, echo);
        assert_eq!(back.parameter_version, 17);
        for name in COMPONENTS {
            assert_eq!(component_hash(&back, name), component_hash(&net, name));
        }
        assert_eq!(encode(&back, "stage1", &echo), bytes);
    }

    #[test]
    fn corrupt_or_mismatched_files_are_rejected() {
        let net = NetworkBundle::<f32>::new(NetConfig::miniature()).unwrap();
        let bytes = encode(&net, "init", &BTreeMap::new());
        assert!(decode(&bytes[..10], Path::new("x")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong, Path::new("x")).is_err());
        assert!(decode(&bytes[..bytes.len() - 4], Path::new("x")).is_err());
    }

    #[test]
    fn hash_tracks_parameters() {
        let mut net = NetworkBundle::<f32>::new(NetConfig::miniature()).unwrap();
        let before = component_hash(&net, "classifier");
        let other = component_hash(&net, "salient_encoder");
        net.classifier.visit_mut("", &mut |_, p| p.value[0] += 1.0);
        assert_ne!(component_hash(&net, "classifier"), before);
        assert_eq!(component_hash(&net, "salient_encoder"), other);
    }
}
