//! Binary weights container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 4     | magic `ATNW`                              |
//! | 4     | format version (`u32`, currently 1)       |
//! | 4     | manifest length `n` (`u32`)               |
//! | n     | UTF-8 JSON [`Manifest`]                   |
//! | ...   | `f64` values of every tensor, in manifest order |
//!
//! A pretty-printed copy of the manifest is written next to the file as
//! `<path>.json` for inspection; it is not read back.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layers::{LayerParams, LayerSpec, ParameterSet};
use super::train::{Head, MultiHeadNet};
use super::{NetError, Tensor};

pub const MAGIC: [u8; 4] = *b"ATNW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub head: usize,
    pub layer: usize,
    pub role: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub architecture: String,
    pub input_shape: Vec<usize>,
    pub heads: Vec<Vec<LayerSpec>>,
    pub tensors: Vec<TensorEntry>,
    pub total_values: usize,
}

fn manifest_of(net: &MultiHeadNet, architecture: &str) -> Manifest {
    let mut tensors = Vec::new();
    for (h, head) in net.heads.iter().enumerate() {
        for (l, lp) in head.params.layers().iter().enumerate() {
            if let Some(lp) = lp {
                for (role, t) in [("weight", &lp.weight), ("bias", &lp.bias)] {
                    tensors.push(TensorEntry {
                        head: h,
                        layer: l,
                        role: role.into(),
                        shape: t.shape().to_vec(),
                    });
                }
            }
        }
    }
    Manifest {
        architecture: architecture.into(),
        input_shape: net.input_shape.clone(),
        heads: net.heads.iter().map(|h| h.specs.clone()).collect(),
        total_values: tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum(),
        tensors,
    }
}

pub fn encode_weights(net: &MultiHeadNet, architecture: &str) -> Vec<u8> {
    let manifest = manifest_of(net, architecture);
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + manifest.total_values * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for head in &net.heads {
        for t in head.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<(Manifest, MultiHeadNet), NetError> {
    let corrupt = |m: String| NetError::Format(m);
    if bytes.len() < 12 {
        return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(corrupt(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(NetError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + mlen)
        .ok_or_else(|| corrupt("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let payload = &bytes[12 + mlen..];
    if payload.len() != manifest.total_values * 8 {
        return Err(corrupt(format!(
            "payload has {} bytes, manifest needs {}",
            payload.len(),
            manifest.total_values * 8
        )));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut entries = manifest.tensors.iter();
    let mut heads = Vec::new();
    for (h, specs) in manifest.heads.iter().enumerate() {
        let mut layers = Vec::with_capacity(specs.len());
        for (l, spec) in specs.iter().enumerate() {
            match spec.param_shapes() {
                None => layers.push(None),
                Some((ws, bs)) => {
                    let mut take = |role: &str, shape: &[usize]| -> Result<Tensor, NetError> {
                        let e = entries.next().ok_or_else(|| corrupt("manifest lists too few tensors".into()))?;
                        if e.head != h || e.layer != l || e.role != role || e.shape != shape {
                            return Err(corrupt(format!("tensor entry {e:?} does not match head {h} layer {l} {role}")));
                        }
                        let n: usize = shape.iter().product();
                        Tensor::new(shape.to_vec(), values.by_ref().take(n).collect())
                    };
                    let weight = take("weight", &ws)?;
                    let bias = take("bias", &bs)?;
                    layers.push(Some(LayerParams { weight, bias }));
                }
            }
        }
        heads.push(Head {
            specs: specs.clone(),
            params: ParameterSet::from_layers(layers),
        });
    }
    if entries.next().is_some() {
        return Err(corrupt("manifest lists extra tensors".into()));
    }
    let net = MultiHeadNet::new(manifest.input_shape.clone(), heads)?;
    Ok((manifest, net))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_weights(net: &MultiHeadNet, architecture: &str, path: &Path) -> Result<(), NetError> {
    let bytes = encode_weights(net, architecture);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    let manifest = manifest_of(net, architecture);
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(Manifest, MultiHeadNet), NetError> {
    decode_weights(&std::fs::read(path)?)
}
