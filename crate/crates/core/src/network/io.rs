//! Model checkpoints: a JSON manifest plus a sidecar blob of little-endian
//! `f64` values.
//!
//! Parameters are stored in canonical order (for each affine layer, weight
//! then bias), each tensor row-major in its declared shape. The manifest
//! records the SHA-256 of the blob; loading rejects any mismatch.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Activation, Layer, Network, NetworkError};
use crate::data::NormalizationRecord;
use crate::tensor::Tensor;

pub const FORMAT: &str = "ibp-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid model file: {0}")]
    Format(String),
    #[error("blob checksum mismatch: manifest says {expected}, file hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, IoError>;

/// Fixed conventions, written out so the files are self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub tensor_layout: String,
    pub linear_weight: String,
    pub conv_kernel: String,
    pub convolution: String,
    pub blob_encoding: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            tensor_layout: "row-major; images N x C x H x W".into(),
            linear_weight: "[out, in], y = W x + b".into(),
            conv_kernel: "[out_channels, in_channels, kernel_h, kernel_w]".into(),
            convolution: "cross-correlation, zero padding".into(),
            blob_encoding: "little-endian f64".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerRecord {
    Linear {
        weight_shape: Vec<usize>,
        bias_shape: Vec<usize>,
        offset: usize,
    },
    Conv2d {
        weight_shape: Vec<usize>,
        bias_shape: Vec<usize>,
        stride: usize,
        padding: usize,
        offset: usize,
    },
    Activation {
        function: Activation,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRecord {
    pub file: String,
    pub values: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<String>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerRecord>,
    pub conventions: Conventions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormalizationRecord>,
    /// Data domain the input boxes were clipped to, if any.
    #[serde(default)]
    pub input_clip: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
    pub blob: BlobRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_blob: Option<BlobRecord>,
}

/// A network together with everything needed to reproduce or resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub architecture: Option<String>,
    pub normalization: Option<NormalizationRecord>,
    pub input_clip: Option<[f64; 2]>,
    /// Free-form training metadata (config, step, schedule point, RNG state).
    pub training: Option<serde_json::Value>,
    /// Flat optimizer state, stored in its own blob.
    pub optimizer_state: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            architecture: None,
            normalization: None,
            input_clip: Some([0.0, 1.0]),
            training: None,
            optimizer_state: None,
        }
    }

    /// Writes `path` (the manifest) and its sidecar blobs next to it.
    pub fn save(&self, path: &Path) -> Result<ModelManifest> {
        let values = flatten_parameters(&self.network);
        let blob = write_blob(&sidecar(path, "bin"), &values)?;
        let optimizer_blob = match &self.optimizer_state {
            Some(state) => Some(write_blob(&sidecar(path, "optim.bin"), state)?),
            None => None,
        };
        let manifest = ModelManifest {
            format: FORMAT.into(),
            version: VERSION,
            architecture: self.architecture.clone(),
            input_shape: self.network.input_shape().to_vec(),
            num_classes: self.network.num_classes(),
            layers: layer_records(&self.network),
            conventions: Conventions::default(),
            normalization: self.normalization.clone(),
            input_clip: self.input_clip,
            training: self.training.clone(),
            blob,
            optimizer_blob,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: ModelManifest = serde_json::from_str(&text).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if manifest.format != FORMAT {
            return Err(IoError::Format(format!("unknown format `{}`", manifest.format)));
        }
        if manifest.version != VERSION {
            return Err(IoError::Format(format!("unsupported version {}", manifest.version)));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let values = read_blob(dir, &manifest.blob)?;
        let network = build_network(&manifest, &values)?;
        let optimizer_state = match &manifest.optimizer_blob {
            Some(b) => Some(read_blob(dir, b)?),
            None => None,
        };
        Ok(Self {
            network,
            architecture: manifest.architecture,
            normalization: manifest.normalization,
            input_clip: manifest.input_clip,
            training: manifest.training,
            optimizer_state,
        })
    }
}

/// Convenience wrapper for a bare network.
pub fn save_network(net: &Network, path: &Path) -> Result<ModelManifest> {
    Checkpoint::new(net.clone()).save(path)
}

pub fn load_network(path: &Path) -> Result<Network> {
    Ok(Checkpoint::load(path)?.network)
}

fn sidecar(manifest: &Path, ext: &str) -> PathBuf {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    manifest.with_file_name(format!("{stem}.{ext}"))
}

pub fn flatten_parameters(net: &Network) -> Vec<f64> {
    net.parameters().iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn layer_records(net: &Network) -> Vec<LayerRecord> {
    let mut offset = 0;
    net.layers()
        .iter()
        .map(|layer| match layer {
            Layer::Linear { weight, bias } => {
                let rec = LayerRecord::Linear {
                    weight_shape: weight.shape().to_vec(),
                    bias_shape: bias.shape().to_vec(),
                    offset,
                };
                offset += weight.len() + bias.len();
                rec
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let rec = LayerRecord::Conv2d {
                    weight_shape: weight.shape().to_vec(),
                    bias_shape: bias.shape().to_vec(),
                    stride: *stride,
                    padding: *padding,
                    offset,
                };
                offset += weight.len() + bias.len();
                rec
            }
            Layer::Activation(a) => LayerRecord::Activation { function: *a },
            Layer::Flatten => LayerRecord::Flatten,
        })
        .collect()
}

fn take(values: &[f64], offset: usize, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let slice = values
        .get(offset..offset + n)
        .ok_or_else(|| IoError::Format(format!("blob too short for tensor at offset {offset}")))?;
    Ok(Tensor::new(shape.to_vec(), slice.to_vec()).map_err(NetworkError::from)?)
}

fn build_network(manifest: &ModelManifest, values: &[f64]) -> Result<Network> {
    let mut used = 0;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for rec in &manifest.layers {
        let layer = match rec {
            LayerRecord::Linear {
                weight_shape,
                bias_shape,
                offset,
            } => {
                let w = take(values, *offset, weight_shape)?;
                let b = take(values, offset + w.len(), bias_shape)?;
                used += w.len() + b.len();
                Layer::linear(w, b)?
            }
            LayerRecord::Conv2d {
                weight_shape,
                bias_shape,
                stride,
                padding,
                offset,
            } => {
                let w = take(values, *offset, weight_shape)?;
                let b = take(values, offset + w.len(), bias_shape)?;
                used += w.len() + b.len();
                Layer::conv2d(w, b, *stride, *padding)?
            }
            LayerRecord::Activation { function } => Layer::Activation(*function),
            LayerRecord::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    if used != values.len() {
        return Err(IoError::Format(format!(
            "blob holds {} values but layers use {used}",
            values.len()
        )));
    }
    let net = Network::new(layers, manifest.input_shape.clone())?;
    if net.num_classes() != manifest.num_classes {
        return Err(IoError::Format(format!(
            "manifest declares {} classes, layers produce {}",
            manifest.num_classes,
            net.num_classes()
        )));
    }
    Ok(net)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_blob(path: &Path, values: &[f64]) -> Result<BlobRecord> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, &bytes).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(BlobRecord {
        file: path
            .file_name()
            .and_then(|s| s.to_str())
            .expect("sidecar has a file name")
            .to_string(),
        values: values.len(),
        sha256: sha256_hex(&bytes),
    })
}

fn read_blob(dir: &Path, rec: &BlobRecord) -> Result<Vec<f64>> {
    let path = dir.join(&rec.file);
    let bytes = fs::read(&path).map_err(|source| IoError::Io { path, source })?;
    let actual = sha256_hex(&bytes);
    if actual != rec.sha256 {
        return Err(IoError::Checksum {
            expected: rec.sha256.clone(),
            actual,
        });
    }
    if bytes.len() != rec.values * 8 {
        return Err(IoError::Format(format!(
            "blob {} has {} bytes, expected {}",
            rec.file,
            bytes.len(),
            rec.values * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_parameters, parse_architecture};
    use crate::tensor::Rng;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let arch = "conv 2 3x3+1 pad 1; fc 5; fc 3";
        let net = init_parameters(&parse_architecture(arch, &[1, 4, 4]).unwrap(), &mut Rng::new(5));
        let mut ck = Checkpoint::new(net.clone());
        ck.architecture = Some(arch.into());
        ck.optimizer_state = Some(vec![1.5, -2.0]);
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = init_parameters(&parse_architecture("fc 3; fc 2", &[2]).unwrap(), &mut Rng::new(1));
        let path = dir.path().join("m.json");
        save_network(&net, &path).unwrap();
        let blob = dir.path().join("m.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_network(&path), Err(IoError::Checksum { .. })));
    }
}
