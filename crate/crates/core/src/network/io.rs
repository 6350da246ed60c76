//! Model directory format: `model.json` manifest plus a `weights.bin` blob.
//!
//! `weights.bin` holds every float tensor (row-major, little-endian) followed
//! by every mask, one byte per element. The manifest records each blob's
//! offset, length, shape and CRC32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, ConvLayer, DenseLayer, Layer, MaxPool, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Tensor};

pub const MODEL_MANIFEST_FILE: &str = "model.json";
pub const MODEL_BLOB_FILE: &str = "weights.bin";

const FORMAT: &str = "relief-model";
const VERSION: u32 = 1;
const MASK_ENCODING: &str = "u8";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    input_shape: Vec<usize>,
    classes: usize,
    layer_count: usize,
    layers: Vec<LayerEntry>,
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerEntry {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: [usize; 2],
        padding: [usize; 2],
        activation: Activation,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobEntry {
    layer: usize,
    name: String,
    encoding: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
    crc32: u32,
}

struct BlobWriter {
    buf: Vec<u8>,
    entries: Vec<BlobEntry>,
}

impl BlobWriter {
    fn push(&mut self, layer: usize, name: &str, encoding: &str, shape: Vec<usize>, bytes: Vec<u8>) {
        self.entries.push(BlobEntry {
            layer,
            name: name.to_string(),
            encoding: encoding.to_string(),
            shape,
            offset: self.buf.len() as u64,
            bytes: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
        self.buf.extend_from_slice(&bytes);
    }
}

fn floats<T: Scalar>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::BYTES);
    for &v in values {
        v.write_le(&mut out);
    }
    out
}

fn mask_bytes(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&m| u8::from(m)).collect()
}

/// Writes `net` into directory `dir`, creating it if needed.
pub fn save_model<T: Scalar>(net: &Network<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut w = BlobWriter {
        buf: Vec::new(),
        entries: Vec::new(),
    };
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        layers.push(match layer {
            Layer::Dense(d) => {
                w.push(i, "weights", T::DTYPE, d.weights.shape().to_vec(), floats(d.weights.data()));
                w.push(i, "bias", T::DTYPE, vec![d.bias.len()], floats(&d.bias));
                LayerEntry::Dense {
                    inputs: d.inputs(),
                    outputs: d.outputs(),
                    activation: d.activation,
                }
            }
            Layer::Conv(c) => {
                w.push(i, "weights", T::DTYPE, c.kernels.shape().to_vec(), floats(c.kernels.data()));
                w.push(i, "bias", T::DTYPE, vec![c.bias.len()], floats(&c.bias));
                LayerEntry::Conv {
                    in_channels: c.in_channels(),
                    out_channels: c.out_channels(),
                    kernel: c.kernel_size(),
                    stride: [c.geometry.stride.0, c.geometry.stride.1],
                    padding: [c.geometry.padding.0, c.geometry.padding.1],
                    activation: c.activation,
                }
            }
            Layer::MaxPool(p) => LayerEntry::MaxPool {
                window: p.window,
                stride: p.stride,
            },
            Layer::Flatten => LayerEntry::Flatten,
        });
    }
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Dense(d) => {
                w.push(i, "weight_mask", MASK_ENCODING, d.weights.shape().to_vec(), mask_bytes(&d.weight_mask));
                w.push(i, "bias_mask", MASK_ENCODING, vec![d.bias.len()], mask_bytes(&d.bias_mask));
            }
            Layer::Conv(c) => {
                let shape = vec![c.out_channels(), c.in_channels()];
                w.push(i, "weight_mask", MASK_ENCODING, shape, mask_bytes(&c.kernel_mask));
                w.push(i, "bias_mask", MASK_ENCODING, vec![c.bias.len()], mask_bytes(&c.bias_mask));
            }
            _ => {}
        }
    }

    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        dtype: T::DTYPE.to_string(),
        input_shape: net.input_shape().to_vec(),
        classes: net.classes(),
        layer_count: layers.len(),
        layers,
        blobs: w.entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    let manifest_path = dir.join(MODEL_MANIFEST_FILE);
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    let blob_path = dir.join(MODEL_BLOB_FILE);
    fs::write(&blob_path, &w.buf).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct BlobReader<'a> {
    blob: &'a [u8],
    entries: Vec<BlobEntry>,
}

impl BlobReader<'_> {
    fn take(&mut self, layer: usize, name: &str, encoding: &str, shape: &[usize]) -> Result<&[u8]> {
        let pos = self
            .entries
            .iter()
            .position(|e| e.layer == layer && e.name == name)
            .ok_or_else(|| format_err(format!("missing blob {name} for layer {layer}")))?;
        let e = self.entries.swap_remove(pos);
        if e.encoding != encoding {
            return Err(format_err(format!("blob {name} of layer {layer} has encoding {}", e.encoding)));
        }
        if e.shape != shape {
            return Err(format_err(format!(
                "blob {name} of layer {layer} has shape {:?}, layer implies {shape:?}",
                e.shape
            )));
        }
        let width = if encoding == MASK_ENCODING { 1 } else { encoding_width(encoding)? };
        let expected = shape.iter().product::<usize>() * width;
        if e.bytes as usize != expected {
            return Err(format_err(format!("blob {name} of layer {layer} has {} bytes, expected {expected}", e.bytes)));
        }
        let start = e.offset as usize;
        let end = start
            .checked_add(expected)
            .filter(|&end| end <= self.blob.len())
            .ok_or_else(|| format_err(format!("blob {name} of layer {layer} lies outside {MODEL_BLOB_FILE}")))?;
        let bytes = &self.blob[start..end];
        if crc32fast::hash(bytes) != e.crc32 {
            return Err(format_err(format!("checksum mismatch in blob {name} of layer {layer}")));
        }
        Ok(bytes)
    }

    fn floats<T: Scalar>(&mut self, layer: usize, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let bytes = self.take(layer, name, T::DTYPE, shape)?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn mask(&mut self, layer: usize, name: &str, shape: &[usize]) -> Result<Vec<bool>> {
        let bytes = self.take(layer, name, MASK_ENCODING, shape)?;
        bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(format_err(format!("mask byte {other} in {name} of layer {layer}"))),
            })
            .collect()
    }
}

fn encoding_width(encoding: &str) -> Result<usize> {
    match encoding {
        "f32le" => Ok(4),
        "f64le" => Ok(8),
        other => Err(format_err(format!("unknown encoding {other}"))),
    }
}

/// Reads a model directory written by [`save_model`].
pub fn load_model<T: Scalar>(dir: impl AsRef<Path>) -> Result<Network<T>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MODEL_MANIFEST_FILE);
    let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| format_err(format!("{}: {e}", manifest_path.display())))?;
    let blob_path = dir.join(MODEL_BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(format_err(format!(
            "unsupported model format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != T::DTYPE {
        return Err(format_err(format!(
            "model stored as {}, requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    if manifest.layer_count != manifest.layers.len() {
        return Err(format_err(format!(
            "manifest declares {} layers but lists {}",
            manifest.layer_count,
            manifest.layers.len()
        )));
    }
    let parametric = manifest
        .layers
        .iter()
        .filter(|l| matches!(l, LayerEntry::Dense { .. } | LayerEntry::Conv { .. }))
        .count();
    if manifest.blobs.len() != 4 * parametric {
        return Err(format_err(format!(
            "{parametric} parametric layers need {} blobs, manifest lists {}",
            4 * parametric,
            manifest.blobs.len()
        )));
    }

    let mut reader = BlobReader {
        blob: &blob,
        entries: manifest.blobs.clone(),
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        let layer = match *entry {
            LayerEntry::Dense {
                inputs,
                outputs,
                activation,
            } => {
                let shape = [outputs, inputs];
                let weights = reader.floats::<T>(i, "weights", &shape)?;
                let bias = reader.floats::<T>(i, "bias", &[outputs])?;
                let mut d = DenseLayer::new(Tensor::new(shape.to_vec(), weights)?, bias, activation)?;
                d.weight_mask = reader.mask(i, "weight_mask", &shape)?;
                d.bias_mask = reader.mask(i, "bias_mask", &[outputs])?;
                Layer::Dense(d)
            }
            LayerEntry::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                activation,
            } => {
                let shape = [out_channels, in_channels, kernel, kernel];
                let kernels = reader.floats::<T>(i, "weights", &shape)?;
                let bias = reader.floats::<T>(i, "bias", &[out_channels])?;
                let geometry = ConvGeometry::new((stride[0], stride[1]), (padding[0], padding[1]));
                let mut c = ConvLayer::new(Tensor::new(shape.to_vec(), kernels)?, bias, geometry, activation)?;
                c.kernel_mask = reader.mask(i, "weight_mask", &[out_channels, in_channels])?;
                c.bias_mask = reader.mask(i, "bias_mask", &[out_channels])?;
                Layer::Conv(c)
            }
            LayerEntry::MaxPool { window, stride } => Layer::MaxPool(MaxPool::new(window, stride)),
            LayerEntry::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    if let Some(extra) = reader.entries.first() {
        return Err(format_err(format!(
            "blob {} references layer {} which does not own it",
            extra.name, extra.layer
        )));
    }

    let net = Network::new(manifest.input_shape, layers).map_err(|e| format_err(e.to_string()))?;
    if net.classes() != manifest.classes {
        return Err(format_err(format!(
            "manifest declares {} classes, head has {}",
            manifest.classes,
            net.classes()
        )));
    }
    net.check_invariants().map_err(|e| format_err(e.to_string()))?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Prunable;
    use serde_json::Value;

    fn sample_net() -> Network<f32> {
        let conv = ConvLayer::new(
            Tensor::from_fn(vec![2, 1, 3, 3], |i| (i as f32 * 0.7).sin()),
            vec![0.1, -0.2],
            ConvGeometry::new((1, 1), (1, 1)),
            Activation::Relu,
        )
        .unwrap();
        let mut head = DenseLayer::new(
            Tensor::from_fn(vec![3, 2 * 2 * 2], |i| (i as f32 * 1.3).cos()),
            vec![0.0, 0.5, -0.5],
            Activation::Identity,
        )
        .unwrap();
        head.prune(1, &[0, 3, 8]).unwrap();
        Network::new(
            vec![1, 4, 4],
            vec![Layer::Conv(conv), Layer::MaxPool(MaxPool::new(2, 2)), Layer::Flatten, Layer::Dense(head)],
        )
        .unwrap()
    }

    fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Value)) {
        let path = dir.join(MODEL_MANIFEST_FILE);
        let mut v: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        f(&mut v);
        fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = sample_net();
        save_model(&net, dir.path()).unwrap();
        let back: Network<f32> = load_model(dir.path()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&sample_net(), dir.path()).unwrap();
        assert!(matches!(load_model::<f64>(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn missing_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&sample_net(), dir.path()).unwrap();
        edit_manifest(dir.path(), |v| {
            v["blobs"].as_array_mut().unwrap().pop();
        });
        assert!(matches!(load_model::<f32>(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn layer_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&sample_net(), dir.path()).unwrap();
        edit_manifest(dir.path(), |v| v["layer_count"] = Value::from(5));
        assert!(matches!(load_model::<f32>(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&sample_net(), dir.path()).unwrap();
        let path = dir.path().join(MODEL_BLOB_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        let err = load_model::<f32>(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn nonzero_masked_weight_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = sample_net();
        save_model(&net, dir.path()).unwrap();
        // head weight (1, 0) is masked; overwrite its stored value and fix the CRC
        let path = dir.path().join(MODEL_BLOB_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let mut blobs: Vec<BlobEntry> = {
            let v: Manifest = serde_json::from_slice(&fs::read(dir.path().join(MODEL_MANIFEST_FILE)).unwrap()).unwrap();
            v.blobs
        };
        let e = blobs.iter_mut().find(|e| e.layer == 3 && e.name == "weights").unwrap();
        let at = e.offset as usize + 8 * 4;
        bytes[at..at + 4].copy_from_slice(&1.0f32.to_le_bytes());
        e.crc32 = crc32fast::hash(&bytes[e.offset as usize..(e.offset + e.bytes) as usize]);
        let crc = e.crc32;
        fs::write(&path, bytes).unwrap();
        edit_manifest(dir.path(), |v| {
            for b in v["blobs"].as_array_mut().unwrap() {
                if b["layer"] == 3 && b["name"] == "weights" {
                    b["crc32"] = Value::from(crc);
                }
            }
        });
        let err = load_model::<f32>(dir.path()).unwrap_err();
        assert!(err.to_string().contains("masked parameter"), "{err}");
    }
}
