//! Single-file model checkpoints (format version 1).
//!
//! Layout: `b"SDCP"` magic, u32 LE format version, u64 LE header length, a
//! JSON header (topology, dropout config, section table, flags: including
//! the conv padding convention, logical −1), then the binary sections in
//! header order, each prefixed with its u64 LE byte length.
//!
//! Numeric payloads are raw little-endian: packed sign bits as u64 words,
//! everything else as f64. Text formats would mangle the bit planes; the
//! binary sections make save → load → eval bit-identical.
//!
//! The loader treats input as untrusted: every read is bounds-checked with
//! the byte offset reported on failure, and header-declared shapes are
//! capped before any allocation.

use crate::dropout::DropoutConfig;
use crate::error::{Error, Result};
use crate::model::{infer_shapes, Layer, Model, ModelSpec};
use crate::packed::PackedBinaryTensor;
use crate::tensor::RealTensor;
use crate::train::TrainHistory;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SDCP";
pub const FORMAT_VERSION: u32 = 1;
/// Upper bound on any single tensor in a checkpoint (elements).
pub const MAX_TENSOR_ELEMS: u64 = 1 << 24;
/// Upper bound on layer count.
pub const MAX_LAYERS: usize = 4096;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectionMeta {
    pub name: String,
    pub len_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnMeta {
    pub epsilon: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelSpec,
    pub dropout: DropoutConfig,
    /// Convolution padding convention baked into the weights: logical −1.
    pub conv_padding: String,
    pub norm_epsilon: f64,
    /// One entry per batch-norm layer, in model order.
    pub bn_meta: Vec<BnMeta>,
    pub has_proxy: bool,
    /// SHA-256 of the training-history CSV, if the model was trained here.
    pub history_digest: Option<String>,
    pub sections: Vec<SectionMeta>,
}

pub fn history_digest(history: &TrainHistory) -> String {
    let mut hasher = Sha256::new();
    hasher.update(history.to_csv().as_bytes());
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn f64s_to_bytes(vals: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn words_to_bytes(words: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(words.len() * 8);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn bytes_to_words(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Serializes a model (with its dropout config) to checkpoint bytes.
pub fn checkpoint_bytes(
    model: &Model,
    dropout: &DropoutConfig,
    history_digest: Option<String>,
    include_proxy: bool,
) -> Result<Vec<u8>> {
    let mut sections: Vec<(String, Vec<u8>)> = Vec::new();
    let mut bn_meta = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::BinaryConv(c) => {
                sections.push((format!("layer{i}.bits"), words_to_bytes(c.bits.words())));
                sections.push((format!("layer{i}.bias"), f64s_to_bytes(&c.bias)));
                sections.push((format!("layer{i}.alpha"), f64s_to_bytes(&c.scale.alpha)));
                if include_proxy {
                    if let Some(p) = &c.proxy {
                        sections.push((format!("layer{i}.proxy"), f64s_to_bytes(p.data())));
                    }
                }
            }
            Layer::BinaryLinear(l) => {
                sections.push((format!("layer{i}.bits"), words_to_bytes(l.bits.words())));
                sections.push((format!("layer{i}.bias"), f64s_to_bytes(&l.bias)));
                sections.push((format!("layer{i}.alpha"), f64s_to_bytes(&l.scale.alpha)));
                if include_proxy {
                    if let Some(p) = &l.proxy {
                        sections.push((format!("layer{i}.proxy"), f64s_to_bytes(p.data())));
                    }
                }
            }
            Layer::BatchNorm(p) => {
                bn_meta.push(BnMeta {
                    epsilon: p.epsilon,
                    momentum: p.momentum,
                });
                sections.push((format!("layer{i}.gamma"), f64s_to_bytes(&p.gamma)));
                sections.push((format!("layer{i}.beta"), f64s_to_bytes(&p.beta)));
                sections.push((
                    format!("layer{i}.running_mean"),
                    f64s_to_bytes(&p.running_mean),
                ));
                sections.push((
                    format!("layer{i}.running_var"),
                    f64s_to_bytes(&p.running_var),
                ));
            }
            _ => {}
        }
    }

    let has_proxy = include_proxy
        && model.layers.iter().any(|l| match l {
            Layer::BinaryConv(c) => c.proxy.is_some(),
            Layer::BinaryLinear(l) => l.proxy.is_some(),
            _ => false,
        });
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        model: model.spec(),
        dropout: dropout.clone(),
        conv_padding: "minus-one".to_string(),
        norm_epsilon: crate::norm::NORM_EPSILON,
        bn_meta,
        has_proxy,
        history_digest,
        sections: sections
            .iter()
            .map(|(name, payload)| SectionMeta {
                name: name.clone(),
                len_bytes: payload.len() as u64,
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::InvalidArgument(format!("header serialization: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, payload) in &sections {
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    dropout: &DropoutConfig,
    history_digest: Option<String>,
    include_proxy: bool,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, dropout, history_digest, include_proxy)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::MalformedFile {
            path: self.path.clone(),
            format: "checkpoint",
            offset: self.offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(self.err(format!(
                "truncated while reading {what} ({n} bytes wanted, {} left)",
                self.bytes.len() - self.offset
            )));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64_le(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Deserializes checkpoint bytes into a model. `path` is used only for
/// error messages.
pub fn load_checkpoint_bytes(
    bytes: &[u8],
    path: &Path,
) -> Result<(Model, DropoutConfig, CheckpointHeader)> {
    let mut r = Reader {
        bytes,
        offset: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::MalformedFile {
            path: r.path,
            format: "checkpoint",
            offset: 0,
            reason: format!("bad magic {magic:02x?}"),
        });
    }
    let version = r.u32_le("format version")?;
    if version != FORMAT_VERSION {
        return Err(r.err(format!("unsupported format version {version}")));
    }
    let header_len = r.u64_le("header length")? as usize;
    if header_len > 16 << 20 {
        return Err(r.err(format!("header length {header_len} is implausible")));
    }
    let header_bytes = r.take(header_len, "JSON header")?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| r.err(format!("header JSON: {e}")))?;

    validate_spec_sizes(&header.model).map_err(|e| r.err(e.to_string()))?;
    header.dropout.validate().map_err(|e| r.err(e.to_string()))?;
    let bn_layers = header
        .model
        .layers
        .iter()
        .filter(|l| matches!(l, crate::model::LayerSpec::BatchNorm))
        .count();
    if header.bn_meta.len() != bn_layers {
        return Err(r.err(format!(
            "{} batch-norm meta entries for {bn_layers} batch-norm layers",
            header.bn_meta.len()
        )));
    }

    // Build the skeleton, then overwrite every parameter from sections.
    let mut model = Model::build(&header.model, 0).map_err(|e| r.err(e.to_string()))?;
    let expected = expected_sections(&model, header.has_proxy);
    let declared: Vec<&str> = header.sections.iter().map(|s| s.name.as_str()).collect();
    let expected_names: Vec<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    if declared != expected_names {
        return Err(r.err(format!(
            "section table {declared:?} does not match topology {expected_names:?}"
        )));
    }

    let mut bn_seen = 0usize;
    for (meta, (name, elems)) in header.sections.iter().zip(&expected) {
        let want_bytes = if name.ends_with(".bits") {
            // packed words
            (*elems as u64).div_ceil(64) * 8
        } else {
            *elems as u64 * 8
        };
        if meta.len_bytes != want_bytes {
            return Err(r.err(format!(
                "section {name} declares {} bytes, topology wants {want_bytes}",
                meta.len_bytes
            )));
        }
        let len = r.u64_le("section length")?;
        if len != want_bytes {
            return Err(r.err(format!(
                "section {name} payload length {len} disagrees with header {want_bytes}"
            )));
        }
        let payload = r.take(len as usize, name)?;
        apply_section(&mut model, name, payload, &header, &mut bn_seen)
            .map_err(|e| r.err(e.to_string()))?;
    }
    if r.offset != bytes.len() {
        return Err(r.err(format!(
            "{} trailing bytes after the last section",
            bytes.len() - r.offset
        )));
    }
    if !header.has_proxy {
        model.freeze();
    }
    let dropout = header.dropout.clone();
    Ok((model, dropout, header))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, DropoutConfig, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    load_checkpoint_bytes(&bytes, path)
}

/// Shape guard for untrusted headers: checked arithmetic, per-tensor caps
/// on activations and weights, before anything is allocated.
fn validate_spec_sizes(spec: &ModelSpec) -> Result<()> {
    if spec.layers.is_empty() || spec.layers.len() > MAX_LAYERS {
        return Err(Error::InvalidArgument(format!(
            "{} layers outside 1..={MAX_LAYERS}",
            spec.layers.len()
        )));
    }
    let capped_volume = |dims: &[usize], what: &str| -> Result<u64> {
        let mut v: u64 = 1;
        for d in dims {
            v = v
                .checked_mul(*d as u64)
                .filter(|v| *v <= MAX_TENSOR_ELEMS)
                .ok_or_else(|| Error::InvalidArgument(format!("{what} too large")))?;
        }
        Ok(v)
    };
    capped_volume(&spec.input, "input shape")?;
    // Composition and the activation chain (checked internally).
    let shapes = infer_shapes(spec)?;
    for s in &shapes {
        capped_volume(s, "layer output")?;
    }
    // Weight volumes, using each layer's actual input shape.
    for (i, l) in spec.layers.iter().enumerate() {
        let in_shape = if i == 0 { &spec.input } else { &shapes[i - 1] };
        match l {
            crate::model::LayerSpec::BinaryConv { c_out, kernel, .. } => {
                let c_in = *in_shape.last().unwrap_or(&0);
                capped_volume(&[*c_out, c_in, *kernel, *kernel], "conv weight")?;
            }
            crate::model::LayerSpec::BinaryLinear { out_features } => {
                capped_volume(&[*out_features, in_shape[0]], "linear weight")?;
            }
            _ => {}
        }
    }
    Ok(())
}

/// Section names and element counts in serialization order.
fn expected_sections(model: &Model, has_proxy: bool) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::BinaryConv(c) => {
                let weights = c.kernel * c.kernel * c.c_in * c.c_out;
                out.push((format!("layer{i}.bits"), weights));
                out.push((format!("layer{i}.bias"), c.c_out));
                out.push((format!("layer{i}.alpha"), c.c_out));
                if has_proxy {
                    out.push((format!("layer{i}.proxy"), weights));
                }
            }
            Layer::BinaryLinear(l) => {
                let weights = l.in_features * l.out_features;
                out.push((format!("layer{i}.bits"), weights));
                out.push((format!("layer{i}.bias"), l.out_features));
                out.push((format!("layer{i}.alpha"), l.out_features));
                if has_proxy {
                    out.push((format!("layer{i}.proxy"), weights));
                }
            }
            Layer::BatchNorm(p) => {
                let c = p.channels();
                out.push((format!("layer{i}.gamma"), c));
                out.push((format!("layer{i}.beta"), c));
                out.push((format!("layer{i}.running_mean"), c));
                out.push((format!("layer{i}.running_var"), c));
            }
            _ => {}
        }
    }
    out
}

fn apply_section(
    model: &mut Model,
    name: &str,
    payload: &[u8],
    header: &CheckpointHeader,
    bn_seen: &mut usize,
) -> Result<()> {
    let idx: usize = name
        .strip_prefix("layer")
        .and_then(|s| s.split('.').next())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::InvalidArgument(format!("bad section name {name}")))?;
    let field = name.split('.').nth(1).unwrap_or("");
    let layer = &mut model.layers[idx];
    match (layer, field) {
        (Layer::BinaryConv(c), "bits") => {
            c.bits = PackedBinaryTensor::from_words(
                vec![c.kernel, c.kernel, c.c_in, c.c_out],
                bytes_to_words(payload),
            )?;
        }
        (Layer::BinaryConv(c), "bias") => c.bias = bytes_to_f64s(payload),
        (Layer::BinaryConv(c), "alpha") => c.scale.alpha = bytes_to_f64s(payload),
        (Layer::BinaryConv(c), "proxy") => {
            c.proxy = Some(RealTensor::new(
                vec![c.c_out, c.c_in, c.kernel, c.kernel],
                bytes_to_f64s(payload),
            )?)
        }
        (Layer::BinaryLinear(l), "bits") => {
            l.bits = PackedBinaryTensor::from_words(
                vec![l.out_features, l.in_features],
                bytes_to_words(payload),
            )?;
        }
        (Layer::BinaryLinear(l), "bias") => l.bias = bytes_to_f64s(payload),
        (Layer::BinaryLinear(l), "alpha") => l.scale.alpha = bytes_to_f64s(payload),
        (Layer::BinaryLinear(l), "proxy") => {
            l.proxy = Some(RealTensor::new(
                vec![l.out_features, l.in_features],
                bytes_to_f64s(payload),
            )?)
        }
        (Layer::BatchNorm(p), field) => {
            match field {
                "gamma" => {
                    // first field of this BN layer: apply its meta
                    let meta = &header.bn_meta[*bn_seen];
                    if !(meta.epsilon.is_finite() && meta.epsilon > 0.0)
                        || !meta.momentum.is_finite()
                    {
                        return Err(Error::InvalidArgument(
                            "bad batch-norm meta".to_string(),
                        ));
                    }
                    p.epsilon = meta.epsilon;
                    p.momentum = meta.momentum;
                    *bn_seen += 1;
                    p.gamma = bytes_to_f64s(payload);
                }
                "beta" => p.beta = bytes_to_f64s(payload),
                "running_mean" => p.running_mean = bytes_to_f64s(payload),
                "running_var" => {
                    p.running_var = bytes_to_f64s(payload);
                    p.validate()?;
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown batch-norm section {name}"
                    )))
                }
            }
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "section {name} does not match layer {idx}"
            )))
        }
    }
    Ok(())
}
