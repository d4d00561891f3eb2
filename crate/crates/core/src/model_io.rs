//! Model files: a JSON manifest (`.eptq.json`) plus a weight blob (`.eptq.bin`).
//!
//! The blob starts with the magic `EPTQW001` followed by little-endian `f64`
//! values. Tensors appear in manifest order: layer by layer, and within a
//! layer in the order of its `tensors` list.
//!
//! Quantized layers store `weight_codes` (integers, exact in `f64`) and a
//! per-channel `weight_scale` instead of `weight`; loading rebuilds the
//! dequantized weight and the matching [`QuantState`] without re-running any
//! quantizer search.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{QuantState, RoundingMode};
use crate::graph::{BatchNormParams, LayerKind, LayerSpec, NetworkGraph};
use crate::quant::{self, ActQuantParams, WeightQuantParams};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"EPTQW001";
pub const MODEL_FORMAT: &str = "eptq-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    weights: String,
    input_shape: Vec<usize>,
    comparison_points: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    #[serde(flatten)]
    kind: LayerKind,
    inputs: Vec<String>,
    bits_weight: u32,
    bits_activation: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act_quant: Option<ActQuantParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Weight,
    Bias,
    WeightCodes,
    WeightScale,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    role: Role,
    shape: Vec<usize>,
}

/// A loaded model and, for quantized files, its stored quantization.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub graph: NetworkGraph,
    pub quant: Option<QuantState>,
    pub config_hash: Option<String>,
}

/// Blob path that pairs with a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    let name = manifest
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".eptq.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(&name);
    manifest.with_file_name(format!("{stem}.eptq.bin"))
}

/// Loads and validates a model; quantized files load with dequantized weights.
pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    Ok(load_model_full(path)?.graph)
}

pub fn load_model_full(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    if manifest.format != MODEL_FORMAT || manifest.version != MODEL_VERSION {
        return Err(Error::Parse {
            location: path.display().to_string(),
            message: format!("unsupported format {} v{}", manifest.format, manifest.version),
        });
    }
    let blob_file = path.with_file_name(&manifest.weights);
    let blob = std::fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    if blob.len() < 8 || &blob[..8] != WEIGHTS_MAGIC {
        return Err(Error::Parse {
            location: blob_file.display().to_string(),
            message: "bad weight blob magic, expected EPTQW001".into(),
        });
    }
    let mut offset = 8;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut state = QuantState {
        rounding: RoundingMode::Nearest,
        ..QuantState::default()
    };
    let mut any_quant = false;
    for ml in &manifest.layers {
        let mut tensors: BTreeMap<Role, Tensor> = BTreeMap::new();
        for entry in &ml.tensors {
            let n: usize = entry.shape.iter().product();
            let bytes = n * 8;
            if blob.len() < offset + bytes {
                return Err(Error::layer(
                    &ml.name,
                    format!(
                        "weight blob truncated: {:?} needs {bytes} bytes at offset {offset}, blob has {} bytes",
                        entry.role,
                        blob.len()
                    ),
                ));
            }
            let data = blob[offset..offset + bytes]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            offset += bytes;
            let t = Tensor::new_finite(entry.shape.clone(), data, &format!("layer `{}`", ml.name))
                .map_err(|e| Error::layer(&ml.name, e.to_string()))?;
            if tensors.insert(entry.role, t).is_some() {
                return Err(Error::layer(&ml.name, format!("duplicate tensor {:?}", entry.role)));
            }
        }
        let mut layer = LayerSpec {
            name: ml.name.clone(),
            kind: ml.kind.clone(),
            inputs: ml.inputs.clone(),
            weight: tensors.remove(&Role::Weight),
            bias: tensors.remove(&Role::Bias),
            batch_norm: None,
            bits_weight: ml.bits_weight,
            bits_activation: ml.bits_activation,
        };
        if let (Some(codes), Some(scale)) = (
            tensors.remove(&Role::WeightCodes),
            tensors.remove(&Role::WeightScale),
        ) {
            if layer.weight.is_some() {
                return Err(Error::layer(&ml.name, "both float and quantized weights stored"));
            }
            if codes.rank() == 0 || scale.rank() != 1 || codes.shape()[0] != scale.len() {
                return Err(Error::layer(&ml.name, "weight codes and scales disagree"));
            }
            if scale.data().iter().any(|s| !(*s > 0.0)) {
                return Err(Error::layer(&ml.name, "non-positive weight scale"));
            }
            let (qmin, qmax) = quant::code_range(ml.bits_weight.min(16));
            if codes
                .data()
                .iter()
                .any(|c| c.fract() != 0.0 || *c < qmin || *c > qmax)
            {
                return Err(Error::layer(&ml.name, "weight codes off the integer grid"));
            }
            layer.weight = Some(quant::codes_to_values(codes.data(), scale.data(), codes.shape()));
            let thresholds = quant::steps_to_thresholds(scale.data(), ml.bits_weight);
            state.weights.insert(ml.name.clone(), WeightQuantParams::new(thresholds, ml.bits_weight)?);
            any_quant = true;
        }
        if matches!(ml.kind, LayerKind::BatchNorm { .. }) {
            let mut take = |r: Role| {
                tensors
                    .remove(&r)
                    .map(|t| t.into_data())
                    .ok_or_else(|| Error::layer(&ml.name, format!("missing {r:?}")))
            };
            layer.batch_norm = Some(BatchNormParams {
                gamma: take(Role::BnGamma)?,
                beta: take(Role::BnBeta)?,
                mean: take(Role::BnMean)?,
                var: take(Role::BnVar)?,
            });
        }
        if let Some(role) = tensors.keys().next() {
            return Err(Error::layer(&ml.name, format!("unexpected tensor {role:?}")));
        }
        if let Some(a) = ml.act_quant {
            let a = ActQuantParams::new(a.lo, a.hi, a.bits).map_err(|e| Error::layer(&ml.name, e.to_string()))?;
            state.activations.insert(ml.name.clone(), a);
            any_quant = true;
        }
        layers.push(layer);
    }
    if offset != blob.len() {
        return Err(Error::Parse {
            location: blob_file.display().to_string(),
            message: format!("{} unused trailing bytes in weight blob", blob.len() - offset),
        });
    }
    let graph = NetworkGraph::new(manifest.input_shape, layers, manifest.comparison_points)?;
    Ok(LoadedModel {
        graph,
        quant: any_quant.then_some(state),
        config_hash: manifest.config_hash,
    })
}

/// Writes a float model.
pub fn save_model(graph: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    write_model(graph, None, None, path.as_ref())
}

/// Writes a quantized model with integer codes and per-channel scales.
///
/// Weights are encoded with the state's rounding mode (soft rounding is
/// snapped to hard).
pub fn save_quantized_model(
    graph: &NetworkGraph,
    state: &QuantState,
    config_hash: Option<&str>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_model(graph, Some(state), config_hash, path.as_ref())
}

fn push(blob: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, role: Role, t: &Tensor) {
    entries.push(TensorEntry {
        role,
        shape: t.shape().to_vec(),
    });
    for v in t.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_model(graph: &NetworkGraph, state: Option<&QuantState>, config_hash: Option<&str>, path: &Path) -> Result<()> {
    if let Some(s) = state {
        s.check_covers(graph)?;
    }
    let blob_file = blob_path(path);
    let mut blob = WEIGHTS_MAGIC.to_vec();
    let mut layers = Vec::new();
    for layer in graph.layers() {
        let mut entries = Vec::new();
        if let Some(w) = &layer.weight {
            match state.and_then(|s| s.weights.get(&layer.name).map(|p| (s, p))) {
                Some((s, p)) if p.is_quantized() => {
                    let steps = p.steps();
                    let codes = match (&p.rounding, s.rounding) {
                        (Some(v), RoundingMode::Soft | RoundingMode::Hard) => {
                            quant::soft_codes(w, v, &p.rounding_steps(), p.bits, true)
                        }
                        _ => quant::nearest_codes(w, &steps, p.bits),
                    };
                    let codes = Tensor::new(w.shape().to_vec(), codes)?;
                    push(&mut blob, &mut entries, Role::WeightCodes, &codes);
                    push(&mut blob, &mut entries, Role::WeightScale, &Tensor::vector(steps));
                }
                _ => push(&mut blob, &mut entries, Role::Weight, w),
            }
        }
        let bias = state
            .and_then(|s| s.biases.get(&layer.name))
            .or(layer.bias.as_ref());
        if let Some(b) = bias {
            push(&mut blob, &mut entries, Role::Bias, b);
        }
        if let Some(bn) = &layer.batch_norm {
            for (role, v) in [
                (Role::BnGamma, &bn.gamma),
                (Role::BnBeta, &bn.beta),
                (Role::BnMean, &bn.mean),
                (Role::BnVar, &bn.var),
            ] {
                push(&mut blob, &mut entries, role, &Tensor::vector(v.clone()));
            }
        }
        let bits_weight = state
            .and_then(|s| s.weights.get(&layer.name))
            .map_or(layer.bits_weight, |p| p.bits);
        let act_quant = state
            .and_then(|s| s.activations.get(&layer.name))
            .copied()
            .filter(|a| a.is_quantized());
        layers.push(ManifestLayer {
            name: layer.name.clone(),
            kind: layer.kind.clone(),
            inputs: layer.inputs.clone(),
            bits_weight,
            bits_activation: act_quant.map_or(layer.bits_activation, |a| a.bits),
            tensors: entries,
            act_quant,
        });
    }
    let manifest = Manifest {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        weights: blob_file
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default(),
        input_shape: graph.input_shape().to_vec(),
        comparison_points: graph.comparison_points().to_vec(),
        config_hash: config_hash.map(str::to_string),
        layers,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    std::fs::write(&blob_file, blob).map_err(|e| Error::io(&blob_file, e))
}
