//! Network graph data model and batch-norm folding.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::validate_bits;
use crate::tensor::Tensor;

/// Name by which layers refer to the graph input.
pub const GRAPH_INPUT: &str = "input";

/// Supported primitive layer kinds and their static attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
    },
    Relu,
    Sigmoid,
    Softmax,
    Add,
    Concat,
    Flatten,
    AvgPool {
        kernel: usize,
        stride: usize,
    },
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Softmax => "softmax",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::Flatten => "flatten",
            LayerKind::AvgPool { .. } => "avg_pool",
        }
    }
}

/// Inference-mode batch-norm statistics, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Per-channel `(scale, shift)` of the equivalent affine map.
    pub fn affine(&self, eps: f64) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + eps).sqrt())
            .collect();
        let shift = scale
            .iter()
            .zip(self.beta.iter().zip(&self.mean))
            .map(|(s, (b, m))| b - s * m)
            .collect();
        (scale, shift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Predecessor layer names, or [`GRAPH_INPUT`].
    pub inputs: Vec<String>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub batch_norm: Option<BatchNormParams>,
    pub bits_weight: u32,
    pub bits_activation: u32,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weight: None,
            bias: None,
            batch_norm: None,
            bits_weight: 32,
            bits_activation: 32,
        }
    }

    pub fn with_weight(mut self, weight: Tensor) -> Self {
        self.weight = Some(weight);
        self
    }

    pub fn with_bias(mut self, bias: Tensor) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_batch_norm(mut self, bn: BatchNormParams) -> Self {
        self.batch_norm = Some(bn);
        self
    }

    pub fn with_bits(mut self, weight: u32, activation: u32) -> Self {
        self.bits_weight = weight;
        self.bits_activation = activation;
        self
    }

    pub fn is_weighted(&self) -> bool {
        self.kind.is_weighted()
    }

    /// Number of output channels of a weighted layer.
    pub fn channels(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Dense { out_features, .. } => Some(out_features),
            LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }
}

/// A validated, topologically ordered network. The last layer is the output.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    comparison_points: Vec<String>,
    shapes: Vec<Vec<usize>>,
    index: BTreeMap<String, usize>,
}

impl NetworkGraph {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        comparison_points: Vec<String>,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidGraph(format!("bad input shape {input_shape:?}")));
        }
        if layers.is_empty() {
            return Err(Error::InvalidGraph("graph has no layers".into()));
        }
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        let mut consumed = BTreeSet::new();
        for (i, layer) in layers.iter().enumerate() {
            if layer.name == GRAPH_INPUT || index.contains_key(&layer.name) {
                return Err(Error::layer(&layer.name, "duplicate or reserved layer name"));
            }
            validate_bits(layer.bits_weight).map_err(|e| Error::layer(&layer.name, e.to_string()))?;
            validate_bits(layer.bits_activation)
                .map_err(|e| Error::layer(&layer.name, e.to_string()))?;
            let mut in_shapes = Vec::with_capacity(layer.inputs.len());
            for src in &layer.inputs {
                if src == GRAPH_INPUT {
                    in_shapes.push(input_shape.clone());
                } else if let Some(&j) = index.get(src) {
                    in_shapes.push(shapes[j].clone());
                    consumed.insert(j);
                } else {
                    return Err(Error::layer(
                        &layer.name,
                        format!("input `{src}` is not an earlier layer"),
                    ));
                }
            }
            let shape = infer_shape(layer, &in_shapes).map_err(|m| Error::layer(&layer.name, m))?;
            for (what, t) in [("weight", &layer.weight), ("bias", &layer.bias)] {
                if let Some(t) = t {
                    t.check_finite(&format!("{what} of layer `{}`", layer.name))?;
                }
            }
            index.insert(layer.name.clone(), i);
            shapes.push(shape);
        }
        for i in 0..layers.len() - 1 {
            if !consumed.contains(&i) {
                return Err(Error::layer(
                    &layers[i].name,
                    "output is never consumed; graph must have a single output",
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for cp in &comparison_points {
            if !index.contains_key(cp) {
                return Err(Error::InvalidGraph(format!(
                    "comparison point `{cp}` is not a layer"
                )));
            }
            if !seen.insert(cp) {
                return Err(Error::InvalidGraph(format!("duplicate comparison point `{cp}`")));
            }
        }
        Ok(Self {
            input_shape,
            layers,
            comparison_points,
            shapes,
            index,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    pub fn output_name(&self) -> &str {
        &self.layers.last().expect("non-empty").name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn comparison_points(&self) -> &[String] {
        &self.comparison_points
    }

    pub fn is_comparison_point(&self, name: &str) -> bool {
        self.comparison_points.iter().any(|c| c == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layer_index(name).map(|i| &self.layers[i])
    }

    /// Unbatched output shape of a layer.
    pub fn layer_shape(&self, name: &str) -> Option<&[usize]> {
        self.layer_index(name).map(|i| self.shapes[i].as_slice())
    }

    /// Weighted layers in order; position `k` is layer index `ℓ = k + 1`.
    pub fn weighted_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_weighted())
    }

    pub fn num_weighted(&self) -> usize {
        self.weighted_layers().count()
    }

    /// Returns a copy with mutated layers, re-validated.
    pub fn map_layers(&self, f: impl FnMut(&mut LayerSpec)) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers.iter_mut().for_each(f);
        Self::new(self.input_shape.clone(), layers, self.comparison_points.clone())
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<LayerSpec>, Vec<String>) {
        (self.input_shape, self.layers, self.comparison_points)
    }

    /// Number of layers that consume `name`.
    fn consumers(&self, name: &str) -> usize {
        self.layers
            .iter()
            .map(|l| l.inputs.iter().filter(|s| *s == name).count())
            .sum()
    }
}

fn infer_shape(layer: &LayerSpec, inputs: &[Vec<usize>]) -> std::result::Result<Vec<usize>, String> {
    let arity_one = || -> std::result::Result<&Vec<usize>, String> {
        match inputs {
            [one] => Ok(one),
            _ => Err(format!("expects 1 input, got {}", inputs.len())),
        }
    };
    let expect_tensor = |t: &Option<Tensor>, what: &str, shape: &[usize]| match t {
        Some(t) if t.shape() == shape => Ok(()),
        Some(t) => Err(format!("{what} shape {:?}, expected {shape:?}", t.shape())),
        None => Err(format!("missing {what}")),
    };
    match &layer.kind {
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            let x = arity_one()?;
            if x != &vec![*in_features] {
                return Err(format!("input shape {x:?}, expected [{in_features}]"));
            }
            expect_tensor(&layer.weight, "weight", &[*out_features, *in_features])?;
            if layer.bias.is_some() {
                expect_tensor(&layer.bias, "bias", &[*out_features])?;
            }
            Ok(vec![*out_features])
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        } => {
            let x = arity_one()?;
            if x.len() != 3 || x[0] != *in_channels {
                return Err(format!("input shape {x:?}, expected [{in_channels}, H, W]"));
            }
            if *stride == 0 || *kernel == 0 {
                return Err("kernel and stride must be positive".into());
            }
            expect_tensor(
                &layer.weight,
                "weight",
                &[*out_channels, *in_channels, *kernel, *kernel],
            )?;
            if layer.bias.is_some() {
                expect_tensor(&layer.bias, "bias", &[*out_channels])?;
            }
            let out = |d: usize| (d + 2 * pad).checked_sub(*kernel).map(|v| v / stride + 1);
            match (out(x[1]), out(x[2])) {
                (Some(h), Some(w)) => Ok(vec![*out_channels, h, w]),
                _ => Err(format!("kernel {kernel} larger than padded input {x:?}")),
            }
        }
        LayerKind::BatchNorm { channels, eps } => {
            let x = arity_one()?;
            if x.first() != Some(channels) {
                return Err(format!("input shape {x:?} does not have {channels} channels"));
            }
            if !(*eps >= 0.0) {
                return Err(format!("eps {eps} must be non-negative"));
            }
            let bn = layer
                .batch_norm
                .as_ref()
                .ok_or_else(|| "missing batch-norm statistics".to_string())?;
            for (what, v) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)] {
                if v.len() != *channels {
                    return Err(format!("{what} has {} entries, expected {channels}", v.len()));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(format!("{what} is not finite"));
                }
            }
            if bn.var.iter().any(|v| v + eps <= 0.0) {
                return Err("variance + eps must be positive".into());
            }
            Ok(x.clone())
        }
        LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Softmax => Ok(arity_one()?.clone()),
        LayerKind::Flatten => Ok(vec![arity_one()?.iter().product()]),
        LayerKind::AvgPool { kernel, stride } => {
            let x = arity_one()?;
            if x.len() != 3 || *kernel == 0 || *stride == 0 || *kernel > x[1] || *kernel > x[2] {
                return Err(format!("cannot pool {x:?} with kernel {kernel}"));
            }
            Ok(vec![x[0], (x[1] - kernel) / stride + 1, (x[2] - kernel) / stride + 1])
        }
        LayerKind::Add => match inputs {
            [a, b] if a == b => Ok(a.clone()),
            [a, b] => Err(format!("cannot add {a:?} and {b:?}")),
            _ => Err(format!("add expects 2 inputs, got {}", inputs.len())),
        },
        LayerKind::Concat => {
            let first = inputs.first().ok_or("concat needs inputs")?;
            let mut channels = 0;
            for s in inputs {
                if s.len() != first.len() || s[1..] != first[1..] {
                    return Err(format!("cannot concatenate {first:?} and {s:?}"));
                }
                channels += s[0];
            }
            let mut out = first.clone();
            out[0] = channels;
            Ok(out)
        }
    }
}

/// Folds every batch norm into the Dense/Conv2d layer feeding it.
///
/// The folded layer takes the batch norm's place in the layer order and
/// references to the batch norm are redirected to it.
pub fn fold_batchnorm(graph: &NetworkGraph) -> Result<NetworkGraph> {
    if !graph
        .layers()
        .iter()
        .any(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
    {
        return Ok(graph.clone());
    }
    let mut layers: Vec<Option<LayerSpec>> = graph.layers().iter().cloned().map(Some).collect();
    let mut renames: BTreeMap<String, String> = BTreeMap::new();
    for i in 0..layers.len() {
        let Some(bn_layer) = layers[i].clone() else { continue };
        let LayerKind::BatchNorm { eps, .. } = bn_layer.kind else { continue };
        let pred_name = &bn_layer.inputs[0];
        let pred_idx = graph
            .layer_index(pred_name)
            .filter(|&j| graph.layers()[j].is_weighted())
            .filter(|_| graph.consumers(pred_name) == 1)
            .ok_or_else(|| {
                Error::layer(
                    &bn_layer.name,
                    "batch norm must directly follow a Dense/Conv2d layer used only by it",
                )
            })?;
        let mut pred = layers[pred_idx]
            .take()
            .ok_or_else(|| Error::layer(&bn_layer.name, "predecessor already folded"))?;
        let bn = bn_layer.batch_norm.as_ref().expect("validated");
        let (scale, _) = bn.affine(eps);
        let weight = pred.weight.as_mut().expect("weighted layer has weight");
        let inner = weight.len() / scale.len();
        for (k, w) in weight.data_mut().iter_mut().enumerate() {
            *w *= scale[k / inner];
        }
        let bias: Vec<f64> = (0..scale.len())
            .map(|c| {
                let b = pred.bias.as_ref().map_or(0.0, |b| b.data()[c]);
                scale[c] * (b - bn.mean[c]) + bn.beta[c]
            })
            .collect();
        pred.bias = Some(Tensor::vector(bias));
        pred.bits_activation = bn_layer.bits_activation;
        renames.insert(bn_layer.name.clone(), pred.name.clone());
        layers[i] = Some(pred);
    }
    let resolve = |name: &String| renames.get(name).cloned().unwrap_or_else(|| name.clone());
    let mut out_layers: Vec<LayerSpec> = layers.into_iter().flatten().collect();
    for l in &mut out_layers {
        l.inputs = l.inputs.iter().map(resolve).collect();
    }
    let mut cps: Vec<String> = Vec::new();
    for cp in graph.comparison_points() {
        let r = resolve(cp);
        if !cps.contains(&r) {
            cps.push(r);
        }
    }
    NetworkGraph::new(graph.input_shape().to_vec(), out_layers, cps)
}
