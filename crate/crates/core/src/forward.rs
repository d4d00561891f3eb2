//! Network evaluation on a [`Tape`], float or quantized.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph, GRAPH_INPUT};
use crate::quant::{ActQuantParams, WeightQuantParams};
use crate::tape::{BlendWeight, Op, Tape, TensorId};
use crate::tensor::{Matrix, Tensor};

/// Largest target the finite-difference oracles accept.
pub const ORACLE_LIMIT: usize = 512;

/// How weights with rounding variables are quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoundingMode {
    /// Round-to-nearest; rounding variables are ignored.
    #[default]
    Nearest,
    /// Rectified-sigmoid rounding, differentiable in `v`.
    Soft,
    /// `v >= 0` rounds up.
    Hard,
}

/// Mixing of float and quantized activations at comparison points.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ActMix {
    /// Fully quantized activations.
    #[default]
    Off,
    /// `P * z + (1 - P) * Q(z)` with a per-layer fraction `P`.
    Linear(BTreeMap<String, f64>),
    /// Each element stays float with probability `P`.
    Stochastic {
        fractions: BTreeMap<String, f64>,
        seed: u64,
    },
}

/// Quantization parameters for every quantized layer of a graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantState {
    pub weights: BTreeMap<String, WeightQuantParams>,
    /// Bias replacements, e.g. after bias optimization.
    pub biases: BTreeMap<String, Tensor>,
    pub activations: BTreeMap<String, ActQuantParams>,
    pub rounding: RoundingMode,
    pub mix: ActMix,
}

impl QuantState {
    /// Copy with [`ActMix::Off`] and the given rounding mode.
    pub fn with_rounding(&self, rounding: RoundingMode) -> Self {
        Self {
            rounding,
            mix: ActMix::Off,
            ..self.clone()
        }
    }

    /// Checks that every quantizable layer has parameters.
    pub fn check_covers(&self, graph: &NetworkGraph) -> Result<()> {
        for layer in graph.weighted_layers() {
            if layer.bits_weight == crate::quant::UNQUANTIZED_BITS {
                continue;
            }
            let p = self
                .weights
                .get(&layer.name)
                .ok_or_else(|| Error::layer(&layer.name, "no weight quantization parameters"))?;
            if Some(p.thresholds.len()) != layer.channels() {
                return Err(Error::layer(&layer.name, "threshold count differs from channels"));
            }
            if let Some(v) = &p.rounding {
                if Some(v.shape()) != layer.weight.as_ref().map(|w| w.shape()) {
                    return Err(Error::layer(&layer.name, "rounding variables do not match weight"));
                }
            }
        }
        for cp in graph.comparison_points() {
            let layer = graph.layer(cp).expect("validated");
            if layer.bits_activation != crate::quant::UNQUANTIZED_BITS
                && !self.activations.contains_key(cp)
            {
                return Err(Error::layer(cp, "no activation quantization parameters"));
            }
        }
        Ok(())
    }
}

/// A recorded forward pass with handles to every interesting tensor.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub tape: Tape,
    pub input: TensorId,
    pub output: TensorId,
    /// Output of every layer, in layer order.
    pub layer_outputs: Vec<TensorId>,
    /// Comparison-point activations (after activation quantization).
    pub activations: BTreeMap<String, TensorId>,
    pub weights: BTreeMap<String, TensorId>,
    pub biases: BTreeMap<String, TensorId>,
    pub steps: BTreeMap<String, TensorId>,
    pub roundings: BTreeMap<String, TensorId>,
}

impl Recorded {
    pub fn output_value(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    pub fn activation(&self, name: &str) -> Option<&Tensor> {
        self.activations.get(name).map(|id| self.tape.value(*id))
    }

    pub fn resolve(&self, graph: &NetworkGraph, target: &Target) -> Result<TensorId> {
        let missing = |what: &str, name: &str| Error::layer(name, format!("no {what} on tape"));
        match target {
            Target::Input => Ok(self.input),
            Target::Weight(n) => self.weights.get(n).copied().ok_or_else(|| missing("weight", n)),
            Target::Bias(n) => self.biases.get(n).copied().ok_or_else(|| missing("bias", n)),
            Target::Activation(n) => graph
                .layer_index(n)
                .map(|i| self.layer_outputs[i])
                .ok_or_else(|| missing("activation", n)),
        }
    }
}

/// A differentiable tensor of a network.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Input,
    Weight(String),
    Bias(String),
    /// Output of the named layer.
    Activation(String),
}

/// Adds a batch axis when `input` is a single sample.
pub fn as_batch(graph: &NetworkGraph, input: &Tensor) -> Result<Tensor> {
    if input.shape() == graph.input_shape() {
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        return input.clone().reshape(shape);
    }
    if input.rank() == graph.input_shape().len() + 1 && &input.shape()[1..] == graph.input_shape() {
        return Ok(input.clone());
    }
    Err(Error::Shape(format!(
        "input {:?} does not match graph input {:?}",
        input.shape(),
        graph.input_shape()
    )))
}

/// Evaluates the network on a batch (or single sample) while recording a tape.
///
/// Without `quant` this is the float network. With `quant`, weights are
/// quantized per layer and comparison-point activations pass through the
/// activation quantizer and the configured [`ActMix`].
pub fn forward_record(graph: &NetworkGraph, input: &Tensor, quant: Option<&QuantState>) -> Result<Recorded> {
    let batch = as_batch(graph, input)?;
    batch.check_finite("model input")?;
    if let Some(q) = quant {
        q.check_covers(graph)?;
    }
    let mut tape = Tape::new();
    let input_id = tape.leaf(batch);
    let mut layer_outputs: Vec<TensorId> = Vec::with_capacity(graph.layers().len());
    let mut rec = Recorded {
        tape: Tape::new(),
        input: input_id,
        output: input_id,
        layer_outputs: Vec::new(),
        activations: BTreeMap::new(),
        weights: BTreeMap::new(),
        biases: BTreeMap::new(),
        steps: BTreeMap::new(),
        roundings: BTreeMap::new(),
    };
    for (li, layer) in graph.layers().iter().enumerate() {
        let srcs: Vec<TensorId> = layer
            .inputs
            .iter()
            .map(|s| {
                if s == GRAPH_INPUT {
                    input_id
                } else {
                    layer_outputs[graph.layer_index(s).expect("validated")]
                }
            })
            .collect();
        let x = srcs[0];
        let mut y = match &layer.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                let w = record_weight(&mut tape, &mut rec, layer, quant)?;
                let mut y = match layer.kind {
                    LayerKind::Conv2d { stride, pad, .. } => {
                        tape.record(Op::Conv2d { x, w, stride, pad })?
                    }
                    _ => tape.record(Op::Dense { x, w })?,
                };
                let bias = quant
                    .and_then(|q| q.biases.get(&layer.name))
                    .or(layer.bias.as_ref());
                if let Some(b) = bias {
                    let b = tape.leaf(b.clone());
                    rec.biases.insert(layer.name.clone(), b);
                    y = tape.record(Op::BiasAdd { x: y, b })?;
                }
                y
            }
            LayerKind::BatchNorm { eps, .. } => {
                let (scale, shift) = layer.batch_norm.as_ref().expect("validated").affine(*eps);
                tape.record(Op::Affine { x, scale, shift })?
            }
            LayerKind::Relu => tape.record(Op::Relu { x })?,
            LayerKind::Sigmoid => tape.record(Op::Sigmoid { x })?,
            LayerKind::Softmax => tape.record(Op::Softmax { x })?,
            LayerKind::Add => tape.record(Op::Add { a: srcs[0], b: srcs[1] })?,
            LayerKind::Concat => tape.record(Op::Concat { inputs: srcs.clone() })?,
            LayerKind::Flatten => tape.record(Op::Flatten { x })?,
            LayerKind::AvgPool { kernel, stride } => tape.record(Op::AvgPool {
                x,
                kernel: *kernel,
                stride: *stride,
            })?,
        };
        if graph.is_comparison_point(&layer.name) {
            if let Some(params) = quant.and_then(|q| q.activations.get(&layer.name)) {
                if params.is_quantized() {
                    let q = tape.record(Op::ActQuant { x: y, params: *params })?;
                    y = mix_activation(&mut tape, y, q, li, &layer.name, quant.expect("present"))?;
                }
            }
            rec.activations.insert(layer.name.clone(), y);
        }
        layer_outputs.push(y);
    }
    let out = *layer_outputs.last().expect("non-empty graph");
    tape.set_output(out);
    rec.output = out;
    rec.layer_outputs = layer_outputs;
    rec.tape = tape;
    Ok(rec)
}

fn record_weight(
    tape: &mut Tape,
    rec: &mut Recorded,
    layer: &crate::graph::LayerSpec,
    quant: Option<&QuantState>,
) -> Result<TensorId> {
    let weight = layer.weight.as_ref().expect("validated");
    let w = tape.leaf(weight.clone());
    rec.weights.insert(layer.name.clone(), w);
    let Some(state) = quant else { return Ok(w) };
    let Some(p) = state.weights.get(&layer.name) else { return Ok(w) };
    if !p.is_quantized() {
        return Ok(w);
    }
    let step = tape.leaf(Tensor::vector(p.steps()));
    rec.steps.insert(layer.name.clone(), step);
    let op = match (&p.rounding, state.rounding) {
        (Some(v), RoundingMode::Soft | RoundingMode::Hard) => {
            let v = tape.leaf(v.clone());
            rec.roundings.insert(layer.name.clone(), v);
            Op::SoftRound {
                w,
                v,
                step,
                base: p.rounding_base.as_ref().map(|_| p.rounding_steps()),
                bits: p.bits,
                hard: state.rounding == RoundingMode::Hard,
            }
        }
        _ => Op::NearestRound { w, step, bits: p.bits },
    };
    tape.record(op)
}

fn mix_activation(
    tape: &mut Tape,
    float: TensorId,
    quantized: TensorId,
    layer_index: usize,
    name: &str,
    state: &QuantState,
) -> Result<TensorId> {
    match &state.mix {
        ActMix::Off => Ok(quantized),
        ActMix::Linear(fractions) => {
            let p = fractions.get(name).copied().unwrap_or(0.0);
            if p == 0.0 {
                return Ok(quantized);
            }
            tape.record(Op::Blend {
                a: float,
                b: quantized,
                weight: BlendWeight::Uniform(p),
            })
        }
        ActMix::Stochastic { fractions, seed } => {
            let p = fractions.get(name).copied().unwrap_or(0.0);
            if p == 0.0 {
                return Ok(quantized);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(layer_index as u64);
            let n = tape.value(float).len();
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                .collect();
            tape.record(Op::Blend {
                a: float,
                b: quantized,
                weight: BlendWeight::Elementwise(mask),
            })
        }
    }
}

/// Float (or quantized) network output without keeping the tape.
pub fn evaluate(graph: &NetworkGraph, input: &Tensor, quant: Option<&QuantState>) -> Result<Tensor> {
    Ok(forward_record(graph, input, quant)?.output_value().clone())
}

/// Central-difference Jacobian of the float network output for one sample.
///
/// Row `i` is `∂f_i / ∂target`. Costs `2 * |target|` forward passes.
pub fn finite_diff_jacobian(graph: &NetworkGraph, input: &Tensor, target: &Target, step: f64) -> Result<Matrix> {
    let batch = as_batch(graph, input)?;
    if batch.batch() != 1 {
        return Err(Error::Shape("finite-difference Jacobian takes one sample".into()));
    }
    let rec = forward_record(graph, &batch, None)?;
    let id = rec.resolve(graph, target)?;
    let size = rec.tape.value(id).len();
    if size > ORACLE_LIMIT {
        return Err(Error::TargetTooLarge {
            size,
            limit: ORACLE_LIMIT,
        });
    }
    rec.tape.finite_diff_jacobian(id, step)
}

/// `vᵀ J` of the float network for one sample, one entry per target.
pub fn vjp(
    graph: &NetworkGraph,
    input: &Tensor,
    seed: &Tensor,
    targets: &[Target],
) -> Result<Vec<Tensor>> {
    let rec = forward_record(graph, input, None)?;
    let ids: Vec<TensorId> = targets
        .iter()
        .map(|t| rec.resolve(graph, t))
        .collect::<Result<_>>()?;
    let seed = if seed.shape() == rec.output_value().shape() {
        seed.clone()
    } else {
        seed.clone().reshape(rec.output_value().shape().to_vec())?
    };
    let out = rec.tape.vjp(&seed, &ids)?;
    Ok(ids.iter().map(|id| out[id].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BatchNormParams, LayerSpec};
    use rand::Rng;

    fn dense(name: &str, input: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> LayerSpec {
        let w = (0..n_in * n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..n_out).map(|_| rng.random_range(-0.5..0.5)).collect();
        LayerSpec::new(
            name,
            LayerKind::Dense {
                in_features: n_in,
                out_features: n_out,
            },
            &[input],
        )
        .with_weight(Tensor::new(vec![n_out, n_in], w).unwrap())
        .with_bias(Tensor::vector(b))
    }

    fn mlp(seed: u64) -> NetworkGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            dense("fc1", "input", 4, 6, &mut rng),
            LayerSpec::new("a1", LayerKind::Sigmoid, &["fc1"]),
            dense("fc2", "a1", 6, 5, &mut rng),
            LayerSpec::new("a2", LayerKind::Sigmoid, &["fc2"]),
            dense("fc3", "a2", 5, 3, &mut rng),
        ];
        NetworkGraph::new(vec![4], layers, vec!["a1".into(), "a2".into(), "fc3".into()]).unwrap()
    }

    #[test]
    fn identity_dense() {
        let fc = LayerSpec::new(
            "fc",
            LayerKind::Dense {
                in_features: 2,
                out_features: 2,
            },
            &["input"],
        )
        .with_weight(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let g = NetworkGraph::new(vec![2], vec![fc], vec![]).unwrap();
        let y = evaluate(&g, &Tensor::vector(vec![3.0, -4.0]), None).unwrap();
        assert_eq!(y.data(), &[3.0, -4.0]);
    }

    #[test]
    fn dense_relu_dense_by_hand() {
        let fc1 = LayerSpec::new(
            "fc1",
            LayerKind::Dense {
                in_features: 2,
                out_features: 2,
            },
            &["input"],
        )
        .with_weight(Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 1.0]).unwrap())
        .with_bias(Tensor::vector(vec![0.5, 0.0]));
        let relu = LayerSpec::new("r", LayerKind::Relu, &["fc1"]);
        let fc2 = LayerSpec::new(
            "fc2",
            LayerKind::Dense {
                in_features: 2,
                out_features: 1,
            },
            &["r"],
        )
        .with_weight(Tensor::new(vec![1, 2], vec![2.0, -3.0]).unwrap());
        let g = NetworkGraph::new(vec![2], vec![fc1, relu, fc2], vec![]).unwrap();
        // fc1: [1 + 4 + 0.5, -1 + 2] = [5.5, 1]; relu keeps both; fc2: 11 - 3 = 8
        let y = evaluate(&g, &Tensor::vector(vec![1.0, 2.0]), None).unwrap();
        assert_eq!(y.data(), &[8.0]);
        // fc1 second unit negative: [1 - 2 + 0.5, -1 - 1] -> relu [0, 0]
        let y = evaluate(&g, &Tensor::vector(vec![1.0, -1.0]), None).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn thirty_two_bit_quantization_is_a_no_op() {
        let g = mlp(1);
        let mut state = QuantState::default();
        for l in g.weighted_layers() {
            let t = l.weight.as_ref().unwrap().max_abs();
            state
                .weights
                .insert(l.name.clone(), WeightQuantParams::new(vec![t; l.channels().unwrap()], 32).unwrap());
        }
        for cp in g.comparison_points() {
            state.activations.insert(cp.clone(), ActQuantParams::new(-1.0, 1.0, 32).unwrap());
        }
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 / 7.0 - 0.8).collect()).unwrap();
        let a = evaluate(&g, &x, None).unwrap();
        let b = evaluate(&g, &x, Some(&state)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let g = mlp(2);
        let x = Tensor::vector(vec![0.3, -0.7, 1.1, 0.2]);
        let targets = [
            Target::Weight("fc1".into()),
            Target::Weight("fc2".into()),
            Target::Bias("fc3".into()),
            Target::Activation("a1".into()),
            Target::Input,
        ];
        for target in &targets {
            let j = finite_diff_jacobian(&g, &x, target, 1e-6).unwrap();
            for row in 0..3 {
                let mut seed = vec![0.0; 3];
                seed[row] = 1.0;
                let got = vjp(&g, &x, &Tensor::vector(seed), std::slice::from_ref(target)).unwrap();
                let fd: Vec<f64> = j.row(row).iter().copied().collect();
                let diff: f64 = got[0].data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                assert!(diff / norm < 1e-5, "{target:?} row {row}: {}", diff / norm);
            }
        }
    }

    fn small_cnn() -> NetworkGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.6..0.6)).collect() };
        let conv = LayerSpec::new(
            "conv",
            LayerKind::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            &["input"],
        )
        .with_weight(Tensor::new(vec![3, 2, 3, 3], r(54)).unwrap())
        .with_bias(Tensor::vector(r(3)));
        let bn = LayerSpec::new("bn", LayerKind::BatchNorm { channels: 3, eps: 1e-5 }, &["conv"]).with_batch_norm(
            BatchNormParams {
                gamma: vec![1.2, 0.8, 1.0],
                beta: vec![0.1, -0.2, 0.0],
                mean: vec![0.05, 0.0, -0.1],
                var: vec![0.9, 1.1, 0.5],
            },
        );
        let act = LayerSpec::new("act", LayerKind::Sigmoid, &["bn"]);
        let pool = LayerSpec::new("pool", LayerKind::AvgPool { kernel: 2, stride: 2 }, &["act"]);
        let flat = LayerSpec::new("flat", LayerKind::Flatten, &["pool"]);
        let fc = LayerSpec::new(
            "fc",
            LayerKind::Dense {
                in_features: 12,
                out_features: 2,
            },
            &["flat"],
        )
        .with_weight(Tensor::new(vec![2, 12], r(24)).unwrap());
        NetworkGraph::new(vec![2, 4, 4], vec![conv, bn, act, pool, flat, fc], vec!["act".into(), "fc".into()]).unwrap()
    }

    #[test]
    fn conv_network_vjp_matches_finite_differences() {
        let g = small_cnn();
        let x = Tensor::new(vec![2, 4, 4], (0..32).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
        for target in [Target::Weight("conv".into()), Target::Input] {
            let j = finite_diff_jacobian(&g, &x, &target, 1e-6).unwrap();
            for row in 0..2 {
                let mut seed = vec![0.0; 2];
                seed[row] = 1.0;
                let got = vjp(&g, &x, &Tensor::vector(seed), std::slice::from_ref(&target)).unwrap();
                for (a, b) in got[0].data().iter().zip(j.row(row).iter()) {
                    assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn folding_preserves_outputs() {
        let g = small_cnn();
        let f = crate::graph::fold_batchnorm(&g).unwrap();
        let x = Tensor::new(vec![3, 2, 4, 4], (0..96).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = evaluate(&g, &x, None).unwrap();
        let b = evaluate(&f, &x, None).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(f.comparison_points(), &["act".to_string(), "fc".to_string()]);
    }

    #[test]
    fn forward_is_deterministic() {
        let g = mlp(9);
        let x = Tensor::new(vec![5, 4], (0..20).map(|i| i as f64 * 0.1).collect()).unwrap();
        let a = evaluate(&g, &x, None).unwrap();
        let b = evaluate(&g, &x, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_rejects_large_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = NetworkGraph::new(vec![30], vec![dense("big", "input", 30, 20, &mut rng)], vec![]).unwrap();
        let err = finite_diff_jacobian(&g, &Tensor::zeros(&[30]), &Target::Weight("big".into()), 1e-6).unwrap_err();
        assert!(matches!(err, Error::TargetTooLarge { size: 600, .. }));
    }

    #[test]
    fn missing_quant_params_are_reported() {
        let g = mlp(3).map_layers(|l| l.bits_weight = if l.is_weighted() { 4 } else { 32 }).unwrap();
        let err = evaluate(&g, &Tensor::zeros(&[4]), Some(&QuantState::default())).unwrap_err();
        assert!(err.to_string().contains("fc1"), "{err}");
    }
}
