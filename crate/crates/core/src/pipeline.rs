//! The end-to-end quantization workflow and its baselines.
//!
//! Stages, in order: fold batch norms, estimate weight-Hessian diagonals,
//! select weight thresholds, select activation ranges, compute attention
//! scores, optimize rounding. Errors carry the name of the failing stage.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::calibration::{select_activation_range, select_threshold, Metric, ThresholdSearchSpec};
use crate::dataset::Dataset;
use crate::eptq::{optimize, teacher_activations, EptqConfig, OptimizeOutcome};
use crate::error::{Error, Result};
use crate::forward::{forward_record, QuantState};
use crate::graph::{fold_batchnorm, NetworkGraph};
use crate::hessian::{lfh_weight_diags, loss_value, sla_scores, HessianScores, LossKind, ProbeOptions};
use crate::quant::{self, WeightQuantParams, UNQUANTIZED_BITS};
use crate::tensor::Tensor;

pub const STAGE_FOLD: &str = "fold_batchnorm";
pub const STAGE_HESSIAN: &str = "hessian";
pub const STAGE_THRESHOLDS: &str = "select_thresholds";
pub const STAGE_ACTIVATIONS: &str = "select_activation_ranges";
pub const STAGE_SLA: &str = "sla_scores";
pub const STAGE_OPTIMIZE: &str = "optimize";

/// Bit-width of the first and last weighted layers when overriding.
pub const EDGE_LAYER_BITS: u32 = 8;

/// Applies bit-width overrides. Interior weighted layers get `bits_w`, the
/// first and last weighted layers 8 bits (unless `bits_w` is 32); every
/// comparison point gets `bits_a`.
pub fn assign_bits(graph: &NetworkGraph, bits_w: Option<u32>, bits_a: Option<u32>) -> Result<NetworkGraph> {
    for b in bits_w.iter().chain(&bits_a) {
        quant::validate_bits(*b)?;
    }
    let weighted: Vec<String> = graph.weighted_layers().map(|l| l.name.clone()).collect();
    let first = weighted.first().cloned();
    let last = weighted.last().cloned();
    let cps: Vec<String> = graph.comparison_points().to_vec();
    graph.map_layers(|l| {
        if let (Some(b), true) = (bits_w, l.is_weighted()) {
            let edge = Some(&l.name) == first.as_ref() || Some(&l.name) == last.as_ref();
            l.bits_weight = if edge && b != UNQUANTIZED_BITS { EDGE_LAYER_BITS } else { b };
        }
        if let (Some(b), true) = (bits_a, cps.contains(&l.name)) {
            l.bits_activation = b;
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub bits_weight: u32,
    pub thresholds: Vec<f64>,
    /// Channels whose threshold came from the all-zero fallback.
    pub flagged_channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationReport {
    pub name: String,
    pub bits: u32,
    pub lo: f64,
    pub hi: f64,
    pub flagged: bool,
}

/// Thresholds and ranges before rounding optimization.
#[derive(Debug, Clone)]
pub struct Calibration {
    /// Round-to-nearest state.
    pub state: QuantState,
    pub layers: Vec<LayerReport>,
    pub activations: Vec<ActivationReport>,
    pub weight_diag: BTreeMap<String, Vec<f64>>,
}

fn quantized_layers(graph: &NetworkGraph) -> Vec<String> {
    graph
        .weighted_layers()
        .filter(|l| l.bits_weight != UNQUANTIZED_BITS)
        .map(|l| l.name.clone())
        .collect()
}

/// Weight-Hessian diagonals of every quantized weighted layer.
pub fn weight_hessians(graph: &NetworkGraph, data: &Dataset, cfg: &EptqConfig) -> Result<BTreeMap<String, Vec<f64>>> {
    let opts = ProbeOptions {
        m: cfg.probes,
        seed: cfg.seed,
        kind: cfg.probe_kind,
    };
    lfh_weight_diags(graph, &data.take(cfg.hmse_samples), &quantized_layers(graph), &opts)
}

/// Threshold and activation-range selection on the folded graph.
///
/// Hessian diagonals are only computed for the HMSE metric.
pub fn calibrate(graph: &NetworkGraph, data: &Dataset, cfg: &EptqConfig) -> Result<Calibration> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let weight_diag = match cfg.metric {
        Metric::Hmse => weight_hessians(graph, data, cfg).map_err(|e| e.in_stage(STAGE_HESSIAN))?,
        Metric::Mse => BTreeMap::new(),
    };
    calibrate_with(graph, data, cfg, weight_diag)
}

/// [`calibrate`] with precomputed Hessian diagonals.
pub fn calibrate_with(
    graph: &NetworkGraph,
    data: &Dataset,
    cfg: &EptqConfig,
    weight_diag: BTreeMap<String, Vec<f64>>,
) -> Result<Calibration> {
    let spec = ThresholdSearchSpec {
        n_steps: cfg.grid_steps,
        metric: cfg.metric,
    };
    let mut state = QuantState::default();
    let mut layers = Vec::new();
    for layer in graph.weighted_layers() {
        if layer.bits_weight == UNQUANTIZED_BITS {
            continue;
        }
        let w = layer.weight.as_ref().expect("weighted");
        let h = weight_diag.get(&layer.name).map(Vec::as_slice);
        let sel = select_threshold(w, h, layer.bits_weight, &spec)
            .map_err(|e| Error::layer(&layer.name, e.to_string()).in_stage(STAGE_THRESHOLDS))?;
        if !sel.flagged.is_empty() {
            log::warn!("layer `{}`: all-zero channels {:?} use the fallback threshold", layer.name, sel.flagged);
        }
        state.weights.insert(
            layer.name.clone(),
            WeightQuantParams::new(sel.thresholds.clone(), layer.bits_weight).map_err(|e| e.in_stage(STAGE_THRESHOLDS))?,
        );
        layers.push(LayerReport {
            name: layer.name.clone(),
            bits_weight: layer.bits_weight,
            thresholds: sel.thresholds,
            flagged_channels: sel.flagged,
        });
    }
    let calib = data.take(cfg.calibration_samples);
    let teacher = teacher_activations(graph, &calib).map_err(|e| e.in_stage(STAGE_ACTIVATIONS))?;
    let mut activations = Vec::new();
    for cp in graph.comparison_points() {
        let bits = graph.layer(cp).expect("validated").bits_activation;
        if bits == UNQUANTIZED_BITS {
            continue;
        }
        let zs: Vec<&Tensor> = teacher.iter().map(|t| &t[cp]).collect();
        let sel = select_activation_range(&zs, bits, cfg.grid_steps)
            .map_err(|e| Error::layer(cp, e.to_string()).in_stage(STAGE_ACTIVATIONS))?;
        if sel.flagged {
            log::warn!("comparison point `{cp}` is constant on the calibration set; using a fallback range");
        }
        state.activations.insert(cp.clone(), sel.params);
        activations.push(ActivationReport {
            name: cp.clone(),
            bits,
            lo: sel.params.lo,
            hi: sel.params.hi,
            flagged: sel.flagged,
        });
    }
    Ok(Calibration {
        state,
        layers,
        activations,
        weight_diag,
    })
}

/// Everything produced by [`run`].
#[derive(Debug, Clone)]
pub struct PipelineRun {
    /// Folded float graph (the teacher and the quantized topology).
    pub graph: NetworkGraph,
    pub calibration: Calibration,
    pub scores: HessianScores,
    pub outcome: OptimizeOutcome,
}

impl PipelineRun {
    /// Per-layer reports with the final (optimized) thresholds.
    pub fn final_layers(&self) -> Vec<LayerReport> {
        self.calibration
            .layers
            .iter()
            .map(|l| LayerReport {
                thresholds: self.outcome.state.weights[&l.name].thresholds.clone(),
                ..l.clone()
            })
            .collect()
    }
}

/// Runs the whole workflow on an unfolded graph whose bit-widths are set.
pub fn run(graph: &NetworkGraph, data: &Dataset, cfg: &EptqConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset.in_stage(STAGE_HESSIAN));
    }
    let folded = fold_batchnorm(graph).map_err(|e| e.in_stage(STAGE_FOLD))?;
    let calibration = calibrate(&folded, data, cfg)?;
    let calib = data.take(cfg.calibration_samples);
    let opts = ProbeOptions {
        m: cfg.probes,
        seed: cfg.seed,
        kind: cfg.probe_kind,
    };
    let sla = sla_scores(&folded, &calib, &opts).map_err(|e| e.in_stage(STAGE_SLA))?;
    let scores = HessianScores {
        weight_diag: calibration.weight_diag.clone(),
        sla,
        m: cfg.probes,
        seed: cfg.seed,
    };
    let outcome = optimize(&folded, &calib, &calibration.state, &scores, cfg).map_err(|e| e.in_stage(STAGE_OPTIMIZE))?;
    Ok(PipelineRun {
        graph: folded,
        calibration,
        scores,
        outcome,
    })
}

/// Round-to-nearest with plain-MSE thresholds.
pub fn rtn_baseline(graph: &NetworkGraph, data: &Dataset, cfg: &EptqConfig) -> Result<(NetworkGraph, QuantState)> {
    let folded = fold_batchnorm(graph).map_err(|e| e.in_stage(STAGE_FOLD))?;
    let cfg = EptqConfig {
        metric: Metric::Mse,
        ..cfg.clone()
    };
    let c = calibrate(&folded, data, &cfg)?;
    Ok((folded, c.state))
}

/// Round-to-nearest with HMSE thresholds (the strong-regularizer limit of the
/// rounding optimization).
pub fn hmse_baseline(graph: &NetworkGraph, data: &Dataset, cfg: &EptqConfig) -> Result<(NetworkGraph, QuantState)> {
    let folded = fold_batchnorm(graph).map_err(|e| e.in_stage(STAGE_FOLD))?;
    let cfg = EptqConfig {
        metric: Metric::Hmse,
        ..cfg.clone()
    };
    let c = calibrate(&folded, data, &cfg)?;
    Ok((folded, c.state))
}

/// Network outputs for every sample, evaluated in chunks.
pub fn outputs(graph: &NetworkGraph, quant: Option<&QuantState>, data: &Dataset) -> Result<Vec<Tensor>> {
    let quant = quant.map(|q| q.with_rounding(q.rounding));
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(128) {
        let y = crate::forward::evaluate(graph, &data.batch(chunk)?, quant.as_ref())?;
        for k in 0..chunk.len() {
            out.push(y.batch_item(k)?);
        }
    }
    Ok(out)
}

fn one_hot(label: u32, n: usize, what: &'static str) -> Result<Vec<f64>> {
    if label as usize >= n {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {n} outputs in {what}"
        )));
    }
    let mut y = vec![0.0; n];
    y[label as usize] = 1.0;
    Ok(y)
}

/// Mean task loss against one-hot labels.
pub fn mean_task_loss(kind: LossKind, outs: &[Tensor], labels: Option<&[u32]>) -> Result<f64> {
    let labels = labels.ok_or(Error::MissingLabels("the task loss"))?;
    if outs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (o, l) in outs.iter().zip(labels) {
        total += loss_value(kind, o.data(), &one_hot(*l, o.len(), "the task loss")?)?;
    }
    Ok(total / outs.len() as f64)
}

/// Top-1 accuracy; ties go to the lowest index.
pub fn accuracy(outs: &[Tensor], labels: Option<&[u32]>) -> Result<f64> {
    let labels = labels.ok_or(Error::MissingLabels("accuracy"))?;
    if outs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = outs
        .iter()
        .zip(labels)
        .filter(|(o, l)| {
            let mut best = 0;
            for (i, v) in o.data().iter().enumerate() {
                if *v > o.data()[best] {
                    best = i;
                }
            }
            best == **l as usize
        })
        .count();
    Ok(hits as f64 / outs.len() as f64)
}

/// Mean `‖z_ref - z‖²` per comparison point of `graph`, where the reference
/// activations come from `reference` (float) at the same layer names.
pub fn activation_distances(
    reference: &NetworkGraph,
    graph: &NetworkGraph,
    quant: Option<&QuantState>,
    data: &Dataset,
) -> Result<BTreeMap<String, f64>> {
    if reference.input_shape() != graph.input_shape() {
        return Err(Error::Shape(format!(
            "reference input {:?} vs model input {:?}",
            reference.input_shape(),
            graph.input_shape()
        )));
    }
    let quant = quant.map(|q| q.with_rounding(q.rounding));
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(128) {
        let x = data.batch(chunk)?;
        let r = forward_record(reference, &x, None)?;
        let q = forward_record(graph, &x, quant.as_ref())?;
        for cp in graph.comparison_points() {
            let id = reference
                .layer_index(cp)
                .map(|i| r.layer_outputs[i])
                .ok_or_else(|| Error::layer(cp, "missing from the reference model"))?;
            let a = r.tape.value(id);
            let b = q.activation(cp).expect("recorded");
            a.expect_same_shape(b)?;
            let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
            *sums.entry(cp.clone()).or_default() += d;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(sums.into_iter().map(|(k, v)| (k, v / n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{LayerKind, LayerSpec};

    fn mlp() -> NetworkGraph {
        let d = |name: &str, input: &str, n_in: usize, n_out: usize| {
            LayerSpec::new(
                name,
                LayerKind::Dense {
                    in_features: n_in,
                    out_features: n_out,
                },
                &[input],
            )
            .with_weight(Tensor::new(vec![n_out, n_in], (0..n_in * n_out).map(|i| ((i * 37 % 17) as f64 - 8.0) / 10.0).collect()).unwrap())
        };
        NetworkGraph::new(
            vec![3],
            vec![d("a", "input", 3, 4), LayerSpec::new("r", LayerKind::Relu, &["a"]), d("b", "r", 4, 4), d("c", "b", 4, 2)],
            vec!["r".into(), "b".into(), "c".into()],
        )
        .unwrap()
    }

    #[test]
    fn edge_layers_get_eight_bits() {
        let g = assign_bits(&mlp(), Some(3), Some(4)).unwrap();
        let bits: Vec<u32> = g.weighted_layers().map(|l| l.bits_weight).collect();
        assert_eq!(bits, vec![8, 3, 8]);
        assert_eq!(g.layer("r").unwrap().bits_activation, 4);
        assert!(assign_bits(&mlp(), Some(1), None).is_err());
    }

    #[test]
    fn metrics() {
        let outs = vec![Tensor::vector(vec![0.1, 2.0]), Tensor::vector(vec![3.0, -1.0])];
        assert_eq!(accuracy(&outs, Some(&[1, 1])).unwrap(), 0.5);
        assert!(matches!(accuracy(&outs, None), Err(Error::MissingLabels(_))));
        let ce = mean_task_loss(LossKind::CeSoftmax, &outs, Some(&[1, 0])).unwrap();
        assert!(ce > 0.0 && ce < 0.5);
        assert!(mean_task_loss(LossKind::CeSoftmax, &outs, Some(&[2, 0])).is_err());
    }

    #[test]
    fn self_distance_is_zero() {
        let g = mlp();
        let data = Dataset::unlabeled((0..5).map(|i| Tensor::vector(vec![i as f64, 1.0, -0.5])).collect()).unwrap();
        let d = activation_distances(&g, &g, None, &data).unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.values().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_dataset_reports_stage() {
        let g = assign_bits(&mlp(), Some(4), Some(8)).unwrap();
        let err = run(&g, &Dataset::unlabeled(vec![]).unwrap(), &EptqConfig::default()).unwrap_err();
        assert!(err.stage().is_some());
    }

    #[test]
    fn short_run_end_to_end() {
        let g = assign_bits(&mlp(), Some(4), Some(8)).unwrap();
        let data = Dataset::unlabeled((0..20).map(|i| Tensor::vector(vec![(i as f64 * 0.3).sin(), (i as f64).cos(), 0.2])).collect()).unwrap();
        let cfg = EptqConfig {
            iterations: 40,
            probes: 4,
            ..EptqConfig::default()
        };
        let r = run(&g, &data, &cfg).unwrap();
        assert!(r.outcome.final_distill <= r.outcome.initial_distill);
        assert_eq!(r.final_layers().len(), 3);
    }
}
