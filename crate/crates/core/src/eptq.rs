//! Network-wise rounding optimization.
//!
//! The loss on a batch is
//! `mean_x Σ_ℓ u(x, ℓ) ‖z_ℓ(x) - z̃_ℓ(x; v)‖² + λ Σ_i (1 - |2 h(v_i) - 1|^β)`
//! where `z` comes from the float (folded) teacher and `z̃` from the quantized
//! network with every earlier layer quantized too.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{Metric, DEFAULT_GRID_STEPS};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::forward::{forward_record, ActMix, QuantState, RoundingMode};
use crate::graph::NetworkGraph;
use crate::hessian::{HessianScores, ProbeKind};
use crate::optim::{Group, RAdam};
use crate::parallel::par_map;
use crate::quant::{self, rectified_sigmoid, rectified_sigmoid_grad, GradualSchedule};
use crate::tensor::Tensor;

/// Activation mixing during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradualMode {
    None,
    /// Elementwise Bernoulli choice between float and quantized values.
    Stochastic,
    #[default]
    Linear,
}

impl FromStr for GradualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GradualMode::None),
            "stochastic" => Ok(GradualMode::Stochastic),
            "linear" => Ok(GradualMode::Linear),
            other => Err(Error::InvalidArgument(format!("unknown gradual mode `{other}`"))),
        }
    }
}

/// Per-layer weighting of the distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    /// Per-sample attention scores `u_max`.
    #[default]
    Sla,
    /// Uniform `1 / L`.
    Average,
}

impl FromStr for Attention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sla" => Ok(Attention::Sla),
            "average" => Ok(Attention::Average),
            other => Err(Error::InvalidArgument(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// Every tunable of the quantization workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EptqConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Learning rate of the rounding variables.
    pub learning_rate: f64,
    /// Learning rate of the per-channel log-threshold offsets.
    pub scale_learning_rate: f64,
    pub bias_learning_rate: f64,
    pub lambda_reg: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Fraction of iterations before the regularizer switches on.
    pub warmup: f64,
    /// Initial float fraction of every comparison point.
    pub p0: f64,
    /// Iterations until the float fraction reaches zero; half of
    /// `iterations` when unset.
    pub decay_iterations: Option<usize>,
    /// Hutchinson probes per sample.
    pub probes: usize,
    pub probe_kind: ProbeKind,
    /// Samples used for the weight-Hessian diagonals.
    pub hmse_samples: usize,
    /// Samples used for activation ranges, attention scores and optimization.
    pub calibration_samples: usize,
    pub seed: u64,
    pub optimize_scale: bool,
    pub optimize_bias: bool,
    pub gradual: GradualMode,
    pub attention: Attention,
    pub metric: Metric,
    pub grid_steps: usize,
}

impl Default for EptqConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 16,
            learning_rate: 0.01,
            scale_learning_rate: 1e-3,
            bias_learning_rate: 1e-3,
            lambda_reg: 10.0,
            beta_start: 20.0,
            beta_end: 2.0,
            warmup: 0.2,
            p0: 1.0,
            decay_iterations: None,
            probes: 50,
            probe_kind: ProbeKind::Gaussian,
            hmse_samples: 64,
            calibration_samples: 256,
            seed: 0,
            optimize_scale: true,
            optimize_bias: true,
            gradual: GradualMode::Linear,
            attention: Attention::Sla,
            metric: Metric::Hmse,
            grid_steps: DEFAULT_GRID_STEPS,
        }
    }
}

impl EptqConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.probes == 0 || self.hmse_samples == 0 || self.calibration_samples == 0 {
            return bad("batch size, probes and sample counts must be at least 1".into());
        }
        for lr in [self.learning_rate, self.scale_learning_rate, self.bias_learning_rate] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning rate {lr} must be positive"));
            }
        }
        if !(self.lambda_reg >= 0.0) {
            return bad(format!("lambda_reg {} must be non-negative", self.lambda_reg));
        }
        if !(self.beta_start > 0.0 && self.beta_end > 0.0) {
            return bad("beta must stay positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup) || !(0.0..=1.0).contains(&self.p0) {
            return bad("warmup and p0 must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn decay(&self) -> usize {
        self.decay_iterations.unwrap_or(self.iterations / 2)
    }

    fn warmup_iterations(&self) -> usize {
        (self.warmup * self.iterations as f64).round() as usize
    }

    /// `(λ, β)` in effect at iteration `i`.
    pub fn regularizer_at(&self, i: usize) -> (f64, f64) {
        let warm = self.warmup_iterations();
        if i < warm {
            return (0.0, self.beta_start);
        }
        let span = self.iterations.saturating_sub(warm).max(1) as f64;
        let progress = ((i - warm) as f64 / span).min(1.0);
        (self.lambda_reg, self.beta_start + (self.beta_end - self.beta_start) * progress)
    }
}

/// `Σ_i (1 - |2 h(v_i) - 1|^β)`.
pub fn f_reg(v: &Tensor, beta: f64) -> f64 {
    v.data()
        .iter()
        .map(|&x| 1.0 - (2.0 * rectified_sigmoid(x) - 1.0).abs().powf(beta))
        .sum()
}

fn f_reg_grad(v: &Tensor, beta: f64, scale: f64) -> Tensor {
    v.map(|x| {
        let d = 2.0 * rectified_sigmoid(x) - 1.0;
        if d == 0.0 {
            return 0.0;
        }
        -scale * beta * d.abs().powf(beta - 1.0) * d.signum() * 2.0 * rectified_sigmoid_grad(x)
    })
}

/// Comparison-point activations of the float network, one map per sample.
pub fn teacher_activations(graph: &NetworkGraph, data: &Dataset) -> Result<Vec<BTreeMap<String, Tensor>>> {
    let chunks: Vec<Vec<usize>> = (0..data.len()).collect::<Vec<_>>().chunks(64).map(|c| c.to_vec()).collect();
    let parts = par_map(&chunks, |_, idx| -> Result<Vec<BTreeMap<String, Tensor>>> {
        let rec = forward_record(graph, &data.batch(idx)?, None)?;
        (0..idx.len())
            .map(|k| {
                graph
                    .comparison_points()
                    .iter()
                    .map(|cp| Ok((cp.clone(), rec.activation(cp).expect("recorded").batch_item(k)?)))
                    .collect()
            })
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Loss terms and gradients of one batch.
#[derive(Debug, Clone)]
pub struct KdTerms {
    pub distill: f64,
    /// `λ f_reg(v)`.
    pub reg: f64,
    pub grad_v: BTreeMap<String, Tensor>,
    /// Gradient w.r.t. the per-channel step sizes.
    pub grad_step: BTreeMap<String, Vec<f64>>,
    pub grad_bias: BTreeMap<String, Tensor>,
}

impl KdTerms {
    pub fn total(&self) -> f64 {
        self.distill + self.reg
    }
}

/// Distillation loss of a batch plus the rounding regularizer.
///
/// `teacher[k]` and `attention[k]` belong to sample `k` of `inputs`.
pub fn kd_loss(
    graph: &NetworkGraph,
    inputs: &Tensor,
    teacher: &[&BTreeMap<String, Tensor>],
    attention: &[&BTreeMap<String, f64>],
    state: &QuantState,
    lambda_reg: f64,
    beta: f64,
) -> Result<KdTerms> {
    let rec = forward_record(graph, inputs, Some(state))?;
    let batch = rec.tape.value(rec.input).batch();
    if teacher.len() != batch || attention.len() != batch {
        return Err(Error::Shape(format!(
            "{batch} inputs, {} teacher rows, {} attention rows",
            teacher.len(),
            attention.len()
        )));
    }
    let inv_b = 1.0 / batch as f64;
    let mut distill = 0.0;
    let mut seeds = Vec::new();
    for cp in graph.comparison_points() {
        let id = rec.activations[cp];
        let zq = rec.tape.value(id);
        let inner = zq.inner_len();
        let mut seed = vec![0.0; zq.len()];
        for k in 0..batch {
            let z = teacher[k]
                .get(cp)
                .ok_or_else(|| Error::layer(cp, "no teacher activation"))?;
            let u = *attention[k]
                .get(cp)
                .ok_or_else(|| Error::layer(cp, "no attention score"))?;
            let zs = &zq.data()[k * inner..(k + 1) * inner];
            for (j, (a, b)) in zs.iter().zip(z.data()).enumerate() {
                let d = a - b;
                distill += inv_b * u * d * d;
                seed[k * inner + j] = 2.0 * inv_b * u * d;
            }
        }
        seeds.push((id, Tensor::new(zq.shape().to_vec(), seed)?));
    }
    if !distill.is_finite() {
        return Err(Error::NonFinite("distillation loss".into()));
    }
    let mut targets = Vec::new();
    let mut names = Vec::new();
    for (kind, map) in [(0, &rec.roundings), (1, &rec.steps), (2, &rec.biases)] {
        for (name, id) in map {
            targets.push(*id);
            names.push((kind, name.clone()));
        }
    }
    let grads = rec.tape.backward(&seeds, &targets)?;
    let mut terms = KdTerms {
        distill,
        reg: 0.0,
        grad_v: BTreeMap::new(),
        grad_step: BTreeMap::new(),
        grad_bias: BTreeMap::new(),
    };
    for ((kind, name), g) in names.into_iter().zip(grads) {
        match kind {
            0 => {
                terms.grad_v.insert(name, g);
            }
            1 => {
                terms.grad_step.insert(name, g.into_data());
            }
            _ => {
                terms.grad_bias.insert(name, g);
            }
        }
    }
    if state.rounding == RoundingMode::Soft {
        for (name, p) in &state.weights {
            let Some(v) = p.rounding.as_ref().filter(|_| p.is_quantized()) else { continue };
            terms.reg += lambda_reg * f_reg(v, beta);
            if lambda_reg > 0.0 {
                if let Some(g) = terms.grad_v.get_mut(name) {
                    g.add_scaled(&f_reg_grad(v, beta, lambda_reg), 1.0)?;
                }
            }
        }
    }
    Ok(terms)
}

/// Mean attention-weighted distillation loss over a whole dataset.
pub fn distill_loss(
    graph: &NetworkGraph,
    state: &QuantState,
    data: &Dataset,
    teacher: &[BTreeMap<String, Tensor>],
    attention: &[BTreeMap<String, f64>],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let chunks: Vec<Vec<usize>> = (0..data.len()).collect::<Vec<_>>().chunks(64).map(|c| c.to_vec()).collect();
    let parts = par_map(&chunks, |_, idx| -> Result<f64> {
        let t: Vec<_> = idx.iter().map(|&i| &teacher[i]).collect();
        let a: Vec<_> = idx.iter().map(|&i| &attention[i]).collect();
        let mut s = state.clone();
        s.mix = ActMix::Off;
        let terms = kd_loss(graph, &data.batch(idx)?, &t, &a, &s, 0.0, 1.0)?;
        Ok(terms.distill * idx.len() as f64)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / data.len() as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub distill_loss: f64,
    pub reg_loss: f64,
    #[serde(rename = "P_mean")]
    pub p_mean: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    /// Final state with hard rounding.
    pub state: QuantState,
    pub log: Vec<LogEntry>,
    /// Calibration-set distillation loss at iterate 0 (hard rounding).
    pub initial_distill: f64,
    /// Calibration-set distillation loss of the returned state.
    pub final_distill: f64,
    /// Same as `final_distill` but with the soft rounding of the last iterate.
    pub final_distill_soft: f64,
    /// Hard-rounding loss of the last iterate, before the revert check.
    pub optimized_distill: f64,
    /// Fraction of rounding variables with `h(v)` in `(0.01, 0.99)`.
    pub undecided_fraction: f64,
    /// Set when the optimized state was worse than the initial one and the
    /// initial state was returned instead.
    pub reverted: bool,
}

#[derive(Debug, Clone)]
struct Trainable {
    name: String,
    v: Tensor,
    theta: Vec<f64>,
    t0: Vec<f64>,
    base: Vec<f64>,
    bias: Option<Tensor>,
}

fn build_state(init: &QuantState, params: &[Trainable], rounding: RoundingMode, mix: ActMix) -> QuantState {
    let mut s = init.clone();
    s.rounding = rounding;
    s.mix = mix;
    for p in params {
        let w = s.weights.get_mut(&p.name).expect("trainable layer");
        w.thresholds = p.t0.iter().zip(&p.theta).map(|(t, th)| t * th.exp()).collect();
        w.rounding_base = Some(p.base.clone());
        w.rounding = Some(p.v.clone());
        if let Some(b) = &p.bias {
            s.biases.insert(p.name.clone(), b.clone());
        }
    }
    s
}

fn undecided(params: &[Trainable]) -> f64 {
    let (mut n, mut soft) = (0usize, 0usize);
    for p in params {
        for &x in p.v.data() {
            let h = rectified_sigmoid(x);
            n += 1;
            if h > 0.01 && h < 0.99 {
                soft += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        soft as f64 / n as f64
    }
}

/// Optimizes rounding variables (and optionally scales and biases) of every
/// quantized weighted layer.
///
/// `graph` must be the folded float model; it is also the teacher. Scores
/// must hold one attention row per sample of `data`.
pub fn optimize(
    graph: &NetworkGraph,
    data: &Dataset,
    quant_init: &QuantState,
    scores: &HessianScores,
    cfg: &EptqConfig,
) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if scores.sla.len() != data.len() {
        return Err(Error::InvalidArgument(format!(
            "{} attention rows for {} samples",
            scores.sla.len(),
            data.len()
        )));
    }
    quant_init.check_covers(graph)?;
    let scores = match cfg.attention {
        Attention::Sla => scores.clone(),
        Attention::Average => scores.averaged(),
    };
    let teacher = teacher_activations(graph, data)?;
    let attention = &scores.sla;
    if cfg.iterations == 0 {
        let loss = distill_loss(graph, quant_init, data, &teacher, attention)?;
        return Ok(OptimizeOutcome {
            state: quant_init.clone(),
            log: Vec::new(),
            initial_distill: loss,
            final_distill: loss,
            final_distill_soft: loss,
            optimized_distill: loss,
            undecided_fraction: 0.0,
            reverted: false,
        });
    }

    let mut params = Vec::new();
    for layer in graph.weighted_layers() {
        let Some(p) = quant_init.weights.get(&layer.name).filter(|p| p.is_quantized()) else { continue };
        let w = layer.weight.as_ref().expect("weighted");
        let v = match &p.rounding {
            Some(v) => v.clone(),
            None => quant::init_rounding(w, p)?,
        };
        let bias = if cfg.optimize_bias {
            quant_init.biases.get(&layer.name).or(layer.bias.as_ref()).cloned()
        } else {
            None
        };
        params.push(Trainable {
            name: layer.name.clone(),
            v,
            theta: vec![0.0; p.thresholds.len()],
            t0: p.thresholds.clone(),
            base: p.rounding_base.clone().unwrap_or_else(|| p.thresholds.clone()),
            bias,
        });
    }
    let initial_params = params.clone();
    let initial_state = build_state(quant_init, &initial_params, RoundingMode::Hard, ActMix::Off);
    let initial_distill = distill_loss(graph, &initial_state, data, &teacher, attention)?;

    let schedule = GradualSchedule::new(cfg.p0, cfg.iterations, cfg.decay());
    let cps = graph.comparison_points();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut radam = RAdam::default();
    let mut log = Vec::with_capacity(cfg.iterations);

    for i in 0..cfg.iterations {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut batch_rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let (lambda, beta) = cfg.regularizer_at(i);
        let p_now = schedule.schedule_p("", i);
        let fractions: BTreeMap<String, f64> = cps.iter().map(|c| (c.clone(), p_now)).collect();
        let mix = match cfg.gradual {
            GradualMode::None => ActMix::Off,
            GradualMode::Linear => ActMix::Linear(fractions),
            GradualMode::Stochastic => ActMix::Stochastic {
                fractions,
                seed: cfg.seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            },
        };
        let p_mean = if cfg.gradual == GradualMode::None { 0.0 } else { p_now };
        let state = build_state(quant_init, &params, RoundingMode::Soft, mix);
        let t: Vec<_> = idx.iter().map(|&k| &teacher[k]).collect();
        let a: Vec<_> = idx.iter().map(|&k| &attention[k]).collect();
        let terms = match kd_loss(graph, &data.batch(&idx)?, &t, &a, &state, lambda, beta) {
            Ok(t) if t.total().is_finite() => t,
            Ok(_) | Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration: i }),
            Err(e) => return Err(e),
        };
        log.push(LogEntry {
            iter: i,
            distill_loss: terms.distill,
            reg_loss: terms.reg,
            p_mean,
            lr: cfg.learning_rate,
        });

        let mut grad_store: Vec<Vec<f64>> = Vec::new();
        for p in &params {
            grad_store.push(terms.grad_v[&p.name].data().to_vec());
            if cfg.optimize_scale {
                let steps = state.weights[&p.name].steps();
                let g = &terms.grad_step[&p.name];
                grad_store.push(g.iter().zip(&steps).map(|(g, s)| g * s).collect());
            }
            if let Some(b) = &p.bias {
                let g = terms.grad_bias.get(&p.name).map_or_else(|| vec![0.0; b.len()], |g| g.data().to_vec());
                grad_store.push(g);
            }
        }
        let mut slots: Vec<&mut [f64]> = Vec::new();
        let mut lrs = Vec::new();
        for p in params.iter_mut() {
            slots.push(p.v.data_mut());
            lrs.push(Group::new(cfg.learning_rate));
            // the unrectified steps are not scale-invariant; for the scale and
            // bias groups they would apply the raw gradient
            if cfg.optimize_scale {
                slots.push(&mut p.theta);
                lrs.push(Group::adaptive_only(cfg.scale_learning_rate));
            }
            if let Some(b) = p.bias.as_mut() {
                slots.push(b.data_mut());
                lrs.push(Group::adaptive_only(cfg.bias_learning_rate));
            }
        }
        let grads: Vec<&[f64]> = grad_store.iter().map(|g| g.as_slice()).collect();
        radam.step_groups(&mut slots, &grads, &lrs).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { iteration: i },
            e => e,
        })?;
    }

    let soft = build_state(quant_init, &params, RoundingMode::Soft, ActMix::Off);
    let hard = build_state(quant_init, &params, RoundingMode::Hard, ActMix::Off);
    let final_distill_soft = distill_loss(graph, &soft, data, &teacher, attention)?;
    let final_distill = distill_loss(graph, &hard, data, &teacher, attention)?;
    let undecided_fraction = undecided(&params);
    let reverted = !(final_distill <= initial_distill);
    if reverted {
        log::warn!("optimized distillation loss {final_distill} exceeds initial {initial_distill}; keeping the initial rounding");
    }
    Ok(OptimizeOutcome {
        state: if reverted { initial_state } else { hard },
        log,
        initial_distill,
        final_distill: if reverted { initial_distill } else { final_distill },
        final_distill_soft,
        optimized_distill: final_distill,
        undecided_fraction,
        reverted,
    })
}
