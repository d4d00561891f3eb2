//! Command-line front end: `quantize`, `evaluate` and `hessian-report`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::calibration::Metric;
use crate::dataset::{load_dataset, Dataset};
use crate::eptq::{Attention, EptqConfig, GradualMode, LogEntry};
use crate::error::{Error, Result};
use crate::forward::{Target, ORACLE_LIMIT};
use crate::graph::{fold_batchnorm, NetworkGraph};
use crate::hessian::{exact_diag, lfh_weight_diags, log_normalize, spearman, LossKind, ProbeOptions};
use crate::model_io::{blob_path, load_model_full, save_quantized_model};
use crate::pipeline::{self, accuracy, activation_distances, ActivationReport, LayerReport};
use crate::quant;

pub const STAGE_CONFIG: &str = "load_config";
pub const STAGE_LOAD_MODEL: &str = "load_model";
pub const STAGE_LOAD_DATASET: &str = "load_dataset";
pub const STAGE_BITS: &str = "assign_bits";
pub const STAGE_WRITE: &str = "write_artifacts";
pub const STAGE_EVALUATE: &str = "evaluate";
pub const STAGE_REPORT: &str = "hessian_report";

pub const MODEL_FILE: &str = "model.eptq.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "eptq", version, about = "Post-training quantization with Hessian-guided rounding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate and optimize a model; writes the quantized model and metrics.
    Quantize(QuantizeArgs),
    /// Accuracy, task loss and activation distances of a model on a dataset.
    Evaluate(EvaluateArgs),
    /// Per-layer label-free Hessian scores, optionally against the exact oracle.
    HessianReport(HessianArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct QuantizeArgs {
    /// TOML file with run settings; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight bits of interior layers (first and last weighted layers get 8).
    #[arg(long)]
    pub bits_w: Option<u32>,
    /// Activation bits of every comparison point.
    #[arg(long)]
    pub bits_a: Option<u32>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub sla: Option<Attention>,
    #[arg(long)]
    pub gradual: Option<GradualMode>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Float model for activation distances.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Loss kind of the reported task loss.
    #[arg(long, default_value = "ce")]
    pub loss: LossKind,
    /// Comma-separated subset of accuracy,loss,distances.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<EvalMetric>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMetric {
    Accuracy,
    Loss,
    Distances,
}

#[derive(Debug, Clone, Args)]
pub struct HessianArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Hutchinson probes per sample.
    #[arg(long, default_value_t = 50)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Also compute the exact Gauss-Newton diagonal by finite differences.
    #[arg(long)]
    pub with_oracle: bool,
    /// Loss whose Gauss-Newton matrix the oracle uses.
    #[arg(long, default_value = "mse")]
    pub loss: LossKind,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fully resolved settings of one quantization run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub bits_w: Option<u32>,
    pub bits_a: Option<u32>,
    /// Per-layer overrides, applied after `bits_w`/`bits_a`.
    pub layer_bits_w: BTreeMap<String, u32>,
    pub layer_bits_a: BTreeMap<String, u32>,
    pub eptq: EptqConfig,
}

fn config_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        location: path.display().to_string(),
        message: message.into(),
    }
    .in_stage(STAGE_CONFIG)
}

fn take_path(table: &mut toml::Table, key: &str, base: &Path, file: &Path) -> Result<Option<PathBuf>> {
    match table.remove(key) {
        None => Ok(None),
        Some(toml::Value::String(s)) => Ok(Some(base.join(s))),
        Some(_) => Err(config_error(file, format!("`{key}` must be a string"))),
    }
}

fn take_bits(table: &mut toml::Table, key: &str, file: &Path) -> Result<Option<u32>> {
    match table.remove(key) {
        None => Ok(None),
        Some(toml::Value::Integer(b)) => u32::try_from(b)
            .map(Some)
            .map_err(|_| config_error(file, format!("`{key}` out of range"))),
        Some(_) => Err(config_error(file, format!("`{key}` must be an integer"))),
    }
}

fn take_layer_bits(table: &mut toml::Table, key: &str, file: &Path) -> Result<BTreeMap<String, u32>> {
    let Some(v) = table.remove(key) else { return Ok(BTreeMap::new()) };
    v.try_into()
        .map_err(|e| config_error(file, format!("`{key}`: {e}")))
}

impl RunConfig {
    /// Reads the config file (if any) and applies the command-line flags.
    /// Relative paths in the file are relative to the file.
    pub fn resolve(args: &QuantizeArgs) -> Result<Self> {
        let mut model = None;
        let mut data = None;
        let mut out = None;
        let mut bits_w = None;
        let mut bits_a = None;
        let mut layer_bits_w = BTreeMap::new();
        let mut layer_bits_a = BTreeMap::new();
        let mut eptq = EptqConfig::default();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e).in_stage(STAGE_CONFIG))?;
            let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
                let location = match e.span() {
                    Some(span) => {
                        let line = text[..span.start].matches('\n').count() + 1;
                        format!("{}:{line}", path.display())
                    }
                    None => path.display().to_string(),
                };
                Error::Parse {
                    location,
                    message: e.message().to_string(),
                }
                .in_stage(STAGE_CONFIG)
            })?;
            let base = path.parent().unwrap_or(Path::new("."));
            model = take_path(&mut table, "model", base, path)?;
            data = take_path(&mut table, "data", base, path)?;
            out = take_path(&mut table, "out", base, path)?;
            bits_w = take_bits(&mut table, "bits_w", path)?;
            bits_a = take_bits(&mut table, "bits_a", path)?;
            layer_bits_w = take_layer_bits(&mut table, "layer_bits_w", path)?;
            layer_bits_a = take_layer_bits(&mut table, "layer_bits_a", path)?;
            eptq = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| config_error(path, e.message().to_string()))?;
        }
        let missing = |what: &str| Error::InvalidArgument(format!("no {what} given (flag or config key)")).in_stage(STAGE_CONFIG);
        let cfg = RunConfig {
            model: args.model.clone().or(model).ok_or_else(|| missing("model"))?,
            data: args.data.clone().or(data).ok_or_else(|| missing("data"))?,
            out: args.out.clone().or(out).ok_or_else(|| missing("output directory"))?,
            bits_w: args.bits_w.or(bits_w),
            bits_a: args.bits_a.or(bits_a),
            layer_bits_w,
            layer_bits_a,
            eptq: EptqConfig {
                seed: args.seed.unwrap_or(eptq.seed),
                iterations: args.iterations.unwrap_or(eptq.iterations),
                lambda_reg: args.lambda_reg.unwrap_or(eptq.lambda_reg),
                metric: args.metric.unwrap_or(eptq.metric),
                attention: args.sla.unwrap_or(eptq.attention),
                gradual: args.gradual.unwrap_or(eptq.gradual),
                ..eptq
            },
        };
        cfg.eptq.validate().map_err(|e| e.in_stage(STAGE_CONFIG))?;
        Ok(cfg)
    }

    /// Samples read from the dataset file.
    pub fn sample_limit(&self) -> usize {
        self.eptq.calibration_samples.max(self.eptq.hmse_samples)
    }
}

fn file_digest(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(&bytes);
    Ok(())
}

#[derive(Serialize)]
struct HashedSettings<'a> {
    eptq: &'a EptqConfig,
    bits_w: Option<u32>,
    bits_a: Option<u32>,
    layer_bits_w: &'a BTreeMap<String, u32>,
    layer_bits_a: &'a BTreeMap<String, u32>,
}

/// SHA-256 over the effective settings and the contents of the model,
/// its weight blob and the dataset. Output paths do not enter the hash.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let mut h = Sha256::new();
    let settings = HashedSettings {
        eptq: &cfg.eptq,
        bits_w: cfg.bits_w,
        bits_a: cfg.bits_a,
        layer_bits_w: &cfg.layer_bits_w,
        layer_bits_a: &cfg.layer_bits_a,
    };
    h.update(serde_json::to_vec(&settings)?);
    file_digest(&mut h, &cfg.model).map_err(|e| e.in_stage(STAGE_LOAD_MODEL))?;
    file_digest(&mut h, &blob_path(&cfg.model)).map_err(|e| e.in_stage(STAGE_LOAD_MODEL))?;
    file_digest(&mut h, &cfg.data).map_err(|e| e.in_stage(STAGE_LOAD_DATASET))?;
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn check_input_shape(graph: &NetworkGraph, data: &Dataset, what: &str) -> Result<()> {
    match data.sample_shape() {
        Some(s) if s == graph.input_shape() => Ok(()),
        Some(s) => Err(Error::Shape(format!(
            "{what} samples have shape {s:?}, model input is {:?}",
            graph.input_shape()
        ))),
        None => Err(Error::EmptyDataset),
    }
}

/// Bit-width assignment of a run: global overrides, then per-layer ones.
pub fn apply_bits(graph: &NetworkGraph, cfg: &RunConfig) -> Result<NetworkGraph> {
    let g = pipeline::assign_bits(graph, cfg.bits_w, cfg.bits_a)?;
    for (name, b) in &cfg.layer_bits_w {
        quant::validate_bits(*b)?;
        match g.layer(name) {
            Some(l) if l.is_weighted() => {}
            Some(_) => return Err(Error::layer(name, "weight bit override on a layer without weights")),
            None => return Err(Error::layer(name, "bit override for an unknown layer")),
        }
    }
    for (name, b) in &cfg.layer_bits_a {
        quant::validate_bits(*b)?;
        if g.layer(name).is_none() {
            return Err(Error::layer(name, "bit override for an unknown layer"));
        }
        if !g.is_comparison_point(name) {
            return Err(Error::layer(name, "activation bits only apply to comparison points"));
        }
    }
    g.map_layers(|l| {
        if let Some(b) = cfg.layer_bits_w.get(&l.name) {
            l.bits_weight = *b;
        }
        if let Some(b) = cfg.layer_bits_a.get(&l.name) {
            l.bits_activation = *b;
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct QuantizeMetrics {
    pub config_hash: String,
    pub config: EptqConfig,
    pub layers: Vec<LayerReport>,
    pub activations: Vec<ActivationReport>,
    pub initial_distill_loss: f64,
    pub final_distill_loss: f64,
    pub final_distill_loss_soft: f64,
    pub undecided_fraction: f64,
    pub reverted: bool,
}

/// Removes the listed files (and the directory, if this run created it and it
/// is empty) unless disarmed.
struct Cleanup {
    files: Vec<PathBuf>,
    dir: Option<PathBuf>,
    armed: bool,
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(d) = &self.dir {
            let _ = fs::remove_dir(d);
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Runs the whole workflow and writes the model, metrics and training log.
pub fn cmd_quantize(cfg: &RunConfig) -> Result<QuantizeMetrics> {
    let loaded = load_model_full(&cfg.model).map_err(|e| e.in_stage(STAGE_LOAD_MODEL))?;
    if loaded.quant.is_some() {
        log::warn!("{} is already quantized; its dequantized weights are used as the float model", cfg.model.display());
    }
    let data = load_dataset(&cfg.data, cfg.sample_limit()).map_err(|e| e.in_stage(STAGE_LOAD_DATASET))?;
    check_input_shape(&loaded.graph, &data, "dataset").map_err(|e| e.in_stage(STAGE_LOAD_DATASET))?;
    let hash = config_hash(cfg)?;
    let graph = apply_bits(&loaded.graph, cfg).map_err(|e| e.in_stage(STAGE_BITS))?;
    let run = pipeline::run(&graph, &data, &cfg.eptq)?;

    let metrics = QuantizeMetrics {
        config_hash: hash.clone(),
        config: cfg.eptq.clone(),
        layers: run.final_layers(),
        activations: run.calibration.activations.clone(),
        initial_distill_loss: run.outcome.initial_distill,
        final_distill_loss: run.outcome.final_distill,
        final_distill_loss_soft: run.outcome.final_distill_soft,
        undecided_fraction: run.outcome.undecided_fraction,
        reverted: run.outcome.reverted,
    };
    write_artifacts(cfg, &run, &metrics, &hash).map_err(|e| e.in_stage(STAGE_WRITE))?;
    Ok(metrics)
}

fn write_artifacts(cfg: &RunConfig, run: &pipeline::PipelineRun, metrics: &QuantizeMetrics, hash: &str) -> Result<()> {
    let created = !cfg.out.exists();
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let model_path = cfg.out.join(MODEL_FILE);
    let mut guard = Cleanup {
        files: vec![
            model_path.clone(),
            blob_path(&model_path),
            cfg.out.join(METRICS_FILE),
            cfg.out.join(TRAIN_LOG_FILE),
        ],
        dir: created.then(|| cfg.out.clone()),
        armed: true,
    };
    save_quantized_model(&run.graph, &run.outcome.state, Some(hash), &model_path)?;
    write_text(&cfg.out.join(METRICS_FILE), &to_json(metrics)?)?;
    let mut log = String::new();
    for entry in &run.outcome.log {
        log.push_str(&serde_json::to_string::<LogEntry>(entry)?);
        log.push('\n');
    }
    write_text(&cfg.out.join(TRAIN_LOG_FILE), &log)?;
    guard.armed = false;
    Ok(())
}

fn display<S: serde::Serializer>(v: &LossKind, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    #[serde(serialize_with = "display")]
    pub kind: LossKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateReport {
    pub config_hash: Option<String>,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossReport>,
    /// Mean `‖z_float - z_quant‖²` per comparison point.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distances: Option<BTreeMap<String, f64>>,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvaluateReport> {
    let loaded = load_model_full(&args.model).map_err(|e| e.in_stage(STAGE_LOAD_MODEL))?;
    let data = load_dataset(&args.data, usize::MAX).map_err(|e| e.in_stage(STAGE_LOAD_DATASET))?;
    check_input_shape(&loaded.graph, &data, "dataset").map_err(|e| e.in_stage(STAGE_LOAD_DATASET))?;
    let reference = match &args.reference {
        Some(p) => {
            let r = load_model_full(p).map_err(|e| e.in_stage(STAGE_LOAD_MODEL))?;
            if r.quant.is_some() {
                return Err(Error::InvalidArgument(format!("reference {} is a quantized model", p.display())).in_stage(STAGE_LOAD_MODEL));
            }
            Some(r.graph)
        }
        None => None,
    };
    evaluate_loaded(&loaded.graph, loaded.quant.as_ref(), loaded.config_hash, reference.as_ref(), &data, args.loss, &args.metrics)
        .map_err(|e| e.in_stage(STAGE_EVALUATE))
}

fn evaluate_loaded(
    graph: &NetworkGraph,
    quant: Option<&crate::forward::QuantState>,
    config_hash: Option<String>,
    reference: Option<&NetworkGraph>,
    data: &Dataset,
    loss: LossKind,
    requested: &[EvalMetric],
) -> Result<EvaluateReport> {
    let explicit = !requested.is_empty();
    let labeled = data.labels.is_some();
    let want = |m: EvalMetric| requested.contains(&m);
    let want_acc = if explicit { want(EvalMetric::Accuracy) } else { labeled };
    let want_loss = if explicit { want(EvalMetric::Loss) } else { labeled };
    let want_dist = if explicit {
        want(EvalMetric::Distances)
    } else {
        reference.is_some() || quant.is_none()
    };
    let outs = pipeline::outputs(graph, quant, data)?;
    let accuracy = want_acc.then(|| accuracy(&outs, data.labels.as_deref())).transpose()?;
    let loss = want_loss
        .then(|| pipeline::mean_task_loss(loss, &outs, data.labels.as_deref()).map(|value| LossReport { kind: loss, value }))
        .transpose()?;
    let distances = if want_dist {
        let folded;
        let reference = match reference {
            Some(r) => {
                folded = fold_batchnorm(r)?;
                &folded
            }
            None if quant.is_none() => graph,
            None => {
                return Err(Error::InvalidArgument(
                    "activation distances of a quantized model need --reference".into(),
                ))
            }
        };
        Some(activation_distances(reference, graph, quant, data)?)
    } else {
        None
    };
    Ok(EvaluateReport {
        config_hash,
        samples: data.len(),
        accuracy,
        loss,
        distances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreVectors {
    pub raw: Vec<f64>,
    pub log_normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleScores {
    #[serde(serialize_with = "display")]
    pub loss: LossKind,
    pub raw: Vec<f64>,
    pub log_normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianReport {
    pub probes: usize,
    pub seed: u64,
    pub samples: usize,
    /// Weighted layers, in graph order; the score vectors follow this order.
    pub layers: Vec<String>,
    /// Per-layer trace of the label-free weight-Hessian diagonal.
    pub lfh: ScoreVectors,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
}

fn normalized(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.len() < 2 {
        return Ok(vec![0.0; raw.len()]);
    }
    log_normalize(raw)
}

/// Refuses the oracle when any weight or comparison point is too large for
/// finite differences.
pub fn check_oracle_size(graph: &NetworkGraph) -> Result<()> {
    for l in graph.layers() {
        let w = l.weight.as_ref().map_or(0, |w| w.len());
        let a = if graph.is_comparison_point(&l.name) {
            graph.layer_shape(&l.name).map_or(0, |s| s.iter().product())
        } else {
            0
        };
        let size = w.max(a);
        if size > ORACLE_LIMIT {
            return Err(Error::layer(
                &l.name,
                Error::TargetTooLarge {
                    size,
                    limit: ORACLE_LIMIT,
                }
                .to_string(),
            ));
        }
    }
    Ok(())
}

pub fn cmd_hessian_report(args: &HessianArgs) -> Result<HessianReport> {
    let loaded = load_model_full(&args.model).map_err(|e| e.in_stage(STAGE_LOAD_MODEL))?;
    let data = load_dataset(&args.data, args.samples).map_err(|e| e.in_stage(STAGE_LOAD_DATASET))?;
    check_input_shape(&loaded.graph, &data, "dataset").map_err(|e| e.in_stage(STAGE_LOAD_DATASET))?;
    hessian_report(&loaded.graph, &data, args).map_err(|e| e.in_stage(STAGE_REPORT))
}

/// The report for an in-memory model; [`cmd_hessian_report`] without the file
/// loading.
pub fn hessian_report(graph: &NetworkGraph, data: &Dataset, args: &HessianArgs) -> Result<HessianReport> {
    let graph = fold_batchnorm(graph)?;
    if args.with_oracle {
        check_oracle_size(&graph)?;
    }
    let layers: Vec<String> = graph.weighted_layers().map(|l| l.name.clone()).collect();
    let opts = ProbeOptions::new(args.probes, args.seed);
    let diags = lfh_weight_diags(&graph, data, &layers, &opts)?;
    let raw: Vec<f64> = layers.iter().map(|l| diags[l].iter().sum()).collect();
    let lfh = ScoreVectors {
        log_normalized: normalized(&raw)?,
        raw,
    };
    let (oracle, rho) = if args.with_oracle {
        let mut raw = Vec::with_capacity(layers.len());
        for l in &layers {
            let d = exact_diag(&graph, data, &Target::Weight(l.clone()), Some(args.loss))?;
            raw.push(d.iter().sum());
        }
        let rho = (raw.len() >= 2).then(|| spearman(&lfh.raw, &raw)).transpose()?;
        let o = OracleScores {
            loss: args.loss,
            log_normalized: normalized(&raw)?,
            raw,
        };
        (Some(o), rho)
    } else {
        (None, None)
    };
    Ok(HessianReport {
        probes: args.probes,
        seed: args.seed,
        samples: data.len(),
        layers,
        lfh,
        oracle,
        spearman: rho,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text).map_err(|e| e.in_stage(STAGE_WRITE)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Quantize(args) => {
            let cfg = RunConfig::resolve(args)?;
            let m = cmd_quantize(&cfg)?;
            eprintln!(
                "quantized {} -> {} (distillation loss {:.6} -> {:.6})",
                cfg.model.display(),
                cfg.out.join(MODEL_FILE).display(),
                m.initial_distill_loss,
                m.final_distill_loss
            );
            Ok(())
        }
        Command::Evaluate(args) => emit(args.out.as_deref(), &to_json(&cmd_evaluate(args)?)?),
        Command::HessianReport(args) => emit(args.out.as_deref(), &to_json(&cmd_hessian_report(args)?)?),
    }
}
