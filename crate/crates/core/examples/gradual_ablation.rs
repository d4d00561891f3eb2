//! Gradual activation quantization modes with 4-bit activations.
//!
//! Each mode is scored by the attention-weighted distillation loss on held-out
//! data, with attention probed once on that data.

use std::path::PathBuf;

use eptq::dataset::load_dataset;
use eptq::eptq::{distill_loss, teacher_activations, EptqConfig, GradualMode};
use eptq::graph::fold_batchnorm;
use eptq::hessian::{sla_scores, ProbeOptions};
use eptq::model_io::load_model;
use eptq::pipeline::{self, assign_bits};

fn main() -> eptq::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let float = load_model(dir.join("toy_classifier.eptq.json"))?;
    let calib = load_dataset(dir.join("toy_calib.eptqd"), 1024)?;
    let held = load_dataset(dir.join("toy_heldout.eptqd"), 512)?;
    let graph = assign_bits(&float, Some(3), Some(4))?;
    let folded = fold_batchnorm(&graph)?;
    let teacher = teacher_activations(&folded, &held)?;
    let attention = sla_scores(&folded, &held, &ProbeOptions::new(50, 12345))?;

    for mode in [GradualMode::None, GradualMode::Stochastic, GradualMode::Linear] {
        let mut losses = Vec::new();
        for seed in 0..3 {
            let cfg = EptqConfig {
                gradual: mode,
                lambda_reg: 100.0,
                seed,
                ..EptqConfig::default()
            };
            let run = pipeline::run(&graph, &calib, &cfg)?;
            losses.push(distill_loss(&run.graph, &run.outcome.state, &held, &teacher, &attention)?);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let shown: Vec<String> = losses.iter().map(|l| format!("{l:.4}")).collect();
        println!("{mode:?}: held-out distillation {} (mean {mean:.4})", shown.join(" "));
    }
    Ok(())
}
