//! Full workflow on the toy classifier: nearest rounding with MSE and with
//! Hessian-weighted thresholds, then optimized rounding.

use std::path::PathBuf;

use eptq::dataset::load_dataset;
use eptq::eptq::EptqConfig;
use eptq::hessian::LossKind;
use eptq::model_io::load_model;
use eptq::pipeline::{self, accuracy, assign_bits, mean_task_loss, outputs};

fn main() -> eptq::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let float = load_model(dir.join("toy_classifier.eptq.json"))?;
    let calib = load_dataset(dir.join("toy_calib.eptqd"), 1024)?;
    let held = load_dataset(dir.join("toy_heldout.eptqd"), 2048)?;
    let graph = assign_bits(&float, Some(3), None)?;
    let cfg = EptqConfig {
        lambda_reg: 100.0,
        ..EptqConfig::default()
    };

    let report = |name: &str, g: &eptq::graph::NetworkGraph, q: Option<&eptq::forward::QuantState>| -> eptq::Result<()> {
        let outs = outputs(g, q, &held)?;
        let ce = mean_task_loss(LossKind::CeSoftmax, &outs, held.labels.as_deref())?;
        let acc = accuracy(&outs, held.labels.as_deref())?;
        println!("{name:<8} held-out ce {ce:.4}  accuracy {acc:.4}");
        Ok(())
    };
    report("float", &float, None)?;
    let (g, s) = pipeline::rtn_baseline(&graph, &calib, &cfg)?;
    report("rtn", &g, Some(&s))?;
    let (g, s) = pipeline::hmse_baseline(&graph, &calib, &cfg)?;
    report("hmse", &g, Some(&s))?;
    let run = pipeline::run(&graph, &calib, &cfg)?;
    report("eptq", &run.graph, Some(&run.outcome.state))?;
    let o = &run.outcome;
    println!(
        "distillation loss {:.4} -> {:.4} (soft {:.4}), undecided {:.4}, reverted {}",
        o.initial_distill, o.final_distill, o.final_distill_soft, o.undecided_fraction, o.reverted
    );
    Ok(())
}
