//! Per-channel threshold search: plain MSE against Hessian-weighted MSE.

use std::path::PathBuf;

use eptq::calibration::{select_threshold, Metric, ThresholdSearchSpec};
use eptq::dataset::load_dataset;
use eptq::eptq::EptqConfig;
use eptq::graph::fold_batchnorm;
use eptq::model_io::load_model;
use eptq::pipeline::{assign_bits, weight_hessians};

fn main() -> eptq::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let graph = fold_batchnorm(&assign_bits(&load_model(dir.join("hetero_cnn.eptq.json"))?, Some(3), None)?)?;
    let data = load_dataset(dir.join("hetero_calib.eptqd"), 64)?;
    let hessians = weight_hessians(&graph, &data, &EptqConfig::default())?;
    for (name, h) in &hessians {
        let layer = graph.layer(name).expect("layer");
        let w = layer.weight.as_ref().expect("weighted");
        let bits = layer.bits_weight;
        let mse = select_threshold(w, None, bits, &ThresholdSearchSpec { metric: Metric::Mse, ..Default::default() })?;
        let hmse = select_threshold(w, Some(h), bits, &ThresholdSearchSpec::default())?;
        let max_abs = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        println!("{name} ({bits} bits, max |w| = {max_abs:.3})");
        let fmt = |t: &[f64]| t.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
        println!("  mse : {}", fmt(&mse.thresholds));
        println!("  hmse: {}", fmt(&hmse.thresholds));
    }
    Ok(())
}
