//! Label-free per-layer Hessian scores next to the exact Gauss-Newton oracle.

use std::path::PathBuf;

use eptq::cli::{hessian_report, HessianArgs};
use eptq::dataset::load_dataset;
use eptq::hessian::LossKind;
use eptq::model_io::load_model;

fn main() -> eptq::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let graph = load_model(dir.join("hetero_cnn.eptq.json"))?;
    let data = load_dataset(dir.join("hetero_calib.eptqd"), 16)?;
    let args = HessianArgs {
        model: PathBuf::new(),
        data: PathBuf::new(),
        probes: 200,
        seed: 0,
        samples: data.len(),
        with_oracle: true,
        loss: LossKind::Mse,
        out: None,
    };
    let report = hessian_report(&graph, &data, &args)?;
    let oracle = report.oracle.as_ref().expect("oracle requested");
    println!("{:<8} {:>12} {:>12} {:>8} {:>8}", "layer", "lfh trace", "exact trace", "lfh", "exact");
    for (i, name) in report.layers.iter().enumerate() {
        println!(
            "{name:<8} {:>12.4} {:>12.4} {:>8.3} {:>8.3}",
            report.lfh.raw[i], oracle.raw[i], report.lfh.log_normalized[i], oracle.log_normalized[i]
        );
    }
    if let Some(rho) = report.spearman {
        println!("spearman rank correlation: {rho:.3}");
    }
    Ok(())
}
