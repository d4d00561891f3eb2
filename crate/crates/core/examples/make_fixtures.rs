//! Regenerates the committed models and datasets in `fixtures/`.
//!
//! ```text
//! cargo run --release --example make_fixtures
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use eptq::cli::{self, EvaluateArgs, QuantizeArgs, RunConfig};
use eptq::dataset::{save_dataset, Dataset};
use eptq::fixtures::{self, QuadrantTask};
use eptq::hessian::LossKind;
use eptq::model_io::save_model;
use eptq::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_data(shape: &[usize], n: usize, classes: u32, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let samples = (0..n)
        .map(|_| {
            let v = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), v).expect("shape")
        })
        .collect();
    let labels = (0..n as u32).map(|i| i % classes).collect();
    Dataset::new(samples, Some(labels)).expect("dataset")
}

fn main() -> eptq::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    fs::create_dir_all(&dir).map_err(|e| eptq::Error::io(&dir, e))?;
    let at = |name: &str| dir.join(name);

    save_model(&fixtures::identity(), at("identity.eptq.json"))?;
    save_dataset(&random_data(&[2], 16, 2, 1), at("identity_data.eptqd"))?;

    save_model(&fixtures::conv_bn(0), at("conv_bn.eptq.json"))?;
    save_dataset(&random_data(&[2, 5, 5], 32, 4, 2), at("conv_bn_data.eptqd"))?;

    let task = QuadrantTask::new(8, 0.0, 7);
    let toy = fixtures::toy_classifier(&task.sample(8192, 10), 10, 7)?;
    save_model(&toy, at("toy_classifier.eptq.json"))?;
    save_dataset(&task.sample(1024, 8), at("toy_calib.eptqd"))?;
    save_dataset(&task.sample(2048, 9), at("toy_heldout.eptqd"))?;

    let cnn = fixtures::hetero_cnn(&fixtures::pattern_images(4096, 1.0, 1), 5)?;
    save_model(&cnn, at("hetero_cnn.eptq.json"))?;
    save_dataset(&fixtures::pattern_images(512, 1.0, 2), at("hetero_calib.eptqd"))?;
    save_dataset(&fixtures::pattern_images(1024, 1.0, 3), at("hetero_heldout.eptqd"))?;

    golden_quantized_toy(&dir)?;
    println!("fixtures written to {}", dir.display());
    Ok(())
}

/// A 3-bit quantized toy model and its evaluation on the held-out set.
fn golden_quantized_toy(dir: &Path) -> eptq::Result<()> {
    let out = dir.join("toy_q3");
    let _ = fs::remove_dir_all(&out);
    let cfg = RunConfig::resolve(&QuantizeArgs {
        config: Some(dir.join("toy_classifier.toml")),
        out: Some(out.clone()),
        ..QuantizeArgs::default()
    })?;
    cli::cmd_quantize(&cfg)?;
    let report = cli::cmd_evaluate(&EvaluateArgs {
        model: out.join(cli::MODEL_FILE),
        data: dir.join("toy_heldout.eptqd"),
        reference: Some(dir.join("toy_classifier.eptq.json")),
        loss: LossKind::CeSoftmax,
        metrics: Vec::new(),
        out: None,
    })?;
    let path = dir.join("toy_q3_eval.json");
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| eptq::Error::io(&path, e))
}
