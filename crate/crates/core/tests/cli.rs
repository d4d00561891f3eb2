use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use eptq::cli::{self, EvalMetric, EvaluateArgs, HessianArgs, QuantizeArgs, RunConfig};
use eptq::dataset::{load_dataset, save_dataset, Dataset};
use eptq::error::Error;
use eptq::fixtures;
use eptq::hessian::LossKind;
use eptq::model_io::{blob_path, load_model, load_model_full, save_model, save_quantized_model};
use eptq::pipeline;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn toy_args(out: &Path) -> QuantizeArgs {
    QuantizeArgs {
        config: Some(fixture("toy_classifier.toml")),
        out: Some(out.to_path_buf()),
        ..QuantizeArgs::default()
    }
}

fn eval_args(model: PathBuf, data: PathBuf) -> EvaluateArgs {
    EvaluateArgs {
        model,
        data,
        reference: None,
        loss: LossKind::CeSoftmax,
        metrics: Vec::new(),
        out: None,
    }
}

fn hessian_args(model: PathBuf, data: PathBuf) -> HessianArgs {
    HessianArgs {
        model,
        data,
        probes: 50,
        seed: 3,
        samples: 16,
        with_oracle: false,
        loss: LossKind::Mse,
        out: None,
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eptq"))
}

#[test]
fn quantize_smoke_with_4_and_8_bits() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let status = bin()
        .args(["quantize", "--config"])
        .arg(fixture("toy_classifier.toml"))
        .args(["--bits-w", "4", "--bits-a", "8", "--iterations", "200", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let loaded = load_model_full(out.join(cli::MODEL_FILE)).unwrap();
    assert!(loaded.quant.is_some());
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(out.join(cli::METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(metrics["config_hash"].as_str(), loaded.config_hash.as_deref());
    assert_eq!(metrics["layers"][1]["bits_weight"], 4);
    assert_eq!(metrics["activations"][0]["bits"], 8);
    let log = fs::read_to_string(out.join(cli::TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 200);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["iter", "distill_loss", "reg_loss", "P_mean", "lr"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let report = cli::cmd_evaluate(&eval_args(out.join(cli::MODEL_FILE), fixture("toy_heldout.eptqd"))).unwrap();
    assert!(report.accuracy.unwrap() > 0.9);
}

#[test]
fn missing_dataset_names_the_stage_and_leaves_no_artifacts() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let output = bin()
        .args(["quantize", "--model"])
        .arg(fixture("toy_classifier.eptq.json"))
        .arg("--data")
        .arg(dir.path().join("absent.eptqd"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("load_dataset"));
    assert!(!out.exists());

    let err = cli::cmd_quantize(&RunConfig::resolve(&QuantizeArgs {
        model: Some(fixture("toy_classifier.eptq.json")),
        data: Some(dir.path().join("absent.eptqd")),
        out: Some(out.clone()),
        ..QuantizeArgs::default()
    })
    .unwrap())
    .unwrap_err();
    assert_eq!(err.stage(), Some(cli::STAGE_LOAD_DATASET));
}

#[test]
fn zero_iterations_reproduce_the_hmse_baseline_bytes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let args = QuantizeArgs {
        iterations: Some(0),
        ..toy_args(&out)
    };
    let cfg = RunConfig::resolve(&args).unwrap();
    cli::cmd_quantize(&cfg).unwrap();

    let graph = cli::apply_bits(&load_model(&cfg.model).unwrap(), &cfg).unwrap();
    let data = load_dataset(&cfg.data, cfg.sample_limit()).unwrap();
    let (folded, state) = pipeline::hmse_baseline(&graph, &data, &cfg.eptq).unwrap();
    fs::create_dir(dir.path().join("baseline")).unwrap();
    let baseline = dir.path().join("baseline").join(cli::MODEL_FILE);
    save_quantized_model(&folded, &state, Some(&cli::config_hash(&cfg).unwrap()), &baseline).unwrap();

    let produced = out.join(cli::MODEL_FILE);
    assert!(fs::read(&produced).unwrap() == fs::read(&baseline).unwrap());
    assert!(fs::read(blob_path(&produced)).unwrap() == fs::read(blob_path(&baseline)).unwrap());
}

#[test]
fn quantize_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for out in &runs {
        let cfg = RunConfig::resolve(&QuantizeArgs {
            iterations: Some(150),
            seed: Some(4),
            ..toy_args(out)
        })
        .unwrap();
        cli::cmd_quantize(&cfg).unwrap();
    }
    for file in [cli::MODEL_FILE, "model.eptq.bin", cli::METRICS_FILE, cli::TRAIN_LOG_FILE] {
        assert!(fs::read(runs[0].join(file)).unwrap() == fs::read(runs[1].join(file)).unwrap(), "{file}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let cfg = RunConfig::resolve(&QuantizeArgs {
        lambda_reg: Some(5.0),
        bits_w: Some(4),
        ..toy_args(Path::new("out"))
    })
    .unwrap();
    assert_eq!(cfg.eptq.lambda_reg, 5.0);
    assert_eq!(cfg.bits_w, Some(4));
    assert_eq!(cfg.bits_a, Some(32));
    assert_eq!(cfg.model, fixture("toy_classifier.eptq.json"));

    let base = RunConfig::resolve(&toy_args(Path::new("x"))).unwrap();
    assert_eq!(base.eptq.lambda_reg, 100.0);
    let moved = RunConfig::resolve(&toy_args(Path::new("y"))).unwrap();
    assert_eq!(cli::config_hash(&base).unwrap(), cli::config_hash(&moved).unwrap());
    assert_ne!(cli::config_hash(&base).unwrap(), cli::config_hash(&cfg).unwrap());
}

#[test]
fn config_rejects_unknown_keys_and_layers() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "model = \"m.json\"\nlearning_rat = 0.1\n").unwrap();
    let err = RunConfig::resolve(&QuantizeArgs {
        config: Some(path.clone()),
        ..QuantizeArgs::default()
    })
    .unwrap_err();
    assert_eq!(err.stage(), Some(cli::STAGE_CONFIG));
    assert!(err.to_string().contains("learning_rat"), "{err}");

    fs::write(
        &path,
        format!(
            "model = {:?}\ndata = {:?}\nout = \"o\"\n[layer_bits_w]\nfc9 = 4\n",
            fixture("toy_classifier.eptq.json"),
            fixture("toy_calib.eptqd")
        ),
    )
    .unwrap();
    let cfg = RunConfig::resolve(&QuantizeArgs {
        config: Some(path),
        ..QuantizeArgs::default()
    })
    .unwrap();
    let graph = load_model(&cfg.model).unwrap();
    assert!(cli::apply_bits(&graph, &cfg).unwrap_err().to_string().contains("fc9"));
}

#[test]
fn per_layer_overrides_apply_after_global_bits() {
    let mut cfg = RunConfig::resolve(&QuantizeArgs {
        bits_w: Some(3),
        ..toy_args(Path::new("o"))
    })
    .unwrap();
    cfg.layer_bits_w.insert("fc2".into(), 6);
    cfg.layer_bits_a.insert("relu1".into(), 4);
    let g = cli::apply_bits(&load_model(&cfg.model).unwrap(), &cfg).unwrap();
    assert_eq!(g.layer("fc2").unwrap().bits_weight, 6);
    assert_eq!(g.layer("fc3").unwrap().bits_weight, 3);
    assert_eq!(g.layer("fc1").unwrap().bits_weight, 8);
    assert_eq!(g.layer("relu1").unwrap().bits_activation, 4);
}

#[test]
fn float_model_against_itself_has_zero_distances() {
    let report = cli::cmd_evaluate(&eval_args(fixture("toy_classifier.eptq.json"), fixture("toy_heldout.eptqd"))).unwrap();
    let d = report.distances.unwrap();
    assert_eq!(d.len(), 4);
    assert!(d.values().all(|&v| v == 0.0));
    assert!(report.accuracy.unwrap() > 0.95);
}

#[test]
fn unquantized_bits_keep_float_accuracy() {
    let dir = TempDir::new().unwrap();
    let graph = load_model(fixture("toy_classifier.eptq.json")).unwrap();
    let data = load_dataset(fixture("toy_calib.eptqd"), 256).unwrap();
    let (folded, state) = pipeline::hmse_baseline(&graph, &data, &Default::default()).unwrap();
    let q = dir.path().join("q32.eptq.json");
    save_quantized_model(&folded, &state, None, &q).unwrap();
    let held = fixture("toy_heldout.eptqd");
    let float = cli::cmd_evaluate(&eval_args(fixture("toy_classifier.eptq.json"), held.clone())).unwrap();
    let quant = cli::cmd_evaluate(&eval_args(q, held)).unwrap();
    assert_eq!(float.accuracy, quant.accuracy);
}

#[test]
fn committed_quantized_model_matches_golden_report() {
    let golden: serde_json::Value = serde_json::from_slice(&fs::read(fixture("toy_q3_eval.json")).unwrap()).unwrap();
    let args = EvaluateArgs {
        reference: Some(fixture("toy_classifier.eptq.json")),
        ..eval_args(fixture("toy_q3/model.eptq.json"), fixture("toy_heldout.eptqd"))
    };
    let report = serde_json::to_value(cli::cmd_evaluate(&args).unwrap()).unwrap();
    assert_eq!(report["accuracy"], golden["accuracy"]);
    assert_eq!(report["config_hash"], golden["config_hash"]);
    let (a, b) = (report["loss"]["value"].as_f64().unwrap(), golden["loss"]["value"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn regenerated_quantized_model_matches_golden_accuracy() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("q3");
    let cfg = RunConfig::resolve(&toy_args(&out)).unwrap();
    cli::cmd_quantize(&cfg).unwrap();
    let golden: serde_json::Value = serde_json::from_slice(&fs::read(fixture("toy_q3_eval.json")).unwrap()).unwrap();
    let report = cli::cmd_evaluate(&eval_args(out.join(cli::MODEL_FILE), fixture("toy_heldout.eptqd"))).unwrap();
    assert_eq!(Some(report.accuracy.unwrap()), golden["accuracy"].as_f64());
    assert_eq!(report.config_hash.as_deref(), golden["config_hash"].as_str());
}

#[test]
fn evaluate_requires_labels_for_accuracy() {
    let dir = TempDir::new().unwrap();
    let labeled = load_dataset(fixture("toy_heldout.eptqd"), 32).unwrap();
    let path = dir.path().join("unlabeled.eptqd");
    save_dataset(&Dataset::unlabeled(labeled.samples.clone()).unwrap(), &path).unwrap();
    let args = EvaluateArgs {
        metrics: vec![EvalMetric::Accuracy],
        ..eval_args(fixture("toy_classifier.eptq.json"), path.clone())
    };
    let err = cli::cmd_evaluate(&args).unwrap_err();
    assert!(matches!(err, Error::Stage { ref source, .. } if matches!(**source, Error::MissingLabels(_))), "{err}");

    // Without an explicit metric list only the label-free distances are reported.
    let report = cli::cmd_evaluate(&eval_args(fixture("toy_classifier.eptq.json"), path)).unwrap();
    assert!(report.accuracy.is_none() && report.distances.is_some());
}

#[test]
fn evaluate_rejects_mismatched_shapes() {
    let err = cli::cmd_evaluate(&eval_args(fixture("toy_classifier.eptq.json"), fixture("hetero_calib.eptqd"))).unwrap_err();
    assert_eq!(err.stage(), Some(cli::STAGE_LOAD_DATASET));
    assert!(err.to_string().contains("shape"), "{err}");

    let quant = fixture("toy_q3/model.eptq.json");
    let args = EvaluateArgs {
        reference: Some(fixture("hetero_cnn.eptq.json")),
        ..eval_args(quant.clone(), fixture("toy_heldout.eptqd"))
    };
    assert!(cli::cmd_evaluate(&args).is_err());
    let args = EvaluateArgs {
        metrics: vec![EvalMetric::Distances],
        ..eval_args(quant, fixture("toy_heldout.eptqd"))
    };
    assert!(cli::cmd_evaluate(&args).is_err());
}

#[test]
fn hessian_report_is_deterministic() {
    let args = hessian_args(fixture("hetero_cnn.eptq.json"), fixture("hetero_calib.eptqd"));
    let dir = TempDir::new().unwrap();
    let outs: Vec<PathBuf> = ["a.json", "b.json"].iter().map(|n| dir.path().join(n)).collect();
    for out in &outs {
        let code = cli::run([
            "eptq".into(),
            "hessian-report".into(),
            "--model".into(),
            args.model.clone().into_os_string(),
            "--data".into(),
            args.data.clone().into_os_string(),
            "--seed".into(),
            "9".into(),
            "--out".into(),
            out.clone().into_os_string(),
        ]);
        assert_eq!(code, 0);
    }
    assert!(fs::read(&outs[0]).unwrap() == fs::read(&outs[1]).unwrap());
}

#[test]
fn hessian_report_agrees_with_the_oracle_at_many_probes() {
    let args = HessianArgs {
        probes: 2000,
        with_oracle: true,
        ..hessian_args(fixture("toy_classifier.eptq.json"), fixture("toy_calib.eptqd"))
    };
    let report = cli::cmd_hessian_report(&args).unwrap();
    assert_eq!(report.layers, ["fc1", "fc2", "fc3", "fc4"]);
    assert!(report.spearman.unwrap() > 0.95);
    let n = &report.lfh.log_normalized;
    assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn hessian_oracle_refuses_large_layers() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("wide.eptq.json");
    save_model(&fixtures::mlp(&[100, 100, 4], 0).unwrap(), &model).unwrap();
    let data = fixtures::QuadrantTask::new(100, 0.0, 1).sample(8, 2);
    let data_path = dir.path().join("wide.eptqd");
    save_dataset(&data, &data_path).unwrap();

    let args = HessianArgs {
        with_oracle: true,
        ..hessian_args(model.clone(), data_path.clone())
    };
    let err = cli::cmd_hessian_report(&args).unwrap_err();
    assert!(err.to_string().contains("oracle limit"), "{err}");
    assert!(cli::cmd_hessian_report(&hessian_args(model, data_path)).is_ok());
}

#[test]
fn cli_parse_errors_exit_with_usage_code() {
    assert_eq!(cli::run(["eptq", "quantize", "--metric", "l1"]), 2);
    assert_eq!(cli::run(["eptq", "frobnicate"]), 2);
}
