//! Synthetic data, small model builders and a trainer for toy fixtures.
//!
//! Every builder is deterministic in its seed. The committed files under
//! `fixtures/` are produced by the `make_fixtures` example from these.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::forward::forward_record;
use crate::graph::{BatchNormParams, LayerKind, LayerSpec, NetworkGraph};
use crate::optim::RAdam;
use crate::tape::TensorId;
use crate::tensor::Tensor;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Four-class task: the label is the sign pattern of two random projections
/// of a standard normal vector. Features are then multiplied by fixed
/// per-feature scales, so the Hessian of a trained first layer is as uneven as
/// the scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantTask {
    pub directions: [Vec<f64>; 2],
    pub scales: Vec<f64>,
}

impl QuadrantTask {
    /// Scales are `exp(u)` with `u` uniform in `[-log_scale_range, log_scale_range]`.
    pub fn new(dim: usize, log_scale_range: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || {
            let v: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let directions = [unit(), unit()];
        let scales = (0..dim)
            .map(|_| {
                if log_scale_range > 0.0 {
                    rng.random_range(-log_scale_range..log_scale_range).exp()
                } else {
                    1.0
                }
            })
            .collect();
        Self { directions, scales }
    }

    pub fn dim(&self) -> usize {
        self.scales.len()
    }

    /// `n` labeled samples, classes cycling so every class is present.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        while samples.len() < n {
            let z: Vec<f64> = (0..self.dim()).map(|_| normal(&mut rng)).collect();
            let side = |d: &[f64]| d.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() > 0.0;
            let label = 2 * side(&self.directions[0]) as u32 + side(&self.directions[1]) as u32;
            if label != (samples.len() % 4) as u32 {
                continue;
            }
            samples.push(Tensor::vector(z.iter().zip(&self.scales).map(|(a, b)| a * b).collect()));
            labels.push(label);
        }
        Dataset::new(samples, Some(labels)).expect("consistent")
    }
}

/// 8x8 single-channel images of four noisy stroke patterns.
pub fn pattern_images(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % 4;
        let shift = rng.random_range(0..4usize);
        let mut img = vec![0.0; 64];
        for r in 0..8 {
            for c in 0..8 {
                let on = match k {
                    0 => (r + shift) % 4 == 0,
                    1 => (c + shift) % 4 == 0,
                    2 => (r + c + shift) % 4 == 0,
                    _ => (r + 8 - c + shift) % 4 == 0,
                };
                img[r * 8 + c] = if on { 1.0 } else { 0.0 } + noise * normal(&mut rng);
            }
        }
        samples.push(Tensor::new(vec![1, 8, 8], img).expect("shape"));
        labels.push(k as u32);
    }
    Dataset::new(samples, Some(labels)).expect("consistent")
}

fn he(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let s = (2.0 / fan_in as f64).sqrt();
    (0..n).map(|_| s * normal(rng)).collect()
}

pub fn dense(name: &str, input: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Dense {
            in_features: n_in,
            out_features: n_out,
        },
        &[input],
    )
    .with_weight(Tensor::new(vec![n_out, n_in], he(rng, n_in, n_in * n_out)).expect("shape"))
    .with_bias(Tensor::zeros(&[n_out]))
}

pub fn conv(name: &str, input: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv2d {
            in_channels: c_in,
            out_channels: c_out,
            kernel: k,
            stride: 1,
            pad: k / 2,
        },
        &[input],
    )
    .with_weight(Tensor::new(vec![c_out, c_in, k, k], he(rng, c_in * k * k, c_out * c_in * k * k)).expect("shape"))
    .with_bias(Tensor::zeros(&[c_out]))
}

/// Dense/ReLU stack; comparison points are every ReLU and the output.
pub fn mlp(sizes: &[usize], seed: u64) -> Result<NetworkGraph> {
    if sizes.len() < 2 {
        return Err(Error::InvalidArgument("an MLP needs at least two sizes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut cps = Vec::new();
    let mut prev = "input".to_string();
    let n = sizes.len() - 1;
    for i in 0..n {
        let name = format!("fc{}", i + 1);
        layers.push(dense(&name, &prev, sizes[i], sizes[i + 1], &mut rng));
        prev = name.clone();
        if i + 1 < n {
            let act = format!("relu{}", i + 1);
            layers.push(LayerSpec::new(&act, LayerKind::Relu, &[&name]));
            cps.push(act.clone());
            prev = act;
        } else {
            cps.push(name);
        }
    }
    NetworkGraph::new(vec![sizes[0]], layers, cps)
}

/// Training hyper-parameters for [`train_classifier`].
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.02,
            seed: 0,
        }
    }
}

fn softmax_row(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax cross-entropy training of every weight and bias with RAdam.
///
/// The graph output is treated as logits. Batch norms are left untouched.
pub fn train_classifier(graph: &NetworkGraph, data: &Dataset, opts: &TrainOptions) -> Result<NetworkGraph> {
    let labels = data.labels.as_ref().ok_or(Error::MissingLabels("training"))?;
    let mut g = graph.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut radam = RAdam::default();
    let names: Vec<String> = g.weighted_layers().map(|l| l.name.clone()).collect();
    for _ in 0..opts.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(opts.batch_size) {
            let rec = forward_record(&g, &data.batch(idx)?, None)?;
            let out = rec.output_value();
            let classes = out.inner_len();
            let mut seed = vec![0.0; out.len()];
            for (k, &i) in idx.iter().enumerate() {
                let p = softmax_row(&out.data()[k * classes..(k + 1) * classes]);
                for c in 0..classes {
                    let y = if c == labels[i] as usize { 1.0 } else { 0.0 };
                    seed[k * classes + c] = (p[c] - y) / idx.len() as f64;
                }
            }
            let mut ids: Vec<TensorId> = Vec::new();
            for n in &names {
                ids.push(rec.weights[n]);
                if let Some(b) = rec.biases.get(n) {
                    ids.push(*b);
                }
            }
            let grads = rec.tape.vjp(&Tensor::new(out.shape().to_vec(), seed)?, &ids)?;
            let grad_data: Vec<&[f64]> = ids.iter().map(|id| grads[id].data()).collect();
            let (input_shape, mut layers, cps) = g.into_parts();
            {
                let mut slots: Vec<&mut [f64]> = Vec::new();
                for l in layers.iter_mut().filter(|l| l.is_weighted()) {
                    let has_bias = l.bias.is_some();
                    slots.push(l.weight.as_mut().expect("weighted").data_mut());
                    if has_bias {
                        slots.push(l.bias.as_mut().expect("bias").data_mut());
                    }
                }
                radam.step(&mut slots, &grad_data, opts.lr)?;
            }
            g = NetworkGraph::new(input_shape, layers, cps)?;
        }
    }
    Ok(g)
}

/// Inserts a batch norm after `conv_name` with the given statistics while
/// keeping the network function: the conv is pre-divided by the batch-norm
/// affine map so that folding restores the original weights.
pub fn insert_batchnorm(graph: &NetworkGraph, conv_name: &str, bn_name: &str, stats: BatchNormParams, eps: f64) -> Result<NetworkGraph> {
    let (scale, shift) = stats.affine(eps);
    let (input_shape, layers, mut cps) = graph.clone().into_parts();
    let mut out = Vec::with_capacity(layers.len() + 1);
    for mut l in layers {
        if l.name == conv_name {
            let w = l.weight.as_mut().ok_or_else(|| Error::layer(conv_name, "not a weighted layer"))?;
            let inner = w.len() / scale.len();
            for (i, x) in w.data_mut().iter_mut().enumerate() {
                *x /= scale[i / inner];
            }
            let b: Vec<f64> = (0..scale.len())
                .map(|c| (l.bias.as_ref().map_or(0.0, |b| b.data()[c]) - shift[c]) / scale[c])
                .collect();
            l.bias = Some(Tensor::vector(b));
            let channels = scale.len();
            let bits = l.bits_activation;
            out.push(l);
            let mut bn = LayerSpec::new(bn_name, LayerKind::BatchNorm { channels, eps }, &[conv_name]).with_batch_norm(stats.clone());
            bn.bits_activation = bits;
            out.push(bn);
            continue;
        }
        for s in l.inputs.iter_mut() {
            if s == conv_name {
                *s = bn_name.to_string();
            }
        }
        out.push(l);
    }
    for c in cps.iter_mut() {
        if c == conv_name {
            *c = bn_name.to_string();
        }
    }
    NetworkGraph::new(input_shape, out, cps)
}

fn random_stats(channels: usize, rng: &mut ChaCha8Rng) -> BatchNormParams {
    BatchNormParams {
        gamma: (0..channels).map(|_| rng.random_range(0.6..1.6)).collect(),
        beta: (0..channels).map(|_| rng.random_range(-0.3..0.3)).collect(),
        mean: (0..channels).map(|_| rng.random_range(-0.2..0.2)).collect(),
        var: (0..channels).map(|_| rng.random_range(0.5..2.0)).collect(),
    }
}

/// One Dense 2→2 identity layer.
pub fn identity() -> NetworkGraph {
    let fc = LayerSpec::new(
        "fc",
        LayerKind::Dense {
            in_features: 2,
            out_features: 2,
        },
        &["input"],
    )
    .with_weight(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).expect("shape"))
    .with_bias(Tensor::zeros(&[2]));
    NetworkGraph::new(vec![2], vec![fc], vec!["fc".into()]).expect("valid")
}

/// conv → bn → relu → add(relu, bn) → flatten → dense; two weighted layers
/// and three comparison points (relu, add, dense).
pub fn conv_bn(seed: u64) -> NetworkGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = conv("conv", "input", 2, 3, 3, &mut rng).with_bias(Tensor::vector(vec![0.05, -0.1, 0.02]));
    let bn = LayerSpec::new("bn", LayerKind::BatchNorm { channels: 3, eps: 1e-5 }, &["conv"])
        .with_batch_norm(random_stats(3, &mut rng));
    let relu = LayerSpec::new("relu", LayerKind::Relu, &["bn"]);
    let add = LayerSpec::new("add", LayerKind::Add, &["relu", "bn"]);
    let flat = LayerSpec::new("flat", LayerKind::Flatten, &["add"]);
    let fc = dense("fc", "flat", 3 * 5 * 5, 4, &mut rng);
    NetworkGraph::new(
        vec![2, 5, 5],
        vec![c, bn, relu, add, flat, fc],
        vec!["relu".into(), "add".into(), "fc".into()],
    )
    .expect("valid")
}

/// MLP 8→16→16→16→4 trained for `epochs` on `data`.
pub fn toy_classifier(data: &Dataset, epochs: usize, seed: u64) -> Result<NetworkGraph> {
    let g = mlp(&[8, 16, 16, 16, 4], seed)?;
    train_classifier(&g, data, &TrainOptions { seed, epochs, ..TrainOptions::default() })
}

/// Residual CNN with layers of very different sensitivity, trained on
/// [`pattern_images`] and then given non-trivial batch norms.
pub fn hetero_cnn(data: &Dataset, seed: u64) -> Result<NetworkGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv("conv1", "input", 1, 4, 3, &mut rng),
        LayerSpec::new("relu1", LayerKind::Relu, &["conv1"]),
        conv("conv2", "relu1", 4, 4, 3, &mut rng),
        LayerSpec::new("add", LayerKind::Add, &["relu1", "conv2"]),
        LayerSpec::new("relu2", LayerKind::Relu, &["add"]),
        LayerSpec::new("pool", LayerKind::AvgPool { kernel: 2, stride: 2 }, &["relu2"]),
        LayerSpec::new("flat", LayerKind::Flatten, &["pool"]),
        dense("fc1", "flat", 64, 8, &mut rng),
        LayerSpec::new("relu3", LayerKind::Relu, &["fc1"]),
        dense("fc2", "relu3", 8, 4, &mut rng),
    ];
    let cps = ["relu1", "conv2", "add", "relu2", "relu3", "fc2"].map(String::from).to_vec();
    let g = NetworkGraph::new(vec![1, 8, 8], layers, cps)?;
    let g = train_classifier(&g, data, &TrainOptions { seed, epochs: 20, ..TrainOptions::default() })?;
    let g = insert_batchnorm(&g, "conv1", "bn1", random_stats(4, &mut rng), 1e-5)?;
    insert_batchnorm(&g, "conv2", "bn2", random_stats(4, &mut rng), 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::evaluate;
    use crate::graph::fold_batchnorm;
    use crate::pipeline::{accuracy, outputs};

    #[test]
    fn training_learns_quadrants() {
        let data = QuadrantTask::new(8, 0.0, 3).sample(256, 4);
        let g = mlp(&[8, 16, 4], 1).unwrap();
        let before = accuracy(&outputs(&g, None, &data).unwrap(), data.labels.as_deref()).unwrap();
        let t = train_classifier(&g, &data, &TrainOptions { epochs: 10, lr: 0.05, ..TrainOptions::default() }).unwrap();
        let after = accuracy(&outputs(&t, None, &data).unwrap(), data.labels.as_deref()).unwrap();
        assert!(after > 0.8 && after > before, "{before} -> {after}");
    }

    #[test]
    fn inserted_batchnorm_preserves_function_and_folds_back() {
        let data = pattern_images(8, 0.4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = conv("c", "input", 1, 2, 3, &mut rng);
        let r = LayerSpec::new("r", LayerKind::Relu, &["c"]);
        let g = NetworkGraph::new(vec![1, 8, 8], vec![c, r], vec!["c".into(), "r".into()]).unwrap();
        let with_bn = insert_batchnorm(&g, "c", "bn", random_stats(2, &mut rng), 1e-5).unwrap();
        assert_eq!(with_bn.comparison_points(), &["bn".to_string(), "r".to_string()]);
        let x = data.stacked().unwrap();
        let a = evaluate(&g, &x, None).unwrap();
        let b = evaluate(&with_bn, &x, None).unwrap();
        let f = evaluate(&fold_batchnorm(&with_bn).unwrap(), &x, None).unwrap();
        for ((p, q), s) in a.data().iter().zip(b.data()).zip(f.data()) {
            assert!((p - q).abs() < 1e-9 && (p - s).abs() < 1e-9);
        }
    }

    #[test]
    fn quadrant_labels_follow_projections() {
        let task = QuadrantTask::new(8, 1.0, 5);
        let data = task.sample(40, 6);
        assert_eq!(data.labels.as_ref().unwrap()[..4], [0, 1, 2, 3]);
        for (x, &l) in data.samples.iter().zip(data.labels.as_ref().unwrap()) {
            let z: Vec<f64> = x.data().iter().zip(&task.scales).map(|(a, s)| a / s).collect();
            let side = |d: &[f64]| (d.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() > 0.0) as u32;
            assert_eq!(l, 2 * side(&task.directions[0]) + side(&task.directions[1]));
        }
        assert!(QuadrantTask::new(8, 0.0, 5).scales.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn builders_have_expected_structure() {
        let g = conv_bn(0);
        assert_eq!(g.num_weighted(), 2);
        assert_eq!(g.comparison_points().len(), 3);
        let f = fold_batchnorm(&g).unwrap();
        assert_eq!(f.comparison_points(), &["relu", "add", "fc"].map(String::from));
        assert_eq!(identity().num_weighted(), 1);
    }
}
