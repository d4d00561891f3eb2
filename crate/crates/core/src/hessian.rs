//! Label-free Hessian estimates.
//!
//! For a loss `L(f(x))` the Gauss-Newton Hessian w.r.t. a tensor `z` is
//! `Jᵀ A(r) J` with `r = f(x)` and `J = ∂f/∂z`. When `A ⪯ c I` this is bounded
//! by `c JᵀJ`, which needs no labels. The Hutchinson estimators below compute
//! diagonals of `JᵀJ` from vector-Jacobian products with random probes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::forward::{self, forward_record, Target};
use crate::graph::NetworkGraph;
use crate::parallel::par_map;
use crate::tensor::{Matrix, Tensor};

/// Output losses with closed-form Hessians in the network output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CeSoftmax,
    BceSigmoid,
    GaussianNll { var: f64 },
    PoissonNll,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Mse => write!(f, "mse"),
            LossKind::CeSoftmax => write!(f, "ce_softmax"),
            LossKind::BceSigmoid => write!(f, "bce_sigmoid"),
            LossKind::GaussianNll { var } => write!(f, "gaussian_nll:{var}"),
            LossKind::PoissonNll => write!(f, "poisson_nll"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// Accepts `mse`, `ce_softmax` (or `ce`), `bce_sigmoid` (or `bce`),
    /// `gaussian_nll[:VAR]` and `poisson_nll` (or `poisson`).
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let kind = match head {
            "mse" => LossKind::Mse,
            "ce" | "ce_softmax" => LossKind::CeSoftmax,
            "bce" | "bce_sigmoid" => LossKind::BceSigmoid,
            "gaussian_nll" | "gaussian" => {
                let var = match arg {
                    Some(a) => a
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad variance `{a}`")))?,
                    None => 1.0,
                };
                return LossKind::GaussianNll { var }.validated();
            }
            "poisson" | "poisson_nll" => LossKind::PoissonNll,
            other => return Err(Error::InvalidArgument(format!("unknown loss kind `{other}`"))),
        };
        if arg.is_some() {
            return Err(Error::InvalidArgument(format!("loss `{head}` takes no parameter")));
        }
        Ok(kind)
    }
}

impl LossKind {
    fn validated(self) -> Result<Self> {
        if let LossKind::GaussianNll { var } = self {
            if !(var > 0.0 && var.is_finite()) {
                return Err(Error::InvalidArgument(format!("variance {var} must be positive")));
            }
        }
        Ok(self)
    }
}

fn softmax(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Scalar loss of output `r` against target `y`.
///
/// CE expects `y` to be a distribution, BCE expects `y ∈ [0, 1]` per entry.
pub fn loss_value(kind: LossKind, r: &[f64], y: &[f64]) -> Result<f64> {
    let kind = kind.validated()?;
    if r.len() != y.len() || r.is_empty() {
        return Err(Error::Shape(format!("output {} vs target {}", r.len(), y.len())));
    }
    let d = r.len() as f64;
    let pairs = r.iter().zip(y);
    Ok(match kind {
        LossKind::Mse => pairs.map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d,
        LossKind::CeSoftmax => {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            pairs.map(|(a, b)| -b * (a - lse)).sum()
        }
        LossKind::BceSigmoid => pairs
            .map(|(a, b)| b * softplus(-a) + (1.0 - b) * softplus(*a))
            .sum(),
        LossKind::GaussianNll { var } => pairs.map(|(a, b)| (a - b).powi(2)).sum::<f64>() / var,
        LossKind::PoissonNll => pairs.map(|(a, b)| a.exp() - b * a).sum(),
    })
}

/// Closed-form `A(r) = ∂²L/∂r²`. Independent of the target for every kind.
pub fn loss_hessian(kind: LossKind, r: &[f64]) -> Result<Matrix> {
    let kind = kind.validated()?;
    let d = r.len();
    if d == 0 {
        return Err(Error::Shape("empty output".into()));
    }
    Ok(match kind {
        LossKind::Mse => Matrix::identity(d, d) * (2.0 / d as f64),
        LossKind::CeSoftmax => {
            let p = softmax(r);
            Matrix::from_fn(d, d, |i, j| if i == j { p[i] * (1.0 - p[i]) } else { -p[i] * p[j] })
        }
        LossKind::BceSigmoid => Matrix::from_fn(d, d, |i, j| {
            if i == j {
                let s = crate::quant::sigmoid(r[i]);
                s * (1.0 - s)
            } else {
                0.0
            }
        }),
        LossKind::GaussianNll { var } => Matrix::identity(d, d) * (2.0 / var),
        LossKind::PoissonNll => Matrix::from_fn(d, d, |i, j| if i == j { r[i].exp() } else { 0.0 }),
    })
}

/// Constant `c` with `A(r) ⪯ c I` for all `r`, given output size `d0`.
pub fn loss_bound(kind: LossKind, d0: usize) -> Result<f64> {
    match kind.validated()? {
        LossKind::Mse => {
            if d0 == 0 {
                return Err(Error::InvalidArgument("output size must be positive".into()));
            }
            Ok(2.0 / d0 as f64)
        }
        LossKind::CeSoftmax | LossKind::BceSigmoid => Ok(1.0),
        LossKind::GaussianNll { var } => Ok(2.0 / var),
        LossKind::PoissonNll => Err(Error::Unbounded("poisson_nll")),
    }
}

/// Distribution of Hutchinson probe vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    #[default]
    Gaussian,
    Rademacher,
    /// All-zero probes; only useful in tests.
    Zero,
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(ProbeKind::Gaussian),
            "rademacher" => Ok(ProbeKind::Rademacher),
            "zero" => Ok(ProbeKind::Zero),
            other => Err(Error::InvalidArgument(format!("unknown probe kind `{other}`"))),
        }
    }
}

/// Probe count, seed and distribution for the Hutchinson estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub m: usize,
    pub seed: u64,
    pub kind: ProbeKind,
}

impl ProbeOptions {
    pub fn new(m: usize, seed: u64) -> Self {
        Self {
            m,
            seed,
            kind: ProbeKind::Gaussian,
        }
    }

    fn check(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidArgument("probe count M must be at least 1".into()));
        }
        Ok(())
    }
}

/// Probe stream of one sample: the same for every layer and every estimator.
fn probe_rng(seed: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    rng
}

fn draw_probe(rng: &mut ChaCha8Rng, kind: ProbeKind, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match kind {
        ProbeKind::Gaussian => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        ProbeKind::Rademacher => (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect(),
        ProbeKind::Zero => vec![0.0; n],
    };
    Tensor::new(shape.to_vec(), data).expect("probe shape")
}

/// Per-sample `(1/M) Σ_m (v_mᵀ J)²` for each target of one sample.
fn sample_squares(graph: &NetworkGraph, sample: &Tensor, index: usize, targets: &[Target], opts: &ProbeOptions) -> Result<Vec<Vec<f64>>> {
    let rec = forward_record(graph, sample, None)?;
    let ids = targets
        .iter()
        .map(|t| rec.resolve(graph, t))
        .collect::<Result<Vec<_>>>()?;
    let out_shape = rec.output_value().shape().to_vec();
    let mut acc: Vec<Vec<f64>> = ids.iter().map(|id| vec![0.0; rec.tape.value(*id).len()]).collect();
    let mut rng = probe_rng(opts.seed, index);
    for _ in 0..opts.m {
        let v = draw_probe(&mut rng, opts.kind, &out_shape);
        let grads = rec.tape.vjp(&v, &ids)?;
        for (a, id) in acc.iter_mut().zip(&ids) {
            for (s, g) in a.iter_mut().zip(grads[id].data()) {
                *s += g * g;
            }
        }
    }
    let inv = 1.0 / opts.m as f64;
    for a in &mut acc {
        a.iter_mut().for_each(|s| *s *= inv);
    }
    Ok(acc)
}

fn weighted_layer_check(graph: &NetworkGraph, layer: &str) -> Result<()> {
    match graph.layer(layer) {
        Some(l) if l.is_weighted() => Ok(()),
        Some(_) => Err(Error::layer(layer, "layer has no weights")),
        None => Err(Error::layer(layer, "no such layer")),
    }
}

/// Hutchinson estimate of `diag(E_x[JᵀJ])` for several weighted layers at
/// once, sharing the probes of each sample across layers.
pub fn lfh_weight_diags(
    graph: &NetworkGraph,
    data: &Dataset,
    layers: &[String],
    opts: &ProbeOptions,
) -> Result<BTreeMap<String, Vec<f64>>> {
    opts.check()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for l in layers {
        weighted_layer_check(graph, l)?;
    }
    let targets: Vec<Target> = layers.iter().map(|l| Target::Weight(l.clone())).collect();
    let per_sample = par_map(&data.samples, |i, x| sample_squares(graph, x, i, &targets, opts));
    let mut sums: Vec<Vec<f64>> = Vec::new();
    for r in per_sample {
        let r = r?;
        if sums.is_empty() {
            sums = r;
        } else {
            for (s, a) in sums.iter_mut().zip(&r) {
                s.iter_mut().zip(a).for_each(|(x, y)| *x += y);
            }
        }
    }
    let inv = 1.0 / data.len() as f64;
    Ok(layers
        .iter()
        .cloned()
        .zip(sums.into_iter().map(|v| v.into_iter().map(|x| x * inv).collect()))
        .collect())
}

/// Hutchinson estimate of the weight-Hessian diagonal bound of one layer,
/// flattened in weight order.
pub fn lfh_weight_diag(graph: &NetworkGraph, data: &Dataset, layer: &str, m: usize, seed: u64) -> Result<Vec<f64>> {
    let mut out = lfh_weight_diags(graph, data, &[layer.to_string()], &ProbeOptions::new(m, seed))?;
    Ok(out.remove(layer).expect("requested layer"))
}

/// Per-sample attention scores `u_max` at every comparison point.
///
/// Entry `k` of the result belongs to sample `k` of `data`.
pub fn sla_scores(graph: &NetworkGraph, data: &Dataset, opts: &ProbeOptions) -> Result<Vec<BTreeMap<String, f64>>> {
    opts.check()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cps = graph.comparison_points();
    if cps.is_empty() {
        return Err(Error::InvalidGraph("no comparison points".into()));
    }
    let targets: Vec<Target> = cps.iter().map(|c| Target::Activation(c.clone())).collect();
    par_map(&data.samples, |i, x| {
        let squares = sample_squares(graph, x, i, &targets, opts)?;
        Ok(cps
            .iter()
            .cloned()
            .zip(squares.iter().map(|u| u.iter().cloned().fold(0.0, f64::max)))
            .collect())
    })
    .into_iter()
    .collect()
}

/// Weight-diagonal bounds and attention scores used by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianScores {
    pub weight_diag: BTreeMap<String, Vec<f64>>,
    /// `sla[k][layer]` for sample `k` of the calibration set.
    pub sla: Vec<BTreeMap<String, f64>>,
    pub m: usize,
    pub seed: u64,
}

impl HessianScores {
    /// Replaces every attention score by `1 / L` (uniform layer weighting).
    pub fn averaged(&self) -> Self {
        let mut out = self.clone();
        for row in &mut out.sla {
            let w = 1.0 / row.len() as f64;
            row.values_mut().for_each(|u| *u = w);
        }
        out
    }
}

/// Full Gauss-Newton Hessian `Jᵀ A(f(x)) J` w.r.t. `target` for one sample,
/// with `J` from central finite differences.
pub fn exact_gn_hessian(graph: &NetworkGraph, input: &Tensor, target: &Target, kind: LossKind) -> Result<Matrix> {
    let j = forward::finite_diff_jacobian(graph, input, target, 1e-5)?;
    let r = forward::evaluate(graph, input, None)?;
    let a = loss_hessian(kind, r.data())?;
    Ok(j.transpose() * a * &j)
}

/// Data mean of `diag(JᵀJ)` (or of the Gauss-Newton diagonal when `kind` is
/// given) w.r.t. `target`, by finite differences.
pub fn exact_diag(graph: &NetworkGraph, data: &Dataset, target: &Target, kind: Option<LossKind>) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = par_map(&data.samples, |_, x| -> Result<Vec<f64>> {
        let j = forward::finite_diff_jacobian(graph, x, target, 1e-5)?;
        let m = match kind {
            Some(k) => {
                let r = forward::evaluate(graph, x, None)?;
                j.transpose() * loss_hessian(k, r.data())? * &j
            }
            None => j.transpose() * &j,
        };
        Ok(m.diagonal().iter().copied().collect())
    });
    let mut sum: Vec<f64> = Vec::new();
    for r in rows {
        let r = r?;
        if sum.is_empty() {
            sum = r;
        } else {
            sum.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / data.len() as f64;
    Ok(sum.into_iter().map(|v| v * inv).collect())
}

/// `(ln v - ln min) / (ln max - ln min)`.
pub fn log_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = scores.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("log-normalize needs positive entries, got {v}")));
    }
    let logs: Vec<f64> = scores.iter().map(|v| v.ln()).collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::InvalidArgument("log-normalize of a constant vector".into()));
    }
    Ok(logs.into_iter().map(|l| (l - lo) / (hi - lo)).collect())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j - 1) as f64 / 2.0 + 1.0;
        for k in &idx[i..j] {
            out[*k] = avg;
        }
        i = j;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two equal-length vectors of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean).powi(2);
        db += (y - mean).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        return Err(Error::InvalidArgument("spearman of a constant vector".into()));
    }
    Ok(num / (da * db).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{LayerKind, LayerSpec};

    fn fd_hessian(kind: LossKind, r: &[f64], y: &[f64]) -> Matrix {
        let h = 1e-4;
        let d = r.len();
        let f = |p: &[f64]| loss_value(kind, p, y).unwrap();
        Matrix::from_fn(d, d, |i, j| {
            let mut p = r.to_vec();
            let mut at = |di: f64, dj: f64| {
                p.copy_from_slice(r);
                p[i] += di;
                p[j] += dj;
                f(&p)
            };
            (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h)
        })
    }

    #[test]
    fn mse_hessian_is_scaled_identity() {
        let a = loss_hessian(LossKind::Mse, &[0.3, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(a, Matrix::identity(4, 4) * 0.5);
        assert_eq!(loss_bound(LossKind::Mse, 10).unwrap(), 0.2);
    }

    #[test]
    fn bce_hessian_at_zero() {
        let a = loss_hessian(LossKind::BceSigmoid, &[0.0, 0.0]).unwrap();
        assert_eq!(a[(0, 0)], 0.25);
        assert_eq!(a[(1, 1)], 0.25);
        assert_eq!(a[(0, 1)], 0.0);
    }

    #[test]
    fn ce_hessian_two_classes_matches_finite_differences() {
        let a = loss_hessian(LossKind::CeSoftmax, &[0.0, 0.0]).unwrap();
        assert_eq!(a[(0, 0)], 0.25);
        assert_eq!(a[(0, 1)], -0.25);
        let fd = fd_hessian(LossKind::CeSoftmax, &[0.0, 0.0], &[1.0, 0.0]);
        assert!((a - fd).abs().max() < 1e-6);
    }

    #[test]
    fn bounds() {
        assert_eq!(loss_bound(LossKind::CeSoftmax, 7).unwrap(), 1.0);
        assert_eq!(loss_bound(LossKind::BceSigmoid, 7).unwrap(), 1.0);
        assert_eq!(loss_bound(LossKind::GaussianNll { var: 0.5 }, 3).unwrap(), 4.0);
        let err = loss_bound(LossKind::PoissonNll, 3).unwrap_err();
        assert!(err.to_string().contains("no bounded Hessian"), "{err}");
        assert!(loss_hessian(LossKind::GaussianNll { var: 0.0 }, &[1.0]).is_err());
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("ce".parse::<LossKind>().unwrap(), LossKind::CeSoftmax);
        assert_eq!(
            "gaussian_nll:2".parse::<LossKind>().unwrap(),
            LossKind::GaussianNll { var: 2.0 }
        );
        assert!("gaussian_nll:-1".parse::<LossKind>().is_err());
        assert!("hinge".parse::<LossKind>().is_err());
    }

    #[test]
    fn log_normalize_examples() {
        let e = std::f64::consts::E;
        let v = log_normalize(&[1.0, e, e * e]).unwrap();
        assert!((v[1] - 0.5).abs() < 1e-15 && v[0] == 0.0 && v[2] == 1.0);
        assert_eq!(log_normalize(&[2.0, 8.0]).unwrap(), vec![0.0, 1.0]);
        let a = log_normalize(&[0.3, 1.7, 4.0]).unwrap();
        let b = log_normalize(&[3.0, 17.0, 40.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(log_normalize(&[1.0, 0.0]).is_err());
        assert!(log_normalize(&[3.0, 3.0]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ties get average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3)
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12, "{r}");
    }

    fn linear(w: Vec<f64>, n_in: usize, n_out: usize) -> NetworkGraph {
        let fc = LayerSpec::new(
            "fc",
            LayerKind::Dense {
                in_features: n_in,
                out_features: n_out,
            },
            &["input"],
        )
        .with_weight(Tensor::new(vec![n_out, n_in], w).unwrap());
        NetworkGraph::new(vec![n_in], vec![fc], vec!["fc".into()]).unwrap()
    }

    #[test]
    fn linear_net_diag_matches_closed_form() {
        // J_{k,(ij)} = δ_{ki} x_j, so diag(JᵀJ)_{(ij)} = x_j²
        let g = linear(vec![0.5, -0.2, 1.0, 0.3, 0.0, -0.7], 3, 2);
        let x = [0.8, -1.5, 0.4];
        let data = Dataset::unlabeled(vec![Tensor::vector(x.to_vec())]).unwrap();
        let h = lfh_weight_diag(&g, &data, "fc", 2000, 1).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let exact = x[j] * x[j];
                let got = h[i * 3 + j];
                assert!((got - exact).abs() / exact < 0.1, "{got} vs {exact}");
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_diag() {
        let g = linear(vec![0.5, -0.2, 1.0, 0.3], 2, 2);
        let data = Dataset::unlabeled(vec![Tensor::zeros(&[2])]).unwrap();
        for m in [1, 7] {
            assert!(lfh_weight_diag(&g, &data, "fc", m, 3).unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn output_layer_attention_is_chi_square_mean() {
        let g = linear((0..16).map(|i| i as f64 * 0.1 - 0.7).collect(), 4, 4);
        let data = Dataset::unlabeled(vec![Tensor::vector(vec![1.0, 2.0, -1.0, 0.5])]).unwrap();
        let s = sla_scores(&g, &data, &ProbeOptions::new(5000, 9)).unwrap();
        let u = s[0]["fc"];
        assert!((0.9..=1.1).contains(&u), "{u}");
        let zero = ProbeOptions {
            kind: ProbeKind::Zero,
            ..ProbeOptions::new(10, 9)
        };
        assert_eq!(sla_scores(&g, &data, &zero).unwrap()[0]["fc"], 0.0);
    }

    #[test]
    fn scores_are_deterministic_and_reject_bad_input() {
        let g = linear(vec![0.5, -0.2, 1.0, 0.3], 2, 2);
        let data = Dataset::unlabeled(vec![Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![-1.0, 0.5])]).unwrap();
        let a = lfh_weight_diag(&g, &data, "fc", 20, 5).unwrap();
        let b = lfh_weight_diag(&g, &data, "fc", 20, 5).unwrap();
        assert_eq!(a, b);
        assert!(lfh_weight_diag(&g, &data, "fc", 0, 5).is_err());
        assert!(sla_scores(&g, &Dataset::unlabeled(vec![]).unwrap(), &ProbeOptions::new(3, 1)).is_err());
    }

    #[test]
    fn zero_final_weights_give_zero_gn() {
        let g = linear(vec![0.0; 4], 2, 2);
        let fc1 = LayerSpec::new(
            "fc1",
            LayerKind::Dense {
                in_features: 2,
                out_features: 2,
            },
            &["input"],
        )
        .with_weight(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let (_, mut layers, _) = g.into_parts();
        layers[0].inputs = vec!["fc1".into()];
        let g = NetworkGraph::new(vec![2], vec![fc1, layers.remove(0)], vec![]).unwrap();
        let gn = exact_gn_hessian(&g, &Tensor::vector(vec![0.5, 1.0]), &Target::Weight("fc1".into()), LossKind::Mse).unwrap();
        assert!(gn.abs().max() < 1e-12);
    }
}
