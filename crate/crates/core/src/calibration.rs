//! Threshold and activation-range selection by grid search.
//!
//! Candidates are shrinkages `α_j = 1 - j/128`, `j = 0..n_steps`, of the
//! channel's (or tensor's) observed range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, ActQuantParams, WeightQuantParams};
use crate::tensor::Tensor;

pub const DEFAULT_GRID_STEPS: usize = 96;
const GRID_DENOM: f64 = 128.0;
/// Width of the fallback range of a constant activation.
pub const DEGENERATE_RANGE_WIDTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    #[default]
    Hmse,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Metric::Mse),
            "hmse" => Ok(Metric::Hmse),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSearchSpec {
    pub n_steps: usize,
    pub metric: Metric,
}

impl Default for ThresholdSearchSpec {
    fn default() -> Self {
        Self {
            n_steps: DEFAULT_GRID_STEPS,
            metric: Metric::Hmse,
        }
    }
}

impl ThresholdSearchSpec {
    pub fn alphas(&self) -> Result<Vec<f64>> {
        if self.n_steps == 0 || self.n_steps > GRID_DENOM as usize {
            return Err(Error::InvalidArgument(format!(
                "grid steps {} not in 1..=128",
                self.n_steps
            )));
        }
        Ok((0..self.n_steps).map(|j| 1.0 - j as f64 / GRID_DENOM).collect())
    }
}

/// `Σ h_i (w_i - w̃_i)²`.
pub fn hmse(w: &Tensor, w_q: &Tensor, h: &[f64]) -> Result<f64> {
    w.expect_same_shape(w_q)?;
    if h.len() != w.len() {
        return Err(Error::Shape(format!("{} weights, {} Hessian entries", w.len(), h.len())));
    }
    if let Some(v) = h.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative Hessian entry {v}")));
    }
    Ok(w.data()
        .iter()
        .zip(w_q.data())
        .zip(h)
        .map(|((a, b), hi)| hi * (a - b).powi(2))
        .sum())
}

/// Selected thresholds plus the channels that needed a fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSelection {
    pub thresholds: Vec<f64>,
    /// Channels whose weights are all zero; they get `t = α_min`.
    pub flagged: Vec<usize>,
    /// Weighted error of each channel at its selected threshold.
    pub errors: Vec<f64>,
}

/// Per-channel grid argmin of `Σ h_i (w_i - Q(w_i; t))²`.
///
/// `h = None` weights every element equally (plain MSE). Ties go to the
/// larger threshold.
pub fn select_threshold(
    w: &Tensor,
    h: Option<&[f64]>,
    bits: u32,
    spec: &ThresholdSearchSpec,
) -> Result<ThresholdSelection> {
    quant::validate_bits(bits)?;
    if bits == quant::UNQUANTIZED_BITS {
        return Err(Error::Quant("threshold search needs a quantized bit-width".into()));
    }
    let h = match spec.metric {
        Metric::Mse => None,
        Metric::Hmse => h,
    };
    if let Some(h) = h {
        if h.len() != w.len() {
            return Err(Error::Shape(format!("{} weights, {} Hessian entries", w.len(), h.len())));
        }
        if let Some(v) = h.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("negative Hessian entry {v}")));
        }
    }
    let alphas = spec.alphas()?;
    let channels = w.shape()[0];
    let inner = w.len() / channels;
    let half = (1u64 << (bits - 1)) as f64;
    let (qmin, qmax) = quant::code_range(bits);
    let mut out = ThresholdSelection {
        thresholds: Vec::with_capacity(channels),
        flagged: Vec::new(),
        errors: Vec::with_capacity(channels),
    };
    for c in 0..channels {
        let wc = &w.data()[c * inner..(c + 1) * inner];
        let hc = h.map(|h| &h[c * inner..(c + 1) * inner]);
        let max = wc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            out.thresholds.push(*alphas.last().expect("non-empty grid"));
            out.flagged.push(c);
            out.errors.push(0.0);
            continue;
        }
        let mut best = (f64::INFINITY, max);
        for &a in &alphas {
            let t = a * max;
            let s = t / half;
            let err: f64 = wc
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let q = quant::round_half_away(x / s).clamp(qmin, qmax) * s;
                    hc.map_or(1.0, |h| h[i]) * (x - q).powi(2)
                })
                .sum();
            if err < best.0 {
                best = (err, t);
            }
        }
        out.thresholds.push(best.1);
        out.errors.push(best.0);
    }
    Ok(out)
}

/// Convenience wrapper building [`WeightQuantParams`].
pub fn select_weight_params(
    w: &Tensor,
    h: Option<&[f64]>,
    bits: u32,
    spec: &ThresholdSearchSpec,
) -> Result<(WeightQuantParams, ThresholdSelection)> {
    let sel = select_threshold(w, h, bits, spec)?;
    Ok((WeightQuantParams::new(sel.thresholds.clone(), bits)?, sel))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeSelection {
    pub params: ActQuantParams,
    /// Set when the activations were constant and a fallback range was used.
    pub flagged: bool,
    pub mse: f64,
}

/// `[α·min, α·max]` minimizing the mean squared activation quantization error.
pub fn select_activation_range(samples: &[&Tensor], bits: u32, n_steps: usize) -> Result<RangeSelection> {
    quant::validate_bits(bits)?;
    let values: Vec<f64> = samples.iter().flat_map(|t| t.data().iter().copied()).collect();
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(min < max) {
        let params = ActQuantParams::new(min, min + DEGENERATE_RANGE_WIDTH, bits)?;
        return Ok(RangeSelection {
            params,
            flagged: true,
            mse: 0.0,
        });
    }
    if bits == quant::UNQUANTIZED_BITS {
        return Ok(RangeSelection {
            params: ActQuantParams::new(min, max, bits)?,
            flagged: false,
            mse: 0.0,
        });
    }
    let spec = ThresholdSearchSpec {
        n_steps,
        metric: Metric::Mse,
    };
    let mut best: Option<(f64, ActQuantParams)> = None;
    for a in spec.alphas()? {
        let p = ActQuantParams::new(a * min, a * max, bits)?;
        let err = values.iter().map(|z| (z - p.apply(*z)).powi(2)).sum::<f64>() / values.len() as f64;
        if best.is_none_or(|(e, _)| err < e) {
            best = Some((err, p));
        }
    }
    let (mse, params) = best.expect("non-empty grid");
    Ok(RangeSelection {
        params,
        flagged: false,
        mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(vals: &[f64]) -> Tensor {
        Tensor::new(vec![1, vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn hmse_examples() {
        let w = Tensor::vector(vec![1.0, 2.0]);
        let q = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(hmse(&w, &w, &[3.0, 5.0]).unwrap(), 0.0);
        assert_eq!(hmse(&w, &q, &[3.0, 5.0]).unwrap(), 5.0);
        assert_eq!(hmse(&w, &q, &[1.0, 1.0]).unwrap(), 1.0);
        assert!(hmse(&w, &q, &[1.0, -1.0]).is_err());
        assert!(hmse(&w, &q, &[1.0]).is_err());
    }

    #[test]
    fn representable_weights_pick_exact_grid() {
        // bits 3, t = 1, s = 0.25
        let w = t(&[-1.0, -0.5, 0.0, 0.25, 0.75]);
        let sel = select_threshold(&w, None, 3, &ThresholdSearchSpec::default()).unwrap();
        assert_eq!(sel.thresholds, vec![1.0]);
        assert_eq!(sel.errors, vec![0.0]);
    }

    #[test]
    fn zero_channel_is_flagged() {
        let w = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, -0.5]).unwrap();
        let sel = select_threshold(&w, None, 4, &ThresholdSearchSpec::default()).unwrap();
        assert_eq!(sel.flagged, vec![0]);
        assert!(sel.thresholds[0] > 0.0);
    }

    #[test]
    fn outlier_with_large_hessian_is_preserved() {
        let mut vals: Vec<f64> = (0..31).map(|i| (i as f64 - 15.0) / 40.0).collect();
        vals.push(-3.0);
        let w = t(&vals);
        let mut h = vec![1.0; 32];
        h[31] = 1e4;
        let spec = ThresholdSearchSpec::default();
        let t_mse = select_threshold(&w, Some(&h), 3, &ThresholdSearchSpec { metric: Metric::Mse, ..spec }).unwrap();
        let t_hmse = select_threshold(&w, Some(&h), 3, &spec).unwrap();
        // exhaustive oracle over the same grid
        let half = 4.0;
        let eval = |t: f64, weighted: bool| -> f64 {
            let s = t / half;
            vals.iter()
                .enumerate()
                .map(|(i, x)| {
                    let q = (x / s).round().clamp(-4.0, 3.0) * s;
                    (if weighted { h[i] } else { 1.0 }) * (x - q).powi(2)
                })
                .sum()
        };
        let grid: Vec<f64> = (0..96).map(|j| (1.0 - j as f64 / 128.0) * 3.0).collect();
        let best = |weighted: bool| {
            grid.iter()
                .copied()
                .fold((f64::INFINITY, 0.0), |b, t| if eval(t, weighted) < b.0 { (eval(t, weighted), t) } else { b })
                .1
        };
        assert_eq!(t_mse.thresholds[0], best(false));
        assert_eq!(t_hmse.thresholds[0], best(true));
        let outlier_err = |t: f64| {
            let s = t / half;
            (-3.0 - (-3.0f64 / s).round().clamp(-4.0, 3.0) * s).abs()
        };
        assert!(outlier_err(t_hmse.thresholds[0]) < outlier_err(t_mse.thresholds[0]));
    }

    #[test]
    fn activation_grid_data_is_exact() {
        let z = Tensor::vector((0..4).map(|i| i as f64 / 3.0).collect());
        let sel = select_activation_range(&[&z], 2, 96).unwrap();
        assert_eq!((sel.params.lo, sel.params.hi), (0.0, 1.0));
        assert_eq!(sel.mse, 0.0);
    }

    #[test]
    fn activation_outlier_shrinks_range() {
        let mut vals: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
        vals.push(20.0);
        let z = Tensor::vector(vals.clone());
        let sel = select_activation_range(&[&z], 4, 96).unwrap();
        assert!(sel.params.hi < 20.0);
        let mse = |a: f64| {
            let p = ActQuantParams::new(0.0, a * 20.0, 4).unwrap();
            vals.iter().map(|v| (v - p.apply(*v)).powi(2)).sum::<f64>() / vals.len() as f64
        };
        let best = (0..96).map(|j| mse(1.0 - j as f64 / 128.0)).fold(f64::INFINITY, f64::min);
        assert_eq!(sel.mse, best);
    }

    #[test]
    fn constant_activation_is_flagged() {
        let z = Tensor::zeros(&[10]);
        let sel = select_activation_range(&[&z], 8, 96).unwrap();
        assert!(sel.flagged);
        assert!(sel.params.lo < sel.params.hi);
    }

    proptest! {
        #[test]
        fn scale_equivariance_and_argmin_invariance(
            vals in proptest::collection::vec(-2.0f64..2.0, 2..24),
            hs in proptest::collection::vec(0.01f64..10.0, 24),
            k in 1u32..8,
            c in 0.1f64..50.0,
        ) {
            prop_assume!(vals.iter().any(|v| v.abs() > 1e-3));
            let w = t(&vals);
            let k = (1u64 << k) as f64;
            let h = &hs[..vals.len()];
            let spec = ThresholdSearchSpec::default();
            let base = select_threshold(&w, Some(h), 3, &spec).unwrap();
            let scaled = select_threshold(&w.scale(k), Some(h), 3, &spec).unwrap();
            prop_assert_eq!(base.thresholds[0] * k, scaled.thresholds[0]);
            let ch: Vec<f64> = h.iter().map(|v| v * c).collect();
            let again = select_threshold(&w, Some(&ch), 3, &spec).unwrap();
            prop_assert_eq!(&base.thresholds, &again.thresholds);
            let mse = select_threshold(&w, Some(h), 3, &ThresholdSearchSpec { metric: Metric::Mse, ..spec }).unwrap();
            let p = |t: f64| WeightQuantParams::new(vec![t], 3).unwrap();
            let e_h = hmse(&w, &quant::quantize_weights_nearest(&w, &p(base.thresholds[0])).unwrap(), h).unwrap();
            let e_m = hmse(&w, &quant::quantize_weights_nearest(&w, &p(mse.thresholds[0])).unwrap(), h).unwrap();
            prop_assert!(e_h <= e_m);
        }
    }
}
