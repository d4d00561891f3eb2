//! Weight and activation quantizers.
//!
//! Weights use a symmetric per-channel grid with step `s_c = t_c / 2^(bits-1)`
//! and integer codes in `[-2^(bits-1), 2^(bits-1) - 1]`. The channel axis is
//! always the leading axis of the weight tensor (output features for Dense,
//! output channels for Conv2d).
//!
//! Learned rounding uses the rectified sigmoid
//! `h(v) = clamp(sigmoid(v) * (ZETA - GAMMA) + GAMMA, 0, 1)` to pick a point
//! between the floor and ceiling grid levels. Activations use an affine
//! per-tensor grid over `[lo, hi]`.
//!
//! A bit-width of 32 means "unquantized": every quantizer is the identity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower stretch of the rectified sigmoid.
pub const GAMMA: f64 = -0.1;
/// Upper stretch of the rectified sigmoid.
pub const ZETA: f64 = 1.1;

pub const UNQUANTIZED_BITS: u32 = 32;

pub fn validate_bits(bits: u32) -> Result<()> {
    if (2..=16).contains(&bits) || bits == UNQUANTIZED_BITS {
        Ok(())
    } else {
        Err(Error::Quant(format!("bit-width {bits} not in 2..=16 or 32")))
    }
}

/// Rounds half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    // f64::round is specified as half away from zero.
    x.round()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `h(v)`, the rectified sigmoid.
#[inline]
pub fn rectified_sigmoid(v: f64) -> f64 {
    (sigmoid(v) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

/// `dh/dv`; zero where the clamp is active.
#[inline]
pub fn rectified_sigmoid_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    let pre = s * (ZETA - GAMMA) + GAMMA;
    if (0.0..=1.0).contains(&pre) {
        (ZETA - GAMMA) * s * (1.0 - s)
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn code_range(bits: u32) -> (f64, f64) {
    let half = (1u64 << (bits - 1)) as f64;
    (-half, half - 1.0)
}

/// Per-channel quantization parameters of one weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightQuantParams {
    /// Per-channel thresholds `t_c > 0`.
    pub thresholds: Vec<f64>,
    pub bits: u32,
    /// Rounding variables `v`, shaped like the weight.
    #[serde(skip)]
    pub rounding: Option<Tensor>,
    /// Thresholds of the grid that `floor(w/s)` is taken on when rounding is
    /// learned; `None` means `thresholds`. Lets the step be trained without
    /// moving the rounding base.
    #[serde(skip)]
    pub rounding_base: Option<Vec<f64>>,
}

impl WeightQuantParams {
    pub fn new(thresholds: Vec<f64>, bits: u32) -> Result<Self> {
        validate_bits(bits)?;
        if thresholds.is_empty() {
            return Err(Error::Quant("no thresholds".into()));
        }
        if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::Quant(format!("non-positive threshold {t}")));
        }
        Ok(Self {
            thresholds,
            bits,
            rounding: None,
            rounding_base: None,
        })
    }

    pub fn is_quantized(&self) -> bool {
        self.bits != UNQUANTIZED_BITS
    }

    /// Per-channel step sizes `s_c = t_c / 2^(bits-1)`.
    pub fn steps(&self) -> Vec<f64> {
        thresholds_to_steps(&self.thresholds, self.bits)
    }

    /// Steps of the rounding base grid.
    pub fn rounding_steps(&self) -> Vec<f64> {
        thresholds_to_steps(self.rounding_base.as_ref().unwrap_or(&self.thresholds), self.bits)
    }

    fn check(&self, w: &Tensor) -> Result<()> {
        if w.rank() == 0 || w.shape()[0] != self.thresholds.len() {
            return Err(Error::Shape(format!(
                "weight {:?} has {} channels, params have {}",
                w.shape(),
                w.shape().first().copied().unwrap_or(0),
                self.thresholds.len()
            )));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0)) {
            return Err(Error::Quant(format!("non-positive threshold {t}")));
        }
        Ok(())
    }
}

pub fn thresholds_to_steps(thresholds: &[f64], bits: u32) -> Vec<f64> {
    let half = (1u64 << (bits.min(31) - 1)) as f64;
    thresholds.iter().map(|t| t / half).collect()
}

pub fn steps_to_thresholds(steps: &[f64], bits: u32) -> Vec<f64> {
    let half = (1u64 << (bits.min(31) - 1)) as f64;
    steps.iter().map(|s| s * half).collect()
}

/// Round-to-nearest with explicit per-channel steps; returns the integer codes.
pub(crate) fn nearest_codes(w: &Tensor, steps: &[f64], bits: u32) -> Vec<f64> {
    let (qmin, qmax) = code_range(bits);
    let inner = w.len() / steps.len();
    w.data()
        .iter()
        .enumerate()
        .map(|(i, &x)| round_half_away(x / steps[i / inner]).clamp(qmin, qmax))
        .collect()
}

/// Codes `clamp(floor(w/base) + h(v))` of the soft (or hard) learned rounding.
pub(crate) fn soft_codes(w: &Tensor, v: &Tensor, base: &[f64], bits: u32, hard: bool) -> Vec<f64> {
    let (qmin, qmax) = code_range(bits);
    let inner = w.len() / base.len();
    w.data()
        .iter()
        .zip(v.data())
        .enumerate()
        .map(|(i, (&x, &vi))| {
            let h = if hard {
                if vi >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                rectified_sigmoid(vi)
            };
            ((x / base[i / inner]).floor() + h).clamp(qmin, qmax)
        })
        .collect()
}

pub(crate) fn codes_to_values(codes: &[f64], steps: &[f64], shape: &[usize]) -> Tensor {
    let inner = codes.len() / steps.len();
    let data = codes
        .iter()
        .enumerate()
        .map(|(i, q)| q * steps[i / inner])
        .collect();
    Tensor::new(shape.to_vec(), data).expect("codes match weight shape")
}

/// Round-to-nearest symmetric quantization. Ties round away from zero.
pub fn quantize_weights_nearest(w: &Tensor, p: &WeightQuantParams) -> Result<Tensor> {
    p.check(w)?;
    if !p.is_quantized() {
        return Ok(w.clone());
    }
    let steps = p.steps();
    let codes = nearest_codes(w, &steps, p.bits);
    Ok(codes_to_values(&codes, &steps, w.shape()))
}

/// Learned-rounding quantization `clamp(floor(w/s) + h(v)) * s`.
///
/// With `hard` the rectified sigmoid is replaced by the indicator `v >= 0`.
pub fn quantize_weights_soft(w: &Tensor, p: &WeightQuantParams, hard: bool) -> Result<Tensor> {
    p.check(w)?;
    let v = p
        .rounding
        .as_ref()
        .ok_or_else(|| Error::Quant("rounding variables not initialized".into()))?;
    if v.shape() != w.shape() {
        return Err(Error::Shape(format!(
            "rounding {:?} vs weight {:?}",
            v.shape(),
            w.shape()
        )));
    }
    if !p.is_quantized() {
        return Ok(w.clone());
    }
    let codes = soft_codes(w, v, &p.rounding_steps(), p.bits, hard);
    Ok(codes_to_values(&codes, &p.steps(), w.shape()))
}

/// Rounding variables whose hard rounding reproduces round-to-nearest and
/// whose soft value reproduces the fractional residual `w/s - floor(w/s)`.
pub fn init_rounding(w: &Tensor, p: &WeightQuantParams) -> Result<Tensor> {
    p.check(w)?;
    let steps = if p.is_quantized() {
        p.rounding_steps()
    } else {
        vec![1.0; p.thresholds.len()]
    };
    let inner = w.len() / steps.len();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let scaled = x / steps[i / inner];
            let floor = scaled.floor();
            let r = (scaled - floor).clamp(0.0, 1.0 - 1e-12);
            let v = -((ZETA - GAMMA) / (r - GAMMA) - 1.0).ln();
            // pin the sign so that the hard rounding matches nearest exactly
            if round_half_away(scaled) > floor {
                v.max(0.0)
            } else {
                v.min(-1e-12)
            }
        })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Per-tensor affine activation quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuantParams {
    pub lo: f64,
    pub hi: f64,
    pub bits: u32,
}

impl ActQuantParams {
    pub fn new(lo: f64, hi: f64, bits: u32) -> Result<Self> {
        validate_bits(bits)?;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Quant(format!("degenerate activation range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi, bits })
    }

    pub fn is_quantized(&self) -> bool {
        self.bits != UNQUANTIZED_BITS
    }

    pub fn levels(&self) -> f64 {
        ((1u64 << self.bits.min(31)) - 1) as f64
    }

    pub fn delta(&self) -> f64 {
        (self.hi - self.lo) / self.levels()
    }

    #[inline]
    pub(crate) fn apply(&self, z: f64) -> f64 {
        let delta = self.delta();
        let q = round_half_away((z - self.lo) / delta).clamp(0.0, self.levels());
        q * delta + self.lo
    }
}

/// Uniform affine quantization onto `2^bits` levels spanning `[lo, hi]`.
pub fn quantize_activation(z: &Tensor, p: &ActQuantParams) -> Result<Tensor> {
    if !(p.lo < p.hi) {
        return Err(Error::Quant(format!(
            "degenerate activation range [{}, {}]",
            p.lo, p.hi
        )));
    }
    if !p.is_quantized() {
        return Ok(z.clone());
    }
    Ok(z.map(|x| p.apply(x)))
}

/// `P * z_float + (1 - P) * z_quant`, elementwise.
pub fn gradual_mix(z_float: &Tensor, z_quant: &Tensor, p: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("mix fraction {p} outside [0, 1]")));
    }
    z_float.zip_map(z_quant, |f, q| p * f + (1.0 - p) * q)
}

/// Linear decay of the float fraction of each layer's activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradualSchedule {
    /// Initial fraction for layers without an explicit entry.
    pub default_p0: f64,
    pub p0: BTreeMap<String, f64>,
    pub iterations: usize,
    pub decay_iterations: usize,
}

impl GradualSchedule {
    pub fn new(default_p0: f64, iterations: usize, decay_iterations: usize) -> Self {
        Self {
            default_p0,
            p0: BTreeMap::new(),
            iterations,
            decay_iterations,
        }
    }

    pub fn initial(&self, layer: &str) -> f64 {
        self.p0.get(layer).copied().unwrap_or(self.default_p0)
    }

    /// `P0 * max(0, 1 - i / N_decay)`.
    pub fn schedule_p(&self, layer: &str, iter: usize) -> f64 {
        let p0 = self.initial(layer);
        if self.decay_iterations == 0 {
            return 0.0;
        }
        p0 * (1.0 - iter as f64 / self.decay_iterations as f64).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(t: f64, bits: u32) -> WeightQuantParams {
        WeightQuantParams::new(vec![t], bits).unwrap()
    }

    fn w1(values: &[f64]) -> Tensor {
        Tensor::new(vec![1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn nearest_zero_stays_zero() {
        for bits in [2, 3, 8] {
            let q = quantize_weights_nearest(&w1(&[0.0]), &params(0.7, bits)).unwrap();
            assert_eq!(q.data(), &[0.0]);
        }
    }

    #[test]
    fn nearest_two_bit_examples() {
        let q = quantize_weights_nearest(&w1(&[0.3, -1.2]), &params(1.0, 2)).unwrap();
        assert_eq!(q.data(), &[0.5, -1.0]);
    }

    #[test]
    fn nearest_ties_round_away_from_zero() {
        // s = 0.25 at bits=3, t=1
        let q = quantize_weights_nearest(&w1(&[0.125, -0.125]), &params(1.0, 3)).unwrap();
        assert_eq!(q.data(), &[0.25, -0.25]);
    }

    #[test]
    fn nearest_error_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = w1(&vals);
            let t = w.max_abs();
            let p = params(t, 8);
            let s = p.steps()[0];
            let q = quantize_weights_nearest(&w, &p).unwrap();
            for (a, b) in w.data().iter().zip(q.data()) {
                if *a > 127.0 * s {
                    continue; // positive clamp edge
                }
                assert!((a - b).abs() <= s / 2.0 + 1e-15);
            }
        }
    }

    #[test]
    fn rejects_non_positive_threshold() {
        assert!(WeightQuantParams::new(vec![0.0], 4).is_err());
        let mut p = params(1.0, 4);
        p.thresholds[0] = -1.0;
        assert!(quantize_weights_nearest(&w1(&[1.0]), &p).is_err());
    }

    #[test]
    fn soft_saturated_is_ceil() {
        let w = w1(&[0.3, -0.3, 0.74]);
        let mut p = params(1.0, 3); // s = 0.25
        p.rounding = Some(Tensor::filled(&[1, 3], 50.0));
        let q = quantize_weights_soft(&w, &p, false).unwrap();
        assert_eq!(q.data(), &[0.5, -0.25, 0.75]);
    }

    #[test]
    fn soft_at_zero_is_midpoint() {
        assert!((rectified_sigmoid(0.0) - 0.5).abs() < 1e-15);
        let w = w1(&[0.3]);
        let mut p = params(1.0, 3);
        p.rounding = Some(Tensor::zeros(&[1, 1]));
        let q = quantize_weights_soft(&w, &p, false).unwrap();
        assert!((q.data()[0] - 1.5 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn soft_rejects_mismatched_rounding() {
        let mut p = params(1.0, 3);
        p.rounding = Some(Tensor::zeros(&[1, 2]));
        assert!(quantize_weights_soft(&w1(&[0.1]), &p, false).is_err());
    }

    #[test]
    fn initialized_rounding_hard_equals_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..4 * 50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = Tensor::new(vec![4, 50], vals).unwrap();
        let mut p = WeightQuantParams::new(vec![1.5, 2.0, 0.8, 1.0], 4).unwrap();
        p.rounding = Some(init_rounding(&w, &p).unwrap());
        let hard = quantize_weights_soft(&w, &p, true).unwrap();
        let nearest = quantize_weights_nearest(&w, &p).unwrap();
        assert_eq!(hard, nearest);
        // the soft path reproduces the (clamped) float weight
        let soft = quantize_weights_soft(&w, &p, false).unwrap();
        let steps = p.steps();
        for (i, (a, b)) in w.data().iter().zip(soft.data()).enumerate() {
            let s = steps[i / 50];
            if *a > -8.0 * s && *a < 7.0 * s {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn initialized_rounding_handles_negative_ties() {
        let w = w1(&[-0.375, 0.375, -0.125]);
        let mut p = params(1.0, 3);
        p.rounding = Some(init_rounding(&w, &p).unwrap());
        let hard = quantize_weights_soft(&w, &p, true).unwrap();
        assert_eq!(hard, quantize_weights_nearest(&w, &p).unwrap());
    }

    #[test]
    fn activation_examples() {
        let p = ActQuantParams::new(0.0, 1.0, 2).unwrap();
        let q = quantize_activation(&Tensor::vector(vec![0.4, 2.0 / 3.0, 1.0, -1.0]), &p).unwrap();
        assert!((q.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(q.data()[1], 2.0 / 3.0);
        assert_eq!(q.data()[2], 1.0);
        assert_eq!(q.data()[3], 0.0);
        assert!(ActQuantParams::new(1.0, 1.0, 8).is_err());
    }

    #[test]
    fn activation_error_bounded_by_half_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::vector((0..500).map(|_| rng.random_range(-4.0..9.0)).collect());
        let lo = z.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let p = ActQuantParams::new(lo, hi, 8).unwrap();
        let q = quantize_activation(&z, &p).unwrap();
        let err = z.zip_map(&q, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(err <= p.delta() / 2.0 + 1e-12);
    }

    #[test]
    fn mix_endpoints() {
        let f = Tensor::vector(vec![2.0, -1.0]);
        let q = Tensor::vector(vec![0.0, 3.0]);
        assert_eq!(gradual_mix(&f, &q, 1.0).unwrap(), f);
        assert_eq!(gradual_mix(&f, &q, 0.0).unwrap(), q);
        assert_eq!(gradual_mix(&f, &q, 0.5).unwrap().data()[0], 1.0);
        assert!(gradual_mix(&f, &Tensor::vector(vec![1.0]), 0.5).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = GradualSchedule::new(1.0, 200, 100);
        assert_eq!(s.schedule_p("a", 0), 1.0);
        assert_eq!(s.schedule_p("a", 100), 0.0);
        assert_eq!(s.schedule_p("a", 25), 0.75);
        assert_eq!(s.schedule_p("a", 180), 0.0);
        let mut s2 = GradualSchedule::new(1.0, 10, 5);
        s2.p0.insert("b".into(), 0.5);
        assert_eq!(s2.schedule_p("b", 0), 0.5);
    }

    proptest! {
        #[test]
        fn nearest_is_idempotent_and_on_grid(
            vals in proptest::collection::vec(-5.0f64..5.0, 1..40),
            t in 0.1f64..6.0,
            bits in 2u32..9,
        ) {
            let w = w1(&vals);
            let p = params(t, bits);
            let q = quantize_weights_nearest(&w, &p).unwrap();
            let qq = quantize_weights_nearest(&q, &p).unwrap();
            prop_assert_eq!(&q, &qq);
            let s = p.steps()[0];
            let (qmin, qmax) = code_range(bits);
            for x in q.data() {
                let code = x / s;
                prop_assert!((code - code.round()).abs() < 1e-9);
                prop_assert!(code >= qmin - 1e-9 && code <= qmax + 1e-9);
            }
        }

        #[test]
        fn nearest_is_monotone(a in -5.0f64..5.0, b in -5.0f64..5.0, t in 0.1f64..6.0, bits in 2u32..9) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let q = quantize_weights_nearest(&w1(&[lo, hi]), &params(t, bits)).unwrap();
            prop_assert!(q.data()[0] <= q.data()[1]);
        }

        #[test]
        fn soft_and_hard_agree_when_saturated(
            vals in proptest::collection::vec(-3.0f64..3.0, 1..30),
            signs in proptest::collection::vec(proptest::bool::ANY, 30),
        ) {
            let w = w1(&vals);
            let mut p = params(2.0, 4);
            let v: Vec<f64> = (0..vals.len()).map(|i| if signs[i] { 10.0 } else { -10.0 }).collect();
            p.rounding = Some(Tensor::new(vec![1, vals.len()], v).unwrap());
            let soft = quantize_weights_soft(&w, &p, false).unwrap();
            let hard = quantize_weights_soft(&w, &p, true).unwrap();
            prop_assert_eq!(soft, hard);
        }

        #[test]
        fn activation_quant_idempotent(vals in proptest::collection::vec(-2.0f64..2.0, 1..30), bits in 2u32..9) {
            let p = ActQuantParams::new(-1.0, 1.5, bits).unwrap();
            let z = Tensor::vector(vals);
            let q = quantize_activation(&z, &p).unwrap();
            let qq = quantize_activation(&q, &p).unwrap();
            for (a, b) in q.data().iter().zip(qq.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn schedule_non_increasing(p0 in 0.0f64..1.0, n in 1usize..500) {
            let s = GradualSchedule::new(p0, n * 2, n);
            let mut prev = f64::INFINITY;
            for i in 0..=n * 2 {
                let p = s.schedule_p("x", i);
                prop_assert!(p <= prev);
                prev = p;
            }
            prop_assert_eq!(s.schedule_p("x", n), 0.0);
        }
    }
}
