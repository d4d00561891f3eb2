//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every recorded value is produced by exactly one [`Op`] and stored on the
//! tape, so nodes are topologically ordered by construction. Backward passes
//! never mutate the tape; a recorded tape can be shared read-only.
//!
//! All network tensors carry a leading batch axis. Channel-wise ops (bias,
//! batch-norm affine, concatenation) use axis 1.
//!
//! Two ops are not differentiated exactly: [`Op::ActQuant`] passes gradients
//! straight through inside its range, and [`Op::NearestRound`] /
//! [`Op::SoftRound`] do not propagate to the float weight (the floor is
//! locally constant).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::quant::{self, ActQuantParams};
use crate::tensor::{Matrix, Tensor};

/// Handle of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise weight of the first operand of [`Op::Blend`].
#[derive(Debug, Clone, PartialEq)]
pub enum BlendWeight {
    Uniform(f64),
    /// One weight per element, typically a 0/1 mask.
    Elementwise(Vec<f64>),
}

impl BlendWeight {
    #[inline]
    fn at(&self, i: usize) -> f64 {
        match self {
            BlendWeight::Uniform(p) => *p,
            BlendWeight::Elementwise(w) => w[i],
        }
    }
}

/// A primitive operation. Inputs always precede the node that uses them.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    /// `x [N, in] · wᵀ`, `w [out, in]`.
    Dense { x: TensorId, w: TensorId },
    /// Adds `b [C]` along axis 1.
    BiasAdd { x: TensorId, b: TensorId },
    /// NCHW convolution, `w [O, C, KH, KW]`.
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    },
    /// Inference batch norm: `scale[c] * x + shift[c]` along axis 1.
    Affine {
        x: TensorId,
        scale: Vec<f64>,
        shift: Vec<f64>,
    },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    /// Softmax over all non-batch elements of each sample.
    Softmax { x: TensorId },
    Add { a: TensorId, b: TensorId },
    /// Concatenation along axis 1.
    Concat { inputs: Vec<TensorId> },
    Flatten { x: TensorId },
    AvgPool {
        x: TensorId,
        kernel: usize,
        stride: usize,
    },
    /// Round-to-nearest weight quantization with per-channel `step [C]`.
    NearestRound {
        w: TensorId,
        step: TensorId,
        bits: u32,
    },
    /// Learned-rounding weight quantization.
    SoftRound {
        w: TensorId,
        v: TensorId,
        step: TensorId,
        /// Steps of the rounding base; `None` floors on `step` itself.
        base: Option<Vec<f64>>,
        bits: u32,
        hard: bool,
    },
    ActQuant { x: TensorId, params: ActQuantParams },
    /// `weight * a + (1 - weight) * b`.
    Blend {
        a: TensorId,
        b: TensorId,
        weight: BlendWeight,
    },
}

impl Op {
    fn inputs(&self) -> Vec<TensorId> {
        match self {
            Op::Leaf => vec![],
            Op::Dense { x, w } => vec![*x, *w],
            Op::BiasAdd { x, b } => vec![*x, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Affine { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Softmax { x }
            | Op::Flatten { x }
            | Op::AvgPool { x, .. }
            | Op::ActQuant { x, .. } => vec![*x],
            Op::Add { a, b } | Op::Blend { a, b, .. } => vec![*a, *b],
            Op::Concat { inputs } => inputs.clone(),
            Op::NearestRound { w, step, .. } => vec![*w, *step],
            Op::SoftRound { w, v, step, .. } => vec![*w, *v, *step],
        }
    }
}

/// Recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    output: Option<TensorId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.ops.push(Op::Leaf);
        self.values.push(value);
        TensorId(self.values.len() - 1)
    }

    /// Evaluates `op` on recorded values and appends the result.
    pub fn record(&mut self, op: Op) -> Result<TensorId> {
        for id in op.inputs() {
            if id.0 >= self.values.len() {
                return Err(Error::NotOnTape(id.0));
            }
        }
        let value = eval(&op, &self.values)?;
        self.ops.push(op);
        self.values.push(value);
        Ok(TensorId(self.values.len() - 1))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn contains(&self, id: TensorId) -> bool {
        id.0 < self.values.len()
    }

    pub fn set_output(&mut self, id: TensorId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<TensorId> {
        self.output
    }

    fn output_id(&self) -> Result<TensorId> {
        self.output
            .ok_or_else(|| Error::InvalidArgument("tape has no output".into()))
    }

    /// `vᵀ J` of the tape output with respect to every target.
    pub fn vjp(&self, seed: &Tensor, targets: &[TensorId]) -> Result<BTreeMap<TensorId, Tensor>> {
        let out = self.output_id()?;
        let grads = self.backward(&[(out, seed.clone())], targets)?;
        Ok(targets.iter().copied().zip(grads).collect())
    }

    /// Reverse pass from cotangents seeded at arbitrary nodes.
    ///
    /// The returned gradients are in `targets` order; targets the seeds do
    /// not reach get zeros.
    pub fn backward(&self, seeds: &[(TensorId, Tensor)], targets: &[TensorId]) -> Result<Vec<Tensor>> {
        for t in targets {
            if !self.contains(*t) {
                return Err(Error::NotOnTape(t.0));
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        let mut top = 0;
        for (id, seed) in seeds {
            if !self.contains(*id) {
                return Err(Error::NotOnTape(id.0));
            }
            if seed.shape() != self.values[id.0].shape() {
                return Err(Error::Shape(format!(
                    "seed {:?} vs recorded {:?}",
                    seed.shape(),
                    self.values[id.0].shape()
                )));
            }
            accumulate(&mut grads[id.0], seed.clone());
            top = top.max(id.0 + 1);
        }
        let lowest = targets.iter().map(|t| t.0).min().unwrap_or(0);
        for i in (lowest..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            backward_op(&self.ops[i], &self.values, &self.values[i], &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(targets
            .iter()
            .map(|t| {
                grads[t.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.values[t.0].shape()))
            })
            .collect())
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        self.replay_inner(None)
    }

    /// Output of a replay where `target` (leaf or intermediate) is shifted by
    /// `delta` before downstream nodes consume it.
    pub fn replay_perturbed(&self, target: TensorId, delta: &Tensor) -> Result<Tensor> {
        let out = self.output_id()?;
        let values = self.replay_inner(Some((target, delta)))?;
        Ok(values[out.0].clone())
    }

    fn replay_inner(&self, perturb: Option<(TensorId, &Tensor)>) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.values.len());
        for (i, op) in self.ops.iter().enumerate() {
            let mut v = match op {
                Op::Leaf => self.values[i].clone(),
                _ => eval(op, &values)?,
            };
            if let Some((t, delta)) = perturb {
                if t.0 == i {
                    v.add_scaled(delta, 1.0)?;
                }
            }
            values.push(v);
        }
        Ok(values)
    }

    /// Central-difference Jacobian of the flattened output with respect to
    /// `target`; row `i` is `∂out_i / ∂target`.
    pub fn finite_diff_jacobian(&self, target: TensorId, step: f64) -> Result<Matrix> {
        let out = self.output_id()?;
        if !self.contains(target) {
            return Err(Error::NotOnTape(target.0));
        }
        let shape = self.values[target.0].shape().to_vec();
        let n_in = self.values[target.0].len();
        let n_out = self.values[out.0].len();
        let mut jac = Matrix::zeros(n_out, n_in);
        let mut delta = Tensor::zeros(&shape);
        for j in 0..n_in {
            delta.data_mut()[j] = step;
            let plus = self.replay_perturbed(target, &delta)?;
            delta.data_mut()[j] = -step;
            let minus = self.replay_perturbed(target, &delta)?;
            delta.data_mut()[j] = 0.0;
            plus.check_finite("finite-difference forward")?;
            minus.check_finite("finite-difference forward")?;
            for i in 0..n_out {
                jac[(i, j)] = (plus.data()[i] - minus.data()[i]) / (2.0 * step);
            }
        }
        Ok(jac)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn shape_err(what: &str, shapes: &[&[usize]]) -> Error {
    Error::Shape(format!("{what}: {shapes:?}"))
}

fn channel_inner(shape: &[usize]) -> (usize, usize) {
    let c = if shape.len() > 1 { shape[1] } else { 1 };
    let inner = shape.get(2..).map(|s| s.iter().product()).unwrap_or(1);
    (c, inner)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

fn eval(op: &Op, values: &[Tensor]) -> Result<Tensor> {
    let get = |id: &TensorId| -> Result<&Tensor> { values.get(id.0).ok_or(Error::NotOnTape(id.0)) };
    match op {
        Op::Leaf => Err(Error::InvalidArgument("leaf has no evaluation".into())),
        Op::Dense { x, w } => {
            let (x, w) = (get(x)?, get(w)?);
            if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
                return Err(shape_err("dense", &[x.shape(), w.shape()]));
            }
            let (n, k, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
            let mut out = vec![0.0; n * m];
            for b in 0..n {
                let xr = &x.data()[b * k..(b + 1) * k];
                for o in 0..m {
                    let wr = &w.data()[o * k..(o + 1) * k];
                    out[b * m + o] = xr.iter().zip(wr).map(|(a, c)| a * c).sum();
                }
            }
            Tensor::new(vec![n, m], out)
        }
        Op::BiasAdd { x, b } => {
            let (x, b) = (get(x)?, get(b)?);
            let (c, inner) = channel_inner(x.shape());
            if b.len() != c || x.rank() < 2 {
                return Err(shape_err("bias", &[x.shape(), b.shape()]));
            }
            let mut out = x.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[(i / inner) % c];
            }
            Ok(out)
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (x, w) = (get(x)?, get(w)?);
            conv2d_forward(x, w, *stride, *pad)
        }
        Op::Affine { x, scale, shift } => {
            let x = get(x)?;
            let (c, inner) = channel_inner(x.shape());
            if scale.len() != c || shift.len() != c || x.rank() < 2 {
                return Err(shape_err("batchnorm", &[x.shape()]));
            }
            let mut out = x.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let ch = (i / inner) % c;
                *v = scale[ch] * *v + shift[ch];
            }
            Ok(out)
        }
        Op::Relu { x } => Ok(get(x)?.map(|v| v.max(0.0))),
        Op::Sigmoid { x } => Ok(get(x)?.map(quant::sigmoid)),
        Op::Softmax { x } => {
            let x = get(x)?;
            let inner = x.inner_len();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(inner) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Ok(out)
        }
        Op::Add { a, b } => {
            let (a, b) = (get(a)?, get(b)?);
            a.zip_map(b, |p, q| p + q)
        }
        Op::Concat { inputs } => {
            let parts: Vec<&Tensor> = inputs.iter().map(get).collect::<Result<_>>()?;
            concat_forward(&parts)
        }
        Op::Flatten { x } => {
            let x = get(x)?;
            let (n, inner) = (x.batch(), x.inner_len());
            x.clone().reshape(vec![n, inner])
        }
        Op::AvgPool { x, kernel, stride } => avgpool_forward(get(x)?, *kernel, *stride),
        Op::NearestRound { w, step, bits } => {
            let (w, step) = (get(w)?, get(step)?);
            check_channels(w, step)?;
            let codes = quant::nearest_codes(w, step.data(), *bits);
            Ok(quant::codes_to_values(&codes, step.data(), w.shape()))
        }
        Op::SoftRound {
            w,
            v,
            step,
            base,
            bits,
            hard,
        } => {
            let (w, v, step) = (get(w)?, get(v)?, get(step)?);
            check_channels(w, step)?;
            w.expect_same_shape(v)?;
            let base = base.as_deref().unwrap_or(step.data());
            if base.len() != step.len() {
                return Err(Error::Shape(format!("{} base steps for {} channels", base.len(), step.len())));
            }
            let codes = quant::soft_codes(w, v, base, *bits, *hard);
            Ok(quant::codes_to_values(&codes, step.data(), w.shape()))
        }
        Op::ActQuant { x, params } => quant::quantize_activation(get(x)?, params),
        Op::Blend { a, b, weight } => {
            let (a, b) = (get(a)?, get(b)?);
            a.expect_same_shape(b)?;
            if let BlendWeight::Elementwise(m) = weight {
                if m.len() != a.len() {
                    return Err(shape_err("blend mask", &[a.shape()]));
                }
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .enumerate()
                .map(|(i, (p, q))| {
                    let wt = weight.at(i);
                    wt * p + (1.0 - wt) * q
                })
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
    }
}

fn check_channels(w: &Tensor, step: &Tensor) -> Result<()> {
    if step.rank() != 1 || w.shape()[0] != step.len() {
        return Err(shape_err("per-channel step", &[w.shape(), step.shape()]));
    }
    if step.data().iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Quant("non-positive step".into()));
    }
    Ok(())
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] || stride == 0 {
        return Err(shape_err("conv2d", &[x.shape(), w.shape()]));
    }
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let (ho, wo) = match (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err("conv2d kernel larger than input", &[x.shape(), w.shape()])),
    };
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                acc += xd[xi] * wdat[wi];
                            }
                        }
                    }
                    out[((b * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out)
}

fn concat_forward(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    if first.rank() < 2 {
        return Err(shape_err("concat", &[first.shape()]));
    }
    let n = first.batch();
    let rest: Vec<usize> = first.shape()[2..].to_vec();
    let mut channels = 0;
    for p in parts {
        if p.rank() != first.rank() || p.batch() != n || p.shape()[2..] != rest[..] {
            return Err(shape_err("concat", &[first.shape(), p.shape()]));
        }
        channels += p.shape()[1];
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for b in 0..n {
        for p in parts {
            let inner = p.inner_len();
            data.extend_from_slice(&p.data()[b * inner..(b + 1) * inner]);
        }
    }
    let mut shape = vec![n, channels];
    shape.extend(rest);
    Tensor::new(shape, data)
}

fn avgpool_forward(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    if x.rank() != 4 || k == 0 || stride == 0 {
        return Err(shape_err("avgpool", &[x.shape()]));
    }
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (ho, wo) = match (conv_out(h, k, stride, 0), conv_out(w, k, stride, 0)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err("avgpool kernel larger than input", &[x.shape()])),
    };
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for bc in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += x.data()[(bc * h + oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out[(bc * ho + oy) * wo + ox] = acc * norm;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

fn add_grad(grads: &mut [Option<Tensor>], id: TensorId, g: Tensor) {
    accumulate(&mut grads[id.0], g);
}

fn backward_op(op: &Op, values: &[Tensor], out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    match op {
        Op::Leaf => {}
        Op::Dense { x, w } => {
            let (xv, wv) = (&values[x.0], &values[w.0]);
            let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
            let mut gx = vec![0.0; n * k];
            let mut gw = vec![0.0; m * k];
            for b in 0..n {
                for o in 0..m {
                    let go = g.data()[b * m + o];
                    if go == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        gx[b * k + j] += go * wv.data()[o * k + j];
                        gw[o * k + j] += go * xv.data()[b * k + j];
                    }
                }
            }
            add_grad(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            add_grad(grads, *w, Tensor::new(wv.shape().to_vec(), gw).unwrap());
        }
        Op::BiasAdd { x, b } => {
            let (c, inner) = channel_inner(g.shape());
            let mut gb = vec![0.0; c];
            for (i, v) in g.data().iter().enumerate() {
                gb[(i / inner) % c] += v;
            }
            add_grad(grads, *x, g.clone());
            add_grad(grads, *b, Tensor::new(values[b.0].shape().to_vec(), gb).unwrap());
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (xv, wv) = (&values[x.0], &values[w.0]);
            let (gx, gw) = conv2d_backward(xv, wv, g, *stride, *pad);
            add_grad(grads, *x, gx);
            add_grad(grads, *w, gw);
        }
        Op::Affine { x, scale, .. } => {
            let (c, inner) = channel_inner(g.shape());
            let mut gx = g.clone();
            for (i, v) in gx.data_mut().iter_mut().enumerate() {
                *v *= scale[(i / inner) % c];
            }
            add_grad(grads, *x, gx);
        }
        Op::Relu { x } => {
            let xv = &values[x.0];
            let gx = xv.zip_map(g, |a, gg| if a > 0.0 { gg } else { 0.0 }).unwrap();
            add_grad(grads, *x, gx);
        }
        Op::Sigmoid { x } => {
            let gx = out.zip_map(g, |s, gg| gg * s * (1.0 - s)).unwrap();
            add_grad(grads, *x, gx);
        }
        Op::Softmax { x } => {
            let inner = out.inner_len();
            let mut gx = g.clone();
            for (row, (s, gr)) in gx
                .data_mut()
                .chunks_mut(inner)
                .zip(out.data().chunks(inner).zip(g.data().chunks(inner)))
            {
                let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (i, v) in row.iter_mut().enumerate() {
                    *v = s[i] * (gr[i] - dot);
                }
            }
            add_grad(grads, *x, gx);
        }
        Op::Add { a, b } => {
            add_grad(grads, *a, g.clone());
            add_grad(grads, *b, g.clone());
        }
        Op::Concat { inputs } => {
            let n = g.batch();
            let total = g.inner_len();
            let mut offset = 0;
            for id in inputs {
                let shape = values[id.0].shape().to_vec();
                let inner = values[id.0].inner_len();
                let mut part = Vec::with_capacity(n * inner);
                for b in 0..n {
                    let start = b * total + offset;
                    part.extend_from_slice(&g.data()[start..start + inner]);
                }
                offset += inner;
                add_grad(grads, *id, Tensor::new(shape, part).unwrap());
            }
        }
        Op::Flatten { x } => {
            let shape = values[x.0].shape().to_vec();
            add_grad(grads, *x, g.clone().reshape(shape).unwrap());
        }
        Op::AvgPool { x, kernel, stride } => {
            let xv = &values[x.0];
            let [_, _, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
            let (ho, wo) = (g.shape()[2], g.shape()[3]);
            let nc = xv.shape()[0] * xv.shape()[1];
            let norm = 1.0 / (kernel * kernel) as f64;
            let mut gx = vec![0.0; xv.len()];
            for bc in 0..nc {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = g.data()[(bc * ho + oy) * wo + ox] * norm;
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                gx[(bc * h + oy * stride + ky) * w + ox * stride + kx] += gv;
                            }
                        }
                    }
                }
            }
            add_grad(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
        }
        Op::NearestRound { step, .. } => {
            let steps = values[step.0].data();
            let inner = out.len() / steps.len();
            let mut gs = vec![0.0; steps.len()];
            for (i, (o, gg)) in out.data().iter().zip(g.data()).enumerate() {
                let c = i / inner;
                gs[c] += gg * o / steps[c];
            }
            add_grad(grads, *step, Tensor::new(vec![steps.len()], gs).unwrap());
        }
        Op::SoftRound {
            w,
            v,
            step,
            base,
            bits,
            hard,
        } => {
            let (wv, vv) = (&values[w.0], &values[v.0]);
            let steps = values[step.0].data();
            let base = base.as_deref().unwrap_or(steps);
            let inner = out.len() / steps.len();
            let (qmin, qmax) = quant::code_range(*bits);
            let mut gv = vec![0.0; vv.len()];
            let mut gs = vec![0.0; steps.len()];
            for i in 0..out.len() {
                let c = i / inner;
                let s = steps[c];
                let gg = g.data()[i];
                // out = q * s; q is treated as constant in s (exact when the base is fixed)
                gs[c] += gg * out.data()[i] / s;
                if !*hard {
                    let u = (wv.data()[i] / base[c]).floor() + quant::rectified_sigmoid(vv.data()[i]);
                    if u >= qmin && u <= qmax {
                        gv[i] = gg * s * quant::rectified_sigmoid_grad(vv.data()[i]);
                    }
                }
            }
            add_grad(grads, *v, Tensor::new(vv.shape().to_vec(), gv).unwrap());
            add_grad(grads, *step, Tensor::new(vec![steps.len()], gs).unwrap());
        }
        Op::ActQuant { x, params } => {
            let xv = &values[x.0];
            let gx = if params.is_quantized() {
                xv.zip_map(g, |a, gg| {
                    if a >= params.lo && a <= params.hi {
                        gg
                    } else {
                        0.0
                    }
                })
                .unwrap()
            } else {
                g.clone()
            };
            add_grad(grads, *x, gx);
        }
        Op::Blend { a, b, weight } => {
            let mut ga = g.clone();
            let mut gb = g.clone();
            for i in 0..g.len() {
                let wt = weight.at(i);
                ga.data_mut()[i] *= wt;
                gb.data_mut()[i] *= 1.0 - wt;
            }
            add_grad(grads, *a, ga);
            add_grad(grads, *b, gb);
        }
    }
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor) {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = gd[((b * o + oc) * ho + oy) * wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                gx[xi] += go * wdat[wi];
                                gw[wi] += go * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(w.shape().to_vec(), gw).unwrap(),
    )
}
