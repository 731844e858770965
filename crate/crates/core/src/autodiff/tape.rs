//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every traced operation appends a node holding its output and whatever it
//! needs for its backward rule. [`Tape::backward`] replays the nodes in reverse
//! execution order, so each operation is visited exactly once per pass.
//!
//! ```
//! use advlab::autodiff::Tape;
//! use advlab::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad(true));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

use rand::Rng;

use super::kernels::{col2im_add, gemm, im2col, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Dropout {
        input: Var,
        // one scale per (batch, channel); 0 for dropped channels
        mask: Vec<f64>,
        spatial: usize,
    },
    Reshape {
        input: Var,
    },
    LogSoftmax {
        input: Var,
        temperature: f64,
    },
    Nll {
        input: Var,
        labels: Vec<usize>,
    },
    SoftCrossEntropy {
        input: Var,
        targets: Vec<f64>,
    },
    Sum {
        input: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Relu { .. } => "relu",
            Op::Affine { .. } => "affine",
            Op::Dropout { .. } => "dropout",
            Op::Reshape { .. } => "reshape",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Nll { .. } => "nll_loss",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Mul { .. } => "mul",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations (the computation trace).
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Removes the node's value (and its gradient) from the tape.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Valid (unpadded) 2-D convolution of an `N×C×H×W` input with an
    /// `O×C×K×K` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if x.rank() != 4 || w.rank() != 4 || b.rank() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "expected NCHW input, OIKK weight and O bias; got {:?}, {:?}, {:?}",
                    x.shape(),
                    w.shape(),
                    b.shape()
                ),
            ));
        }
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c || kh != kw || b.shape()[0] != o {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} incompatible with weight {:?} / bias {:?}",
                    x.shape(),
                    w.shape(),
                    b.shape()
                ),
            ));
        }
        if kh > h || kw > wd {
            return Err(Error::shape(
                "conv2d",
                format!("{kh}x{kw} kernel does not fit a {h}x{wd} input"),
            ));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            out_h: (h - kh) / stride + 1,
            out_w: (wd - kw) / stride + 1,
        };
        let (kc, p) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![0.0; kc * p];
        let mut out = vec![0.0; n * o * p];
        for i in 0..n {
            im2col(
                &x.data()[i * geom.in_len()..(i + 1) * geom.in_len()],
                &geom,
                &mut cols,
            );
            let dst = &mut out[i * o * p..(i + 1) * o * p];
            for (oc, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.fill(b.data()[oc]);
            }
            gemm(o, kc, p, w.data(), false, &cols, false, 1.0, dst);
        }
        let requires = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        let value = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?.with_grad(requires);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Non-overlapping max-pooling over the last two axes of an `N×C×H×W`
    /// input.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 4 || window == 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!(
                    "expected NCHW input and window >= 1, got {:?} / {window}",
                    x.shape()
                ),
            ));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("{h}x{w} is not divisible by window {window}"),
            ));
        }
        let (oh, ow) = (h / window, w / window);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            // strict comparison: first maximum in scan order wins
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?.with_grad(x.requires_grad());
        Ok(self.push(value, Op::MaxPool2d { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)
            .expect("same shape")
            .with_grad(x.requires_grad());
        self.push(value, Op::Relu { input })
    }

    /// `input · weightᵀ + bias` for a `B×N` input and `M×N` weight.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
            return Err(Error::shape(
                "affine",
                format!(
                    "expected B×N input, M×N weight, M bias; got {:?}, {:?}, {:?}",
                    x.shape(),
                    w.shape(),
                    b.shape()
                ),
            ));
        }
        let (batch, inner) = (x.shape()[0], x.shape()[1]);
        let m = w.shape()[0];
        if w.shape()[1] != inner || b.shape()[0] != m {
            return Err(Error::shape(
                "affine",
                format!(
                    "input {:?} incompatible with weight {:?} / bias {:?}",
                    x.shape(),
                    w.shape(),
                    b.shape()
                ),
            ));
        }
        let mut out: Vec<f64> = (0..batch).flat_map(|_| b.data().iter().copied()).collect();
        gemm(
            batch,
            inner,
            m,
            x.data(),
            false,
            w.data(),
            true,
            1.0,
            &mut out,
        );
        let requires = x.requires_grad() || w.requires_grad() || b.requires_grad();
        let value = Tensor::new(vec![batch, m], out)?.with_grad(requires);
        Ok(self.push(
            value,
            Op::Affine {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Channel-wise ("2-D") dropout: whole feature maps of an `N×C×…` input are
    /// zeroed with probability `p`, survivors scaled by `1/(1−p)`. A 2-D
    /// `N×C` input treats every feature as its own channel.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(
                "dropout",
                format!("probability {p} outside [0, 1)"),
            ));
        }
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(Error::shape(
                "dropout",
                format!("expected at least N×C, got {:?}", x.shape()),
            ));
        }
        let channels = x.shape()[0] * x.shape()[1];
        let spatial = x.len() / channels;
        let mask: Vec<f64> = match mode {
            Mode::Eval => vec![1.0; channels],
            Mode::Train if p == 0.0 => vec![1.0; channels],
            Mode::Train => {
                let keep = 1.0 / (1.0 - p);
                (0..channels)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect()
            }
        };
        let data = x
            .data()
            .chunks_exact(spatial)
            .zip(&mask)
            .flat_map(|(chunk, &m)| chunk.iter().map(move |v| v * m))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?.with_grad(x.requires_grad());
        Ok(self.push(
            value,
            Op::Dropout {
                input,
                mask,
                spatial,
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let x = self.value(input).clone();
        let requires = x.requires_grad();
        let mut value = Tensor::new(shape, x.into_data())
            .map_err(|e| Error::shape("reshape", e.to_string()))?;
        value.set_requires_grad(requires);
        Ok(self.push(value, Op::Reshape { input }))
    }

    /// Flattens `N×…` into `N×(product of the rest)`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(input, vec![n, rest])
    }

    /// Row-wise `log softmax(z / T)` of a `B×C` input, max-shifted.
    pub fn log_softmax(&mut self, input: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(
                "log_softmax",
                format!("temperature must be positive and finite, got {temperature}"),
            ));
        }
        let x = self.value(input);
        if x.rank() != 2 {
            return Err(Error::shape(
                "log_softmax",
                format!("expected B×C, got {:?}", x.shape()),
            ));
        }
        let classes = x.shape()[1];
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(classes) {
            out.extend(log_softmax_row(row, temperature));
        }
        let value = Tensor::new(x.shape().to_vec(), out)?.with_grad(x.requires_grad());
        Ok(self.push(value, Op::LogSoftmax { input, temperature }))
    }

    /// Mean negative log-likelihood of `labels` under `B×C` log-probabilities.
    pub fn nll_loss(&mut self, input: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::shape(
                "nll_loss",
                format!(
                    "{} labels for log-probs of shape {:?}",
                    labels.len(),
                    x.shape()
                ),
            ));
        }
        let classes = x.shape()[1];
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes,
            });
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(b, &y)| -x.data()[b * classes + y])
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64).with_grad(x.requires_grad());
        Ok(self.push(
            value,
            Op::Nll {
                input,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy against per-row probability targets (row-major
    /// `B×C`).
    pub fn soft_cross_entropy(&mut self, input: Var, targets: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 2 || x.len() != targets.len() {
            return Err(Error::shape(
                "soft_cross_entropy",
                format!(
                    "{} target values for log-probs of shape {:?}",
                    targets.len(),
                    x.shape()
                ),
            ));
        }
        let classes = x.shape()[1];
        for (b, row) in targets.chunks_exact(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&t| t.is_nan() || t < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(
                    "soft_cross_entropy",
                    format!("target row {b} is not a probability vector (sum {sum})"),
                ));
            }
        }
        let batch = x.shape()[0];
        let total: f64 = x.data().iter().zip(targets).map(|(lp, t)| -t * lp).sum();
        let value = Tensor::scalar(total / batch as f64).with_grad(x.requires_grad());
        Ok(self.push(
            value,
            Op::SoftCrossEntropy {
                input,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::scalar(x.data().iter().sum()).with_grad(x.requires_grad());
        self.push(value, Op::Sum { input })
    }

    /// Elementwise product of two same-shaped values.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let requires = a.requires_grad() || b.requires_grad();
        let value = Tensor::new(a.shape().to_vec(), data)?.with_grad(requires);
        Ok(self.push(value, Op::Mul { lhs, rhs }))
    }

    /// Propagates `∂loss/∂·` to every tracked value recorded before `loss`.
    /// Gradients add onto whatever earlier passes left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_seeded(loss, 1.0)
    }

    /// [`Tape::backward`] with `∂out/∂loss = seed` instead of 1.
    pub fn backward_seeded(&mut self, loss: Var, seed: f64) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.tracked(loss) {
            return Ok(());
        }
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            self.propagate(i, &g, &mut pass);
            self.nodes[i].value.accumulate_grad_owned(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let n = self.value(*input).shape()[0];
                let w = self.value(*weight);
                let o = w.shape()[0];
                let (kc, p) = (geom.patch_len(), geom.out_len());
                if self.tracked(*bias) {
                    let db = grad_slot(pass, *bias, o);
                    for (j, chunk) in g.chunks_exact(p).enumerate() {
                        db[j % o] += chunk.iter().sum::<f64>();
                    }
                }
                let x = self.value(*input).data();
                let mut scratch = vec![0.0; kc * p];
                if self.tracked(*weight) {
                    // columns are rebuilt per image rather than kept from the forward pass
                    let dw = grad_slot(pass, *weight, o * kc);
                    for b in 0..n {
                        im2col(
                            &x[b * geom.in_len()..(b + 1) * geom.in_len()],
                            geom,
                            &mut scratch,
                        );
                        let gb = &g[b * o * p..(b + 1) * o * p];
                        gemm(o, p, kc, gb, false, &scratch, true, 1.0, dw);
                    }
                }
                if self.tracked(*input) {
                    let dx = grad_slot(pass, *input, n * geom.in_len());
                    for b in 0..n {
                        let gb = &g[b * o * p..(b + 1) * o * p];
                        gemm(kc, o, p, w.data(), true, gb, false, 0.0, &mut scratch);
                        col2im_add(
                            &scratch,
                            geom,
                            &mut dx[b * geom.in_len()..(b + 1) * geom.in_len()],
                        );
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.tracked(*input) {
                    let dx = grad_slot(pass, *input, self.value(*input).len());
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::Relu { input } => {
                if self.tracked(*input) {
                    let x = self.value(*input).data();
                    let dx = grad_slot(pass, *input, x.len());
                    for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (batch, inner) = (x.shape()[0], x.shape()[1]);
                let m = w.shape()[0];
                if self.tracked(*bias) {
                    let db = grad_slot(pass, *bias, m);
                    for row in g.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                if self.tracked(*weight) {
                    let dw = grad_slot(pass, *weight, m * inner);
                    gemm(m, batch, inner, g, true, x.data(), false, 1.0, dw);
                }
                if self.tracked(*input) {
                    let dx = grad_slot(pass, *input, batch * inner);
                    gemm(batch, m, inner, g, false, w.data(), false, 1.0, dx);
                }
            }
            Op::Dropout {
                input,
                mask,
                spatial,
            } => {
                if self.tracked(*input) {
                    let dx = grad_slot(pass, *input, g.len());
                    for ((d, gc), &m) in dx
                        .chunks_exact_mut(*spatial)
                        .zip(g.chunks_exact(*spatial))
                        .zip(mask)
                    {
                        d.iter_mut().zip(gc).for_each(|(d, v)| *d += v * m);
                    }
                }
            }
            Op::Reshape { input } => {
                if self.tracked(*input) {
                    let dx = grad_slot(pass, *input, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::LogSoftmax { input, temperature } => {
                if self.tracked(*input) {
                    let classes = node.value.shape()[1];
                    let dx = grad_slot(pass, *input, g.len());
                    for ((d, gr), lp) in dx
                        .chunks_exact_mut(classes)
                        .zip(g.chunks_exact(classes))
                        .zip(node.value.data().chunks_exact(classes))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for ((d, &gv), &l) in d.iter_mut().zip(gr).zip(lp) {
                            *d += (gv - l.exp() * gsum) / temperature;
                        }
                    }
                }
            }
            Op::Nll { input, labels } => {
                if self.tracked(*input) {
                    let x = self.value(*input);
                    let classes = x.shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    let dx = grad_slot(pass, *input, x.len());
                    for (b, &y) in labels.iter().enumerate() {
                        dx[b * classes + y] -= scale;
                    }
                }
            }
            Op::SoftCrossEntropy { input, targets } => {
                if self.tracked(*input) {
                    let x = self.value(*input);
                    let scale = g[0] / x.shape()[0] as f64;
                    let dx = grad_slot(pass, *input, x.len());
                    dx.iter_mut()
                        .zip(targets)
                        .for_each(|(d, t)| *d -= scale * t);
                }
            }
            Op::Sum { input } => {
                if self.tracked(*input) {
                    let dx = grad_slot(pass, *input, self.value(*input).len());
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mul { lhs, rhs } => {
                let a = self.value(*lhs).data().to_vec();
                let b = self.value(*rhs).data().to_vec();
                if self.tracked(*lhs) {
                    let da = grad_slot(pass, *lhs, a.len());
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(&b) {
                        *d += gv * bv;
                    }
                }
                if self.tracked(*rhs) {
                    let db = grad_slot(pass, *rhs, b.len());
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(&a) {
                        *d += gv * av;
                    }
                }
            }
        }
    }
}

fn grad_slot(pass: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    pass[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// `log softmax(row / T)` with max subtraction.
pub fn log_softmax_row(row: &[f64], temperature: f64) -> impl Iterator<Item = f64> + '_ {
    let max = row
        .iter()
        .map(|&z| z / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .map(|&z| (z / temperature - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(move |&z| z / temperature - lse)
}
