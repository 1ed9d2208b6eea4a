//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive in execution order; [`Tape::backward`]
//! walks it in exact reverse. Operations accept either a single sample
//! (`[T, C, F]`, `[D]`) or a leading batch axis (`[B, T, C, F]`, `[B, D]`).
//!
//! ```
//! use odocorr::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.param(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod params;
mod tensor;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use params::{read_params, write_params, NamedTensor, PARAMS_MAGIC, PARAMS_VERSION};
pub(crate) use tensor::matmul;
pub use tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<S>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MeanPoolTc {
        input: Var,
    },
    Unary {
        kind: Unary,
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleBroadcast {
        features: Var,
        scale: Var,
    },
    Scale {
        input: Var,
        factor: S,
    },
    Reshape {
        input: Var,
    },
    Mask {
        input: Var,
        mask: Vec<S>,
    },
    Sum {
        input: Var,
    },
    Mae {
        pred: Var,
        target: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    param: bool,
    requires_grad: bool,
}

/// Geometry of a time-axis convolution with 'same' padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub channels: usize,
    pub f_in: usize,
    pub f_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_before: usize,
}

impl ConvGeometry {
    /// Output length `ceil(t / stride)` and the leading pad of the 'same'
    /// scheme (the odd pad element goes after the sequence).
    pub fn same(t_in: usize, kernel: usize, stride: usize) -> (usize, usize) {
        let t_out = t_in.div_ceil(stride);
        let needed = ((t_out - 1) * stride + kernel).saturating_sub(t_in);
        (t_out, needed / 2)
    }

    fn rows(&self) -> usize {
        self.batch * self.t_out * self.channels
    }

    fn col_width(&self) -> usize {
        self.kernel * self.f_in
    }

    /// Source time index for output step `t` and kernel tap `k`.
    fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k) as isize - self.pad_before as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }
}

/// Reverse-mode gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients<S> {
    tape: usize,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a recorded value. Every parameter has one (zero when it
    /// does not reach the loss).
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

/// Record of primitive operations.
#[derive(Debug)]
pub struct Tape<S = f32> {
    id: usize,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    /// Records a trainable parameter.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        self.check(var).expect("variable belongs to a different tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, param: bool, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::DisconnectedGraph(format!(
                "variable {} is not recorded on this tape",
                var.index
            )));
        }
        Ok(())
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    /// Convolution over the time axis with a `K x 1` kernel.
    ///
    /// `input` is `[T, C, F_in]` or `[B, T, C, F_in]`, `kernel` is
    /// `[K, 1, F_in, F_out]` and `bias` is `[F_out]`. The output has
    /// `ceil(T / stride)` steps and zero 'same' padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        let in_shape = self.shape(input).to_vec();
        let k_shape = self.shape(kernel).to_vec();
        let (batch, rest) = match in_shape.len() {
            3 => (1, &in_shape[..]),
            4 => (in_shape[0], &in_shape[1..]),
            _ => return Err(shape_err(format!("conv2d input must be [B,]T,C,F, got {in_shape:?}"))),
        };
        let (t_in, channels, f_in) = (rest[0], rest[1], rest[2]);
        if k_shape.len() != 4 || k_shape[1] != 1 || k_shape[2] != f_in {
            return Err(shape_err(format!(
                "conv2d kernel {k_shape:?} incompatible with input {in_shape:?}"
            )));
        }
        let (kernel_len, f_out) = (k_shape[0], k_shape[3]);
        if self.shape(bias) != [f_out] {
            return Err(shape_err(format!("conv2d bias {:?} != [{f_out}]", self.shape(bias))));
        }
        if !(stride == 1 || stride == 2) {
            return Err(shape_err(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if kernel_len == 0 || kernel_len > t_in {
            return Err(shape_err(format!(
                "conv2d kernel extent {kernel_len} exceeds time length {t_in}"
            )));
        }
        let (t_out, pad_before) = ConvGeometry::same(t_in, kernel_len, stride);
        let geom = ConvGeometry {
            batch,
            t_in,
            t_out,
            channels,
            f_in,
            f_out,
            kernel: kernel_len,
            stride,
            pad_before,
        };

        let x = self.value(input).data();
        let width = geom.col_width();
        let mut cols = vec![S::zero(); geom.rows() * width];
        for b in 0..batch {
            for t in 0..t_out {
                for k in 0..kernel_len {
                    let Some(src) = geom.source(t, k) else { continue };
                    for c in 0..channels {
                        let row = (b * t_out + t) * channels + c;
                        let from = ((b * t_in + src) * channels + c) * f_in;
                        cols[row * width + k * f_in..row * width + (k + 1) * f_in]
                            .copy_from_slice(&x[from..from + f_in]);
                    }
                }
            }
        }
        let mut out = vec![S::zero(); geom.rows() * f_out];
        let bias_v = self.value(bias).data();
        for row in out.chunks_exact_mut(f_out) {
            row.copy_from_slice(bias_v);
        }
        matmul(
            geom.rows(),
            width,
            f_out,
            &cols,
            false,
            self.value(kernel).data(),
            false,
            &mut out,
            true,
        );

        let out_shape = if in_shape.len() == 3 {
            vec![t_out, channels, f_out]
        } else {
            vec![batch, t_out, channels, f_out]
        };
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            false,
            rg,
        ))
    }

    /// Affine map `x W + b` for `x` of shape `[D_in]` or `[B, D_in]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        let (rows, d_in) = match in_shape.len() {
            1 => (1, in_shape[0]),
            2 => (in_shape[0], in_shape[1]),
            _ => return Err(shape_err(format!("dense input must be [B,]D, got {in_shape:?}"))),
        };
        if w_shape.len() != 2 || w_shape[0] != d_in {
            return Err(shape_err(format!(
                "dense weight {w_shape:?} incompatible with input {in_shape:?}"
            )));
        }
        let d_out = w_shape[1];
        if self.shape(bias) != [d_out] {
            return Err(shape_err(format!("dense bias {:?} != [{d_out}]", self.shape(bias))));
        }
        let mut out = vec![S::zero(); rows * d_out];
        let bias_v = self.value(bias).data();
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(bias_v);
        }
        matmul(
            rows,
            d_in,
            d_out,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            true,
        );
        let out_shape = if in_shape.len() == 1 {
            vec![d_out]
        } else {
            vec![rows, d_out]
        };
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Dense { input, weight, bias },
            false,
            rg,
        ))
    }

    /// Per-filter mean over the time and channel axes:
    /// `[T, C, F] -> [F]`, `[B, T, C, F] -> [B, F]`.
    pub fn mean_pool_tc(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let shape = self.shape(input).to_vec();
        let (batch, f, out_shape) = match shape.len() {
            3 => (1, shape[2], vec![shape[2]]),
            4 => (shape[0], shape[3], vec![shape[0], shape[3]]),
            _ => return Err(shape_err(format!("mean_pool_tc expects [B,]T,C,F, got {shape:?}"))),
        };
        let x = self.value(input).data();
        let per = x.len() / batch.max(1);
        let positions = per / f.max(1);
        let inv = S::one() / S::from_f64(positions as f64);
        let mut out = vec![S::zero(); batch * f];
        for b in 0..batch {
            let acc = &mut out[b * f..(b + 1) * f];
            for pos in x[b * per..(b + 1) * per].chunks_exact(f) {
                for (a, &v) in acc.iter_mut().zip(pos) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MeanPoolTc { input }, false, rg))
    }

    pub fn unary(&mut self, kind: Unary, input: Var) -> Result<Var> {
        self.check(input)?;
        let value = match kind {
            Unary::Relu => self.value(input).map(|v| v.max(S::zero())),
            Unary::Sigmoid => self.value(input).map(sigmoid),
        };
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Unary { kind, input }, false, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.unary(Unary::Relu, input)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, input)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, false, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, false, rg))
    }

    /// Multiplies `[T, C, F]` features by a per-filter `[F]` vector (or
    /// `[B, T, C, F]` by `[B, F]`).
    pub fn scale_broadcast(&mut self, features: Var, scale: Var) -> Result<Var> {
        self.check(features)?;
        self.check(scale)?;
        let fs = self.shape(features).to_vec();
        let ss = self.shape(scale).to_vec();
        let ok = match fs.len() {
            3 => ss == [fs[2]],
            4 => ss == [fs[0], fs[3]],
            _ => false,
        };
        if !ok {
            return Err(shape_err(format!("scale_broadcast: features {fs:?} with scale {ss:?}")));
        }
        let f = *fs.last().unwrap();
        let batch = if fs.len() == 4 { fs[0] } else { 1 };
        let x = self.value(features).data();
        let s = self.value(scale).data();
        let per = x.len() / batch.max(1);
        let mut out = Vec::with_capacity(x.len());
        for b in 0..batch {
            let sb = &s[b * f..(b + 1) * f];
            for pos in x[b * per..(b + 1) * per].chunks_exact(f) {
                out.extend(pos.iter().zip(sb).map(|(&v, &w)| v * w));
            }
        }
        let rg = self.needs(&[features, scale]);
        Ok(self.push(
            Tensor::new(&fs, out)?,
            Op::ScaleBroadcast { features, scale },
            false,
            rg,
        ))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, input: Var, factor: S) -> Result<Var> {
        self.check(input)?;
        let value = self.value(input).map(|v| v * factor);
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Scale { input, factor }, false, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(input)?;
        let value = self.value(input).reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape { input }, false, rg))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. `uniform` supplies one draw
    /// in `[0, 1)` per element.
    pub fn dropout(&mut self, input: Var, rate: f64, mut uniform: impl FnMut() -> f64) -> Result<Var> {
        self.check(input)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(shape_err(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.value(input).len())
            .map(|_| if uniform() < rate { S::zero() } else { keep_scale })
            .collect();
        let data = self
            .value(input)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::new(self.shape(input), data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Mask { input, mask }, false, rg))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        self.check(input).expect("variable belongs to a different tape");
        let total = self.value(input).sum();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(total), Op::Sum { input }, false, rg)
    }

    /// Mean absolute error against a constant target of the same shape.
    pub fn mae(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var> {
        self.check(pred)?;
        if self.shape(pred) != target.shape() {
            return Err(shape_err(format!(
                "mae: prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        if target.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = S::from_f64(target.len() as f64);
        let total: S = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Mae {
                pred,
                target: target.data().to_vec(),
            },
            false,
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`. Every parameter on the tape
    /// receives a gradient; parameters that do not reach the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        self.check(loss)?;
        if self.nodes[loss.index].value.len() != 1 {
            return Err(shape_err(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.index].requires_grad {
            return Err(Error::DisconnectedGraph("no parameter reaches the loss".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(self.shape(loss), S::one()));

        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.param {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[idx] = grads[idx].take().filter(|_| idx == loss.index);
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], var: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[var.index].requires_grad {
            return;
        }
        let slot = &mut grads[var.index];
        let g = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[var.index].value.shape()));
        f(g.data_mut());
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let rows = geom.rows();
                let width = geom.col_width();
                self.accumulate(grads, *kernel, |gk| {
                    matmul(width, rows, geom.f_out, cols, true, gd, false, gk, true);
                });
                self.accumulate(grads, *bias, |gb| {
                    for row in gd.chunks_exact(geom.f_out) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
                if self.nodes[input.index].requires_grad {
                    let mut dcols = vec![S::zero(); rows * width];
                    let w = self.nodes[kernel.index].value.data();
                    matmul(rows, geom.f_out, width, gd, false, w, true, &mut dcols, false);
                    self.accumulate(grads, *input, |gx| {
                        let f_in = geom.f_in;
                        for b in 0..geom.batch {
                            for t in 0..geom.t_out {
                                for k in 0..geom.kernel {
                                    let Some(src) = geom.source(t, k) else { continue };
                                    for c in 0..geom.channels {
                                        let row = (b * geom.t_out + t) * geom.channels + c;
                                        let to = ((b * geom.t_in + src) * geom.channels + c) * f_in;
                                        let from = row * width + k * f_in;
                                        for (a, &v) in gx[to..to + f_in].iter_mut().zip(&dcols[from..from + f_in]) {
                                            *a += v;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Dense { input, weight, bias } => {
                let x = &self.nodes[input.index].value;
                let w = &self.nodes[weight.index].value;
                let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
                let rows = x.len() / d_in;
                self.accumulate(grads, *weight, |gw| {
                    matmul(d_in, rows, d_out, x.data(), true, gd, false, gw, true);
                });
                self.accumulate(grads, *bias, |gb| {
                    for row in gd.chunks_exact(d_out) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
                self.accumulate(grads, *input, |gx| {
                    matmul(rows, d_out, d_in, gd, false, w.data(), true, gx, true);
                });
            }
            Op::MeanPoolTc { input } => {
                let shape = self.nodes[input.index].value.shape();
                let f = *shape.last().unwrap();
                let batch = if shape.len() == 4 { shape[0] } else { 1 };
                let len = self.nodes[input.index].value.len();
                let per = len / batch.max(1);
                let inv = S::one() / S::from_f64((per / f.max(1)) as f64);
                self.accumulate(grads, *input, |gx| {
                    for b in 0..batch {
                        let gb = &gd[b * f..(b + 1) * f];
                        for pos in gx[b * per..(b + 1) * per].chunks_exact_mut(f) {
                            for (a, &v) in pos.iter_mut().zip(gb) {
                                *a += v * inv;
                            }
                        }
                    }
                });
            }
            Op::Unary { kind, input } => {
                let y = node.value.data();
                let kind = *kind;
                self.accumulate(grads, *input, |gx| {
                    for ((a, &gv), &yv) in gx.iter_mut().zip(gd).zip(y) {
                        *a += match kind {
                            Unary::Relu => {
                                if yv > S::zero() {
                                    gv
                                } else {
                                    S::zero()
                                }
                            }
                            Unary::Sigmoid => gv * yv * (S::one() - yv),
                        };
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |gx| {
                        for (acc, &gv) in gx.iter_mut().zip(gd) {
                            *acc += gv;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.index].value.data();
                let bv = self.nodes[b.index].value.data();
                self.accumulate(grads, *a, |gx| {
                    for ((acc, &gv), &o) in gx.iter_mut().zip(gd).zip(bv) {
                        *acc += gv * o;
                    }
                });
                self.accumulate(grads, *b, |gx| {
                    for ((acc, &gv), &o) in gx.iter_mut().zip(gd).zip(av) {
                        *acc += gv * o;
                    }
                });
            }
            Op::ScaleBroadcast { features, scale } => {
                let x = &self.nodes[features.index].value;
                let s = self.nodes[scale.index].value.data();
                let f = *x.shape().last().unwrap();
                let batch = if x.rank() == 4 { x.shape()[0] } else { 1 };
                let per = x.len() / batch.max(1);
                self.accumulate(grads, *features, |gx| {
                    for b in 0..batch {
                        let sb = &s[b * f..(b + 1) * f];
                        let range = b * per..(b + 1) * per;
                        for (pos, gpos) in gx[range.clone()].chunks_exact_mut(f).zip(gd[range].chunks_exact(f)) {
                            for ((acc, &gv), &w) in pos.iter_mut().zip(gpos).zip(sb) {
                                *acc += gv * w;
                            }
                        }
                    }
                });
                self.accumulate(grads, *scale, |gs| {
                    for b in 0..batch {
                        let gsb = &mut gs[b * f..(b + 1) * f];
                        let range = b * per..(b + 1) * per;
                        for (xpos, gpos) in x.data()[range.clone()].chunks_exact(f).zip(gd[range].chunks_exact(f)) {
                            for ((acc, &gv), &xv) in gsb.iter_mut().zip(gpos).zip(xpos) {
                                *acc += gv * xv;
                            }
                        }
                    }
                });
            }
            Op::Scale { input, factor } => {
                let factor = *factor;
                self.accumulate(grads, *input, |gx| {
                    for (acc, &gv) in gx.iter_mut().zip(gd) {
                        *acc += gv * factor;
                    }
                });
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, |gx| {
                    for (acc, &gv) in gx.iter_mut().zip(gd) {
                        *acc += gv;
                    }
                });
            }
            Op::Mask { input, mask } => {
                self.accumulate(grads, *input, |gx| {
                    for ((acc, &gv), &m) in gx.iter_mut().zip(gd).zip(mask) {
                        *acc += gv * m;
                    }
                });
            }
            Op::Sum { input } => {
                let gv = gd[0];
                self.accumulate(grads, *input, |gx| {
                    for acc in gx.iter_mut() {
                        *acc += gv;
                    }
                });
            }
            Op::Mae { pred, target } => {
                let p = self.nodes[pred.index].value.data();
                let scale = gd[0] / S::from_f64(target.len() as f64);
                self.accumulate(grads, *pred, |gx| {
                    for ((acc, &pv), &tv) in gx.iter_mut().zip(p).zip(target) {
                        let diff = pv - tv;
                        if diff > S::zero() {
                            *acc += scale;
                        } else if diff < S::zero() {
                            *acc -= scale;
                        }
                    }
                });
            }
        }
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}
