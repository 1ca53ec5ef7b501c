//! Reverse-mode differentiation over an append-only op list.
//!
//! A [`Graph`] is a Wengert list: every op appends a node whose parents
//! have strictly smaller indices, so the list is already topologically
//! ordered and [`Graph::backward`] is a single reverse sweep. Adjoints are
//! rebuilt per sweep; leaf gradients accumulate across sweeps until
//! [`Graph::zero_grads`] clears them. Graphs are rebuilt per batch, with
//! parameters entering through [`Graph::param`] and their gradients read
//! back afterwards.

use crate::conv::{col2im, conv2d_reference, expect_nchw, im2col, ConvGeometry};
use crate::error::TensorError;
use crate::linalg::{mm_nn, mm_nt, mm_tn};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Per-channel scale/shift parameters plus running statistics for
/// batch normalization. Running statistics live outside the graph and are
/// updated in place by train-mode forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn reset_running_stats(&mut self) {
        self.running_mean.fill(T::zero());
        self.running_var.fill(T::one());
    }
}

/// Graph vars bound by a batch-norm op: the output plus the gamma/beta
/// leaves, so callers can harvest their gradients.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormVars {
    pub out: Var,
    pub gamma: Var,
    pub beta: Var,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    Affine {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: Var,
        window: (usize, usize),
        stride: (usize, usize),
    },
    GlobalPool {
        input: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Concat(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Computation tape for one forward/backward pass.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Insert a constant input (no gradient tracked).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Insert a trainable leaf; [`Graph::backward`] accumulates its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, parents: &[Var], op: Op<T>) -> Var {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, requires, op)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push_op(out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push_op(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push_op(out, &[a], Op::Scale(a, s))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push_op(Tensor::scalar(total), &[a], Op::Sum(a))
    }

    /// Elementwise max(0, x). The subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push_op(out, &[a], Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push_op(out, &[a], Op::Reshape(a)))
    }

    // ---- layers ----------------------------------------------------------

    /// out = input . weight + bias, with input [N,F], weight [F,K], bias [K].
    pub fn affine(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
    ) -> Result<Var, TensorError> {
        let vi = self.value(input);
        let vw = self.value(weight);
        let (n, f) = match vi.shape() {
            &[n, f] => (n, f),
            other => {
                return Err(TensorError::ShapeMismatch(format!(
                    "affine input must be [N,F], got {:?}",
                    other
                )))
            }
        };
        let (wf, k) = match vw.shape() {
            &[wf, k] => (wf, k),
            other => {
                return Err(TensorError::ShapeMismatch(format!(
                    "affine weight must be [F,K], got {:?}",
                    other
                )))
            }
        };
        if wf != f {
            return Err(TensorError::ShapeMismatch(format!(
                "affine: input features {} vs weight rows {}",
                f, wf
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [k] {
                return Err(TensorError::ShapeMismatch(format!(
                    "affine bias shape {:?}, expected [{}]",
                    self.value(b).shape(),
                    k
                )));
            }
        }
        let mut out = Tensor::zeros(&[n, k]);
        mm_nn(vi.data(), vw.data(), n, f, k, out.data_mut());
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for row in 0..n {
                for (o, &bv) in out.data_mut()[row * k..(row + 1) * k].iter_mut().zip(&bd) {
                    *o += bv;
                }
            }
        }
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push_op(out, &parents, Op::Affine { input, weight, bias }))
    }

    /// Dilated 2-D convolution via patch unrolling. Matches
    /// [`conv2d_reference`] on every geometry; the reference stays around
    /// as the slow second route.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var, TensorError> {
        let vi = self.value(input);
        let vw = self.value(weight);
        let (n, c_in, h, w) = expect_nchw(vi, "conv input")?;
        let (c_out, wc_in, kh, kw) = expect_nchw(vw, "conv weight")?;
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch(format!(
                "conv weight expects {} input channels, input has {}",
                wc_in, c_in
            )));
        }
        if (kh, kw) != geom.kernel {
            return Err(TensorError::ShapeMismatch(format!(
                "conv weight kernel {}x{} does not match geometry {:?}",
                kh, kw, geom.kernel
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv bias shape {:?}, expected [{}]",
                    self.value(b).shape(),
                    c_out
                )));
            }
        }
        let (out_h, out_w) = geom.output_dims(h, w)?;
        let kdim = c_in * kh * kw;
        let span = out_h * out_w;

        let mut out = Tensor::zeros(&[n, c_out, out_h, out_w]);
        let mut cols = vec![T::zero(); kdim * span];
        {
            let x = vi.data();
            let wt = vw.data();
            let y = out.data_mut();
            for s in 0..n {
                im2col(
                    &x[s * c_in * h * w..(s + 1) * c_in * h * w],
                    c_in,
                    h,
                    w,
                    &geom,
                    out_h,
                    out_w,
                    &mut cols,
                );
                mm_nn(
                    wt,
                    &cols,
                    c_out,
                    kdim,
                    span,
                    &mut y[s * c_out * span..(s + 1) * c_out * span],
                );
            }
        }
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            let y = out.data_mut();
            for s in 0..n {
                for (co, &bv) in bd.iter().enumerate() {
                    let plane = &mut y[(s * c_out + co) * span..(s * c_out + co + 1) * span];
                    for o in plane {
                        *o += bv;
                    }
                }
            }
        }
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push_op(
            out,
            &parents,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Windowed max pooling. Gradient routes to the first maximal element
    /// in row-major window order.
    pub fn max_pool2d(
        &mut self,
        input: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var, TensorError> {
        let vi = self.value(input);
        let (n, c, h, w) = expect_nchw(vi, "max_pool input")?;
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::ShapeMismatch(
                "pool window and stride must be >= 1".into(),
            ));
        }
        if window.0 > h || window.1 > w {
            return Err(TensorError::WindowTooLarge {
                window,
                input: (h, w),
            });
        }
        let out_h = (h - window.0) / stride.0 + 1;
        let out_w = (w - window.1) / stride.1 + 1;
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        let mut argmax = vec![0usize; n * c * out_h * out_w];
        let x = vi.data();
        let y = out.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for ky in 0..window.0 {
                        for kx in 0..window.1 {
                            let idx = base + (oy * stride.0 + ky) * w + ox * stride.1 + kx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * out_h + oy) * out_w + ox;
                    y[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        Ok(self.push_op(out, &[input], Op::MaxPool2d { input, argmax }))
    }

    /// Windowed average pooling (used by dense-block transitions).
    pub fn avg_pool2d(
        &mut self,
        input: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var, TensorError> {
        let vi = self.value(input);
        let (n, c, h, w) = expect_nchw(vi, "avg_pool input")?;
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::ShapeMismatch(
                "pool window and stride must be >= 1".into(),
            ));
        }
        if window.0 > h || window.1 > w {
            return Err(TensorError::WindowTooLarge {
                window,
                input: (h, w),
            });
        }
        let out_h = (h - window.0) / stride.0 + 1;
        let out_w = (w - window.1) / stride.1 + 1;
        let inv = T::one() / T::from_usize(window.0 * window.1);
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        let x = vi.data();
        let y = out.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = T::zero();
                    for ky in 0..window.0 {
                        for kx in 0..window.1 {
                            acc += x[base + (oy * stride.0 + ky) * w + ox * stride.1 + kx];
                        }
                    }
                    y[(plane * out_h + oy) * out_w + ox] = acc * inv;
                }
            }
        }
        Ok(self.push_op(
            out,
            &[input],
            Op::AvgPool2d {
                input,
                window,
                stride,
            },
        ))
    }

    /// Pool over the entire spatial extent, whatever it is, producing
    /// [N,C,1,1].
    pub fn global_pool(&mut self, input: Var, kind: PoolKind) -> Result<Var, TensorError> {
        let vi = self.value(input);
        let (n, c, h, w) = expect_nchw(vi, "global_pool input")?;
        if h == 0 || w == 0 {
            return Err(TensorError::ShapeMismatch(
                "global_pool requires H, W >= 1".into(),
            ));
        }
        let mut out = Tensor::zeros(&[n, c, 1, 1]);
        let mut argmax = Vec::new();
        let x = vi.data();
        let y = out.data_mut();
        match kind {
            PoolKind::Max => {
                argmax.resize(n * c, 0);
                for plane in 0..n * c {
                    let cells = &x[plane * h * w..(plane + 1) * h * w];
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for (i, &v) in cells.iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = plane * h * w + i;
                        }
                    }
                    y[plane] = best;
                    argmax[plane] = best_idx;
                }
            }
            PoolKind::Avg => {
                let inv = T::one() / T::from_usize(h * w);
                for plane in 0..n * c {
                    let cells = &x[plane * h * w..(plane + 1) * h * w];
                    y[plane] = cells.iter().copied().sum::<T>() * inv;
                }
            }
        }
        Ok(self.push_op(
            out,
            &[input],
            Op::GlobalPool {
                input,
                kind,
                argmax,
            },
        ))
    }

    /// Batch normalization over [N,C,H,W]. Train mode normalizes by batch
    /// statistics and updates the running statistics in place; eval mode
    /// normalizes by the running statistics.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<BatchNormVars, TensorError> {
        let vi = self.value(input);
        let (n, c, h, w) = expect_nchw(vi, "batch_norm input")?;
        if n == 0 || h * w == 0 {
            return Err(TensorError::EmptyBatch);
        }
        if state.channels() != c
            || state.running_mean.len() != c
            || state.running_var.len() != c
            || state.beta.numel() != c
        {
            return Err(TensorError::ShapeMismatch(format!(
                "batch_norm state has {} channels, input has {}",
                state.channels(),
                c
            )));
        }
        let m = n * h * w;
        let inv_m = T::one() / T::from_usize(m);
        let x = vi.data();
        let plane = h * w;

        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let cells = &x[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        mean[ch] += cells.iter().copied().sum::<T>();
                    }
                }
                for v in mean.iter_mut() {
                    *v *= inv_m;
                }
                for s in 0..n {
                    for ch in 0..c {
                        let cells = &x[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        var[ch] += cells.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum();
                    }
                }
                for v in var.iter_mut() {
                    *v *= inv_m;
                }
                // running = (1 - momentum) * running + momentum * batch
                let keep = T::one() - state.momentum;
                for ch in 0..c {
                    state.running_mean[ch] = keep * state.running_mean[ch] + state.momentum * mean[ch];
                    state.running_var[ch] = keep * state.running_var[ch] + state.momentum * var[ch];
                }
                (mean, var)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
        let gd = state.gamma.data().to_vec();
        let bd = state.beta.data().to_vec();

        let mut x_hat = Tensor::zeros(vi.shape());
        let mut out = Tensor::zeros(vi.shape());
        {
            let xh = x_hat.data_mut();
            let y = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    for i in 0..plane {
                        let normed = (x[base + i] - mean[ch]) * inv_std[ch];
                        xh[base + i] = normed;
                        y[base + i] = gd[ch] * normed + bd[ch];
                    }
                }
            }
        }

        let gamma = self.param(state.gamma.clone());
        let beta = self.param(state.beta.clone());
        let out = self.push_op(
            out,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                train: mode == Mode::Train,
            },
        );
        Ok(BatchNormVars { out, gamma, beta })
    }

    /// Stack feature maps along the channel dimension, in argument order.
    pub fn channel_concat(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::EmptyList);
        }
        let first = expect_nchw(self.value(inputs[0]), "concat input")?;
        let (n, _, h, w) = first;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (vn, vc, vh, vw) = expect_nchw(self.value(v), "concat input")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat: [N,H,W] mismatch {:?} vs {:?}",
                    (vn, vh, vw),
                    (n, h, w)
                )));
            }
            channels.push(vc);
        }
        let c_total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, c_total, h, w]);
        {
            let y = out.data_mut();
            for s in 0..n {
                let mut offset = 0;
                for (&v, &ci) in inputs.iter().zip(&channels) {
                    let x = self.nodes[v.0].value.data();
                    let src = &x[s * ci * plane..(s + 1) * ci * plane];
                    let dst_start = (s * c_total + offset) * plane;
                    y[dst_start..dst_start + ci * plane].copy_from_slice(src);
                    offset += ci;
                }
            }
        }
        Ok(self.push_op(out, inputs, Op::Concat(inputs.to_vec())))
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized by
    /// max subtraction.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let vl = self.value(logits);
        let (n, k) = match vl.shape() {
            &[n, k] => (n, k),
            other => {
                return Err(TensorError::ShapeMismatch(format!(
                    "logits must be [N,K], got {:?}",
                    other
                )))
            }
        };
        if n == 0 {
            return Err(TensorError::EmptyBatch);
        }
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "{} labels for batch of {}",
                labels.len(),
                n
            )));
        }
        for &label in labels {
            if label >= k {
                return Err(TensorError::LabelOutOfRange { label, classes: k });
            }
        }
        let x = vl.data();
        let mut probs = Tensor::zeros(&[n, k]);
        let mut loss = T::zero();
        {
            let p = probs.data_mut();
            for row in 0..n {
                let xs = &x[row * k..(row + 1) * k];
                let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for (j, &v) in xs.iter().enumerate() {
                    let e = (v - max).exp();
                    p[row * k + j] = e;
                    denom += e;
                }
                for j in 0..k {
                    p[row * k + j] /= denom;
                }
                // -log softmax[label] = log(denom) + max - x[label]
                loss += denom.ln() + max - xs[labels[row]];
            }
        }
        loss /= T::from_usize(n);
        Ok(self.push_op(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Propagate d(root)/d(leaf) into every trainable leaf reachable from
    /// `root`. Repeated calls without [`Graph::zero_grads`] accumulate.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                numel: self.value(root).numel(),
            });
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for i in (0..=root.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &dy, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, adj: &mut [Option<Tensor<T>>], target: Var, delta: Tensor<T>) {
        match &mut adj[target.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, dy: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        // Ops only reference parents with smaller indices, so reads of
        // parent values never alias the adjoint being written.
        match &self.nodes[i].op {
            Op::Leaf => {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(g) => g.add_assign(dy),
                    slot @ None => *slot = Some(dy.clone()),
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    self.accumulate(adj, a, dy.clone());
                }
                if self.wants(b) {
                    self.accumulate(adj, b, dy.clone());
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let vb = self.value(b);
                    let mut d = dy.clone();
                    for (g, &y) in d.data_mut().iter_mut().zip(vb.data()) {
                        *g *= y;
                    }
                    self.accumulate(adj, a, d);
                }
                if self.wants(b) {
                    let va = self.value(a);
                    let mut d = dy.clone();
                    for (g, &x) in d.data_mut().iter_mut().zip(va.data()) {
                        *g *= x;
                    }
                    self.accumulate(adj, b, d);
                }
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                if self.wants(a) {
                    self.accumulate(adj, a, dy.map(|g| g * s));
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if self.wants(a) {
                    let g = dy.item();
                    self.accumulate(adj, a, Tensor::full(self.value(a).shape(), g));
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if self.wants(a) {
                    let va = self.value(a);
                    let mut d = dy.clone();
                    for (g, &x) in d.data_mut().iter_mut().zip(va.data()) {
                        if x <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    self.accumulate(adj, a, d);
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                if self.wants(a) {
                    let shape = self.value(a).shape().to_vec();
                    let d = dy.reshaped(&shape).expect("reshape backward");
                    self.accumulate(adj, a, d);
                }
            }
            Op::Affine { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let vi = self.value(input);
                let vw = self.value(weight);
                let (n, f) = (vi.shape()[0], vi.shape()[1]);
                let k = vw.shape()[1];
                if self.wants(input) {
                    let mut d = Tensor::zeros(&[n, f]);
                    mm_nt(dy.data(), vw.data(), n, k, f, d.data_mut());
                    self.accumulate(adj, input, d);
                }
                if self.wants(weight) {
                    let mut d = Tensor::zeros(&[f, k]);
                    mm_tn(vi.data(), dy.data(), n, f, k, d.data_mut());
                    self.accumulate(adj, weight, d);
                }
                if let Some(b) = bias {
                    if self.wants(b) {
                        let mut d = Tensor::zeros(&[k]);
                        for row in 0..n {
                            for (g, &v) in d.data_mut().iter_mut().zip(&dy.data()[row * k..(row + 1) * k]) {
                                *g += v;
                            }
                        }
                        self.accumulate(adj, b, d);
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (input, weight, bias, geom) = (*input, *weight, *bias, *geom);
                self.conv2d_backward(input, weight, bias, geom, dy, adj);
            }
            Op::MaxPool2d { input, argmax } => {
                let input = *input;
                if self.wants(input) {
                    let mut d = Tensor::zeros(self.value(input).shape());
                    let dd = d.data_mut();
                    for (o, &idx) in argmax.iter().enumerate() {
                        dd[idx] += dy.data()[o];
                    }
                    self.accumulate(adj, input, d);
                }
            }
            Op::AvgPool2d {
                input,
                window,
                stride,
            } => {
                let (input, window, stride) = (*input, *window, *stride);
                if self.wants(input) {
                    let shape = self.value(input).shape().to_vec();
                    let (h, w) = (shape[2], shape[3]);
                    let out_h = (h - window.0) / stride.0 + 1;
                    let out_w = (w - window.1) / stride.1 + 1;
                    let inv = T::one() / T::from_usize(window.0 * window.1);
                    let mut d = Tensor::zeros(&shape);
                    let dd = d.data_mut();
                    for plane in 0..shape[0] * shape[1] {
                        let base = plane * h * w;
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let g = dy.data()[(plane * out_h + oy) * out_w + ox] * inv;
                                for ky in 0..window.0 {
                                    for kx in 0..window.1 {
                                        dd[base + (oy * stride.0 + ky) * w + ox * stride.1 + kx] += g;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(adj, input, d);
                }
            }
            Op::GlobalPool {
                input,
                kind,
                argmax,
            } => {
                let (input, kind) = (*input, *kind);
                if self.wants(input) {
                    let shape = self.value(input).shape().to_vec();
                    let plane = shape[2] * shape[3];
                    let mut d = Tensor::zeros(&shape);
                    let dd = d.data_mut();
                    match kind {
                        PoolKind::Max => {
                            for (o, &idx) in argmax.iter().enumerate() {
                                dd[idx] += dy.data()[o];
                            }
                        }
                        PoolKind::Avg => {
                            let inv = T::one() / T::from_usize(plane);
                            for p in 0..shape[0] * shape[1] {
                                let g = dy.data()[p] * inv;
                                for cell in &mut dd[p * plane..(p + 1) * plane] {
                                    *cell += g;
                                }
                            }
                        }
                    }
                    self.accumulate(adj, input, d);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            } => {
                let (input, gamma, beta, train) = (*input, *gamma, *beta, *train);
                let shape = x_hat.shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let plane = h * w;
                let m = n * plane;
                let inv_m = T::one() / T::from_usize(m);

                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for idx in base..base + plane {
                            sum_dy[ch] += dy.data()[idx];
                            sum_dy_xhat[ch] += dy.data()[idx] * x_hat.data()[idx];
                        }
                    }
                }
                if self.wants(gamma) {
                    let d = Tensor::new(&[c], sum_dy_xhat.clone()).expect("bn gamma grad");
                    self.accumulate(adj, gamma, d);
                }
                if self.wants(beta) {
                    let d = Tensor::new(&[c], sum_dy.clone()).expect("bn beta grad");
                    self.accumulate(adj, beta, d);
                }
                if self.wants(input) {
                    let gd = self.value(gamma).data();
                    let mut d = Tensor::zeros(&shape);
                    {
                        let dd = d.data_mut();
                        for s in 0..n {
                            for ch in 0..c {
                                let scale = gd[ch] * inv_std[ch];
                                let base = (s * c + ch) * plane;
                                if train {
                                    let mean_dy = sum_dy[ch] * inv_m;
                                    let mean_dy_xhat = sum_dy_xhat[ch] * inv_m;
                                    for idx in base..base + plane {
                                        dd[idx] = scale
                                            * (dy.data()[idx]
                                                - mean_dy
                                                - x_hat.data()[idx] * mean_dy_xhat);
                                    }
                                } else {
                                    for idx in base..base + plane {
                                        dd[idx] = scale * dy.data()[idx];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(adj, input, d);
                }
            }
            Op::Concat(inputs) => {
                let inputs = inputs.clone();
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (n, c_total) = (out_shape[0], out_shape[1]);
                let plane = out_shape[2] * out_shape[3];
                let mut offset = 0;
                for v in inputs {
                    let ci = self.value(v).shape()[1];
                    if self.wants(v) {
                        let mut d = Tensor::zeros(self.value(v).shape());
                        {
                            let dd = d.data_mut();
                            for s in 0..n {
                                let src = (s * c_total + offset) * plane;
                                let dst = s * ci * plane;
                                dd[dst..dst + ci * plane]
                                    .copy_from_slice(&dy.data()[src..src + ci * plane]);
                            }
                        }
                        self.accumulate(adj, v, d);
                    }
                    offset += ci;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                if self.wants(logits) {
                    let (n, k) = (probs.shape()[0], probs.shape()[1]);
                    let g = dy.item() / T::from_usize(n);
                    let mut d = probs.map(|p| p * g);
                    for (row, &label) in labels.iter().enumerate() {
                        d.data_mut()[row * k + label] -= g;
                    }
                    self.accumulate(adj, logits, d);
                }
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        dy: &Tensor<T>,
        adj: &mut [Option<Tensor<T>>],
    ) {
        let vi = self.value(input);
        let vw = self.value(weight);
        let (n, c_in, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2], vi.shape()[3]);
        let (c_out, kh, kw) = (vw.shape()[0], vw.shape()[2], vw.shape()[3]);
        let (out_h, out_w) = (dy.shape()[2], dy.shape()[3]);
        let kdim = c_in * kh * kw;
        let span = out_h * out_w;

        if let Some(b) = bias {
            if self.wants(b) {
                let mut d = Tensor::zeros(&[c_out]);
                let dd = d.data_mut();
                for s in 0..n {
                    for co in 0..c_out {
                        dd[co] += dy.data()[(s * c_out + co) * span..(s * c_out + co + 1) * span]
                            .iter()
                            .copied()
                            .sum();
                    }
                }
                self.accumulate(adj, b, d);
            }
        }

        let wants_w = self.wants(weight);
        let wants_x = self.wants(input);
        if !wants_w && !wants_x {
            return;
        }
        let mut dw = wants_w.then(|| Tensor::zeros(&[c_out, c_in, kh, kw]));
        let mut dx = wants_x.then(|| Tensor::zeros(&[n, c_in, h, w]));
        let mut cols = vec![T::zero(); kdim * span];
        let mut dcols = vec![T::zero(); kdim * span];
        for s in 0..n {
            let dy_s = &dy.data()[s * c_out * span..(s + 1) * c_out * span];
            if let Some(dw) = dw.as_mut() {
                im2col(
                    &vi.data()[s * c_in * h * w..(s + 1) * c_in * h * w],
                    c_in,
                    h,
                    w,
                    &geom,
                    out_h,
                    out_w,
                    &mut cols,
                );
                mm_nt(dy_s, &cols, c_out, span, kdim, dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                dcols.fill(T::zero());
                mm_tn(vw.data(), dy_s, c_out, kdim, span, &mut dcols);
                col2im(
                    &dcols,
                    c_in,
                    h,
                    w,
                    &geom,
                    out_h,
                    out_w,
                    &mut dx.data_mut()[s * c_in * h * w..(s + 1) * c_in * h * w],
                );
            }
        }
        if let Some(dw) = dw {
            self.accumulate(adj, weight, dw);
        }
        if let Some(dx) = dx {
            self.accumulate(adj, input, dx);
        }
    }
}

/// Convenience wrapper running the reference convolution inside a graph
/// context (forward value only; for tests comparing both routes).
pub fn conv2d_reference_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>, TensorError> {
    conv2d_reference(input, weight, bias, geom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![1.0f64, -2.0, 0.5]).unwrap());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0f64, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![-1.0f64, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_at_negative_and_positive() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![-1.0f64, 2.0]).unwrap());
        let y = g.relu(x);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![3.0f64, 4.0]).unwrap());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0f64, 2.0]).unwrap());
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarRoot { numel: 2 }));
    }

    #[test]
    fn backward_deterministic_after_reset() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 5, 5], |i| (i as f64 * 0.31).sin()));
        let w = g.param(Tensor::from_fn(&[4, 3, 3, 3], |i| (i as f64 * 0.17).cos()));
        let y = g.conv2d(x, w, None, ConvGeometry::new(3, 1, 1, 1)).unwrap();
        let r = g.relu(y);
        let loss = g.sum(r);
        g.backward(loss).unwrap();
        let first = g.grad(w).unwrap().clone();
        g.zero_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), first.data());
    }

    #[test]
    fn max_pool_simple() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap());
        let y = g.max_pool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_constant_input_and_tie_break() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 1, 2, 2], 7.0f64));
        let y = g.max_pool2d(x, (2, 2), (1, 1)).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        // all tied: gradient goes to the first element in row-major order
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_window_too_large() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let err = g.max_pool2d(x, (3, 3), (1, 1)).unwrap_err();
        assert!(matches!(err, TensorError::WindowTooLarge { .. }));
    }

    #[test]
    fn global_pool_identity_and_avg() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[1, 2, 1, 1], vec![5.0f64, -3.0]).unwrap());
        let y = g.global_pool(x, PoolKind::Max).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, -3.0]);

        let x = g.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap());
        let y = g.global_pool(x, PoolKind::Avg).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
    }

    #[test]
    fn global_pool_max_matches_flat_max() {
        let data: Vec<f64> = (0..35).map(|i| ((i * 29) % 35) as f64 - 17.0).collect();
        let expected = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[1, 1, 5, 7], data).unwrap());
        let y = g.global_pool(x, PoolKind::Max).unwrap();
        assert_eq!(g.value(y).data(), &[expected]);
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[1, 2], vec![1.0f64, 2.0]).unwrap());
        let w = g.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.leaf(Tensor::new(&[2], vec![10.0, 10.0]).unwrap());
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 12.0]);

        let y = g.affine(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_matches_triple_loop() {
        let xi: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let wi: Vec<f64> = (0..8).map(|i| (i as f64 * 1.1).cos()).collect();
        let mut want = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for l in 0..4 {
                    want[i * 2 + j] += xi[i * 4 + l] * wi[l * 2 + j];
                }
            }
        }
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3, 4], xi).unwrap());
        let w = g.leaf(Tensor::new(&[4, 2], wi).unwrap());
        let y = g.affine(x, w, None).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        // uniform logits over 4 classes -> ln 4
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[1, 4]));
        let loss = g.cross_entropy_from_logits(logits, &[1]).unwrap();
        assert!((g.value(loss).item() - 4.0f64.ln()).abs() < 1e-9);

        // saturated one-hot logit -> loss ~ 0
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::new(&[1, 3], vec![0.0f64, 1000.0, 0.0]).unwrap());
        let loss = g.cross_entropy_from_logits(logits, &[1]).unwrap();
        assert!(g.value(loss).item() < 1e-9);

        // logits [1,2,3], label 2
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::new(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let loss = g.cross_entropy_from_logits(logits, &[2]).unwrap();
        let z = 1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp();
        let want = -(3.0f64.exp() / z).ln();
        assert!((g.value(loss).item() - want).abs() < 1e-9);
        assert!((g.value(loss).item() - 0.4076).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[1, 3]));
        let err = g.cross_entropy_from_logits(logits, &[3]).unwrap_err();
        assert!(matches!(
            err,
            TensorError::LabelOutOfRange { label: 3, classes: 3 }
        ));
    }

    #[test]
    fn concat_slices_back() {
        let mut g = Graph::new();
        let maps: Vec<Var> = (0..4)
            .map(|t| {
                g.param(Tensor::from_fn(&[2, 8, 3, 3], |i| {
                    (t * 1000 + i) as f64 * 0.01
                }))
            })
            .collect();
        let y = g.channel_concat(&maps).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 32, 3, 3]);
        for (t, &m) in maps.iter().enumerate() {
            let full = g.value(y);
            let part = g.value(m);
            for s in 0..2 {
                for c in 0..8 {
                    for hh in 0..3 {
                        for ww in 0..3 {
                            assert_eq!(
                                full.at(&[s, t * 8 + c, hh, ww]),
                                part.at(&[s, c, hh, ww])
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn concat_of_one_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64));
        let y = g.channel_concat(&[x]).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[1, 2, 4, 3]));
        assert!(g.channel_concat(&[a, b]).is_err());
    }

    #[test]
    fn batch_norm_eval_identity_stats() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.37).sin()));
        let mut state = BatchNormState::<f64>::new(3);
        state.eps = 0.0;
        let out = g.batch_norm2d(x, &mut state, Mode::Eval).unwrap();
        let max_diff = g.value(out.out).max_abs_diff(g.value(x));
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn batch_norm_train_moments() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[4, 2, 3, 3], |i| {
            ((i * 31 % 17) as f64) * 0.25 - 2.0
        }));
        let mut state = BatchNormState::<f64>::new(2);
        state.gamma = Tensor::new(&[2], vec![2.0, 0.5]).unwrap();
        state.beta = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let out = g.batch_norm2d(x, &mut state, Mode::Train).unwrap();
        let y = g.value(out.out);
        // per-channel output mean ~ beta, variance ~ gamma^2
        for c in 0..2 {
            let mut vals = Vec::new();
            for s in 0..4 {
                for hh in 0..3 {
                    for ww in 0..3 {
                        vals.push(y.at(&[s, c, hh, ww]));
                    }
                }
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            let gamma = state.gamma.data()[c];
            let beta = state.beta.data()[c];
            assert!((m - beta).abs() < 1e-5, "mean {} vs beta {}", m, beta);
            assert!((v - gamma * gamma).abs() < 1e-4, "var {} vs {}", v, gamma * gamma);
        }
    }

    #[test]
    fn batch_norm_gamma_zero_gives_constant_beta() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64));
        let mut state = BatchNormState::<f64>::new(1);
        state.gamma = Tensor::zeros(&[1]);
        state.beta = Tensor::full(&[1], 3.5);
        let out = g.batch_norm2d(x, &mut state, Mode::Train).unwrap();
        for &v in g.value(out.out).data() {
            assert_eq!(v, 3.5);
        }
    }

    #[test]
    fn batch_norm_updates_running_stats_in_train_only() {
        let mut state = BatchNormState::<f64>::new(1);
        let before = state.running_mean.clone();

        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 1, 2, 2], 4.0));
        g.batch_norm2d(x, &mut state, Mode::Eval).unwrap();
        assert_eq!(state.running_mean, before);

        g.batch_norm2d(x, &mut state, Mode::Train).unwrap();
        // running mean moves toward the batch mean of 4.0 by momentum 0.1
        assert!((state.running_mean[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn conv_linear_in_input() {
        let geom = ConvGeometry::new(3, 1, 2, 2);
        let x1 = Tensor::from_fn(&[1, 2, 6, 6], |i| (i as f64 * 0.3).sin());
        let x2 = Tensor::from_fn(&[1, 2, 6, 6], |i| (i as f64 * 0.7).cos());
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.11).sin());
        let (a, b) = (1.7, -0.6);

        let combo = Tensor::new(
            &[1, 2, 6, 6],
            x1.data()
                .iter()
                .zip(x2.data())
                .map(|(&p, &q)| a * p + b * q)
                .collect(),
        )
        .unwrap();

        let mut g = Graph::<f64>::new();
        let (v1, v2, vc) = (g.leaf(x1), g.leaf(x2), g.leaf(combo));
        let wv = g.leaf(w);
        let y1 = g.conv2d(v1, wv, None, geom).unwrap();
        let y2 = g.conv2d(v2, wv, None, geom).unwrap();
        let yc = g.conv2d(vc, wv, None, geom).unwrap();
        let y1 = g.value(y1).clone();
        let y2 = g.value(y2).clone();
        for ((&p, &q), &r) in y1.data().iter().zip(y2.data()).zip(g.value(yc).data()) {
            assert!((a * p + b * q - r).abs() < 1e-9);
        }
    }
}
