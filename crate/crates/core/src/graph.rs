//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] borrows the parameter store immutably; weights are referenced
//! by [`ParamId`] rather than copied onto the tape. Batch-norm running
//! statistics observed in training mode are collected as [`StatUpdate`]s and
//! applied by the caller, so forward passes never mutate the model.

use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{CfaError, Result};
use crate::heatmap::FusionMode;
use crate::kernels::{col2im, gemm, im2col, Window};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization; running statistics are collected.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

/// Parameter handles of one batch-normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Batch statistics observed by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv {
        x: Value,
        w: ParamId,
        b: Option<ParamId>,
        win: Window,
    },
    ConvTranspose {
        x: Value,
        w: ParamId,
        b: Option<ParamId>,
        /// Window over the *output* image.
        win: Window,
    },
    BatchNorm {
        x: Value,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Value),
    MaxPool {
        x: Value,
        argmax: Vec<usize>,
    },
    Add(Value, Value),
    MeanAll(Value),
    MaskedMse {
        x: Value,
        residual: Vec<f64>,
        mask: Vec<bool>,
        denom: f64,
    },
    WeightedSum(Vec<(Value, f64)>),
    Fuse {
        inputs: Vec<Value>,
        mode: FusionMode,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    stat_updates: Vec<StatUpdate>,
}

/// Gradients of a scalar root with respect to parameters and tape values.
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.index()].as_ref()
    }

    pub fn value(&self, v: Value) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            nodes: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn input(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Value {
        self.nodes.push(Node { value, op });
        Value(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: Value,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Result<Value> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let weight = self.store.get(w);
        let (o, wc, kh, kw) = weight.dims4()?;
        if wc != c || kh != kw {
            return Err(CfaError::shape(format!(
                "conv2d: input has {c} channels, weight shape {:?}",
                weight.shape()
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(CfaError::shape(format!(
                "conv2d: kernel {kh} larger than padded input {h}x{wd}"
            )));
        }
        let win = Window {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            pad,
        };
        let (ho, wo) = (win.out_height(), win.out_width());
        let plane = ho * wo;
        let mut out = vec![0.0; n * o * plane];
        let mut cols = if win.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; win.col_rows() * plane]
        };
        let xdata = self.value(x).data();
        for i in 0..n {
            let src = &xdata[i * c * h * wd..(i + 1) * c * h * wd];
            let col_ref: &[f64] = if win.is_pointwise() {
                src
            } else {
                im2col(src, &win, &mut cols);
                &cols
            };
            let dst = &mut out[i * o * plane..(i + 1) * o * plane];
            gemm(o, win.col_rows(), plane, weight.data(), false, col_ref, false, dst, 0.0);
            if let Some(b) = b {
                add_channel_bias(dst, self.store.get(b).data(), plane);
            }
        }
        let out = Tensor::from_vec(&[n, o, ho, wo], out)?;
        Ok(self.push(out, Op::Conv { x, w, b, win }))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Value,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Result<Value> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let weight = self.store.get(w);
        let (wci, co, kh, kw) = weight.dims4()?;
        if wci != ci || kh != kw {
            return Err(CfaError::shape(format!(
                "conv_transpose2d: input has {ci} channels, weight shape {:?}",
                weight.shape()
            )));
        }
        let ho = (h - 1) * stride + kh;
        let wo = (wd - 1) * stride + kw;
        if ho <= 2 * pad || wo <= 2 * pad {
            return Err(CfaError::shape("conv_transpose2d: padding consumes the output"));
        }
        let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);
        let win = Window {
            channels: co,
            height: ho,
            width: wo,
            kernel: kh,
            stride,
            pad,
        };
        if win.out_height() != h || win.out_width() != wd {
            return Err(CfaError::shape("conv_transpose2d: inconsistent geometry"));
        }
        let in_plane = h * wd;
        let out_plane = ho * wo;
        let mut out = vec![0.0; n * co * out_plane];
        let mut cols = vec![0.0; win.col_rows() * in_plane];
        let xdata = self.value(x).data();
        for i in 0..n {
            let src = &xdata[i * ci * in_plane..(i + 1) * ci * in_plane];
            gemm(win.col_rows(), ci, in_plane, weight.data(), true, src, false, &mut cols, 0.0);
            let dst = &mut out[i * co * out_plane..(i + 1) * co * out_plane];
            col2im(&cols, &win, dst);
            if let Some(b) = b {
                add_channel_bias(dst, self.store.get(b).data(), out_plane);
            }
        }
        let out = Tensor::from_vec(&[n, co, ho, wo], out)?;
        Ok(self.push(out, Op::ConvTranspose { x, w, b, win }))
    }

    pub fn batch_norm(&mut self, x: Value, bn: &BnParams) -> Result<Value> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let gamma = self.store.get(bn.gamma).data();
        let beta = self.store.get(bn.beta).data();
        if gamma.len() != c || beta.len() != c {
            return Err(CfaError::shape(format!(
                "batch_norm: {c} channels but {} scale parameters",
                gamma.len()
            )));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let xdata = self.value(x).data();
        let batch_stats = self.mode == Mode::Train;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if batch_stats {
            for i in 0..n {
                for ch in 0..c {
                    let s = &xdata[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    mean[ch] += s.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for i in 0..n {
                for ch in 0..c {
                    let s = &xdata[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
        } else {
            mean.copy_from_slice(self.store.get(bn.running_mean).data());
            var.copy_from_slice(self.store.get(bn.running_var).data());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xdata.len()];
        let mut out = vec![0.0; xdata.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                for ((xh, o), v) in xhat[r.clone()]
                    .iter_mut()
                    .zip(&mut out[r.clone()])
                    .zip(&xdata[r])
                {
                    *xh = (v - mean[ch]) * inv_std[ch];
                    *o = gamma[ch] * *xh + beta[ch];
                }
            }
        }
        if batch_stats {
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            self.stat_updates.push(StatUpdate {
                running_mean: bn.running_mean,
                running_var: bn.running_var,
                mean,
                var: var.iter().map(|v| v * unbiased).collect(),
            });
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma: bn.gamma,
                beta: bn.beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let out = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        self.push(out, Op::Relu(x))
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order; NaN wins so that it propagates.
    pub fn max_pool2(&mut self, x: Value) -> Result<Value> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CfaError::shape(format!(
                "max_pool2 needs even spatial size, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xdata = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xdata[idx] > xdata[best] || xdata[idx].is_nan() {
                            best = idx;
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = xdata[best];
                    argmax[o] = best;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mean_all(&mut self, x: Value) -> Value {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::full(&[1], m), Op::MeanAll(x))
    }

    /// Mean squared error over the `(sample, channel)` planes selected by
    /// `mask` (length `n·c`). An empty selection yields zero.
    pub fn masked_mse(&mut self, x: Value, target: &Tensor, mask: &[bool]) -> Result<Value> {
        let xt = self.value(x);
        xt.check_same_shape(target, "masked_mse")?;
        let (n, c, h, w) = xt.dims4()?;
        if mask.len() != n * c {
            return Err(CfaError::shape(format!(
                "masked_mse: mask has {} entries, expected {}",
                mask.len(),
                n * c
            )));
        }
        let plane = h * w;
        let selected = mask.iter().filter(|m| **m).count();
        let denom = (selected * plane) as f64;
        let mut residual = vec![0.0; xt.len()];
        let mut sum = 0.0;
        for (p, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            for k in p * plane..(p + 1) * plane {
                let r = xt.data()[k] - target.data()[k];
                residual[k] = r;
                sum += r * r;
            }
        }
        let value = if selected == 0 { 0.0 } else { sum / denom };
        Ok(self.push(
            Tensor::full(&[1], value),
            Op::MaskedMse {
                x,
                residual,
                mask: mask.to_vec(),
                denom,
            },
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[(Value, f64)]) -> Result<Value> {
        let mut total = 0.0;
        for &(v, wgt) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(CfaError::shape("weighted_sum takes scalar terms"));
            }
            total += wgt * t.data()[0];
        }
        Ok(self.push(Tensor::full(&[1], total), Op::WeightedSum(terms.to_vec())))
    }

    /// Elementwise fusion of equally shaped values.
    pub fn fuse(&mut self, inputs: &[Value], mode: FusionMode) -> Result<Value> {
        let first = *inputs
            .first()
            .ok_or_else(|| CfaError::domain("cannot fuse an empty window"))?;
        let shape = self.value(first).shape().to_vec();
        for v in inputs {
            self.value(first).check_same_shape(self.value(*v), "fuse")?;
        }
        let data = (0..self.value(first).len())
            .map(|k| mode.combine(inputs.iter().map(|v| self.value(*v).data()[k])))
            .collect();
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            out,
            Op::Fuse {
                inputs: inputs.to_vec(),
                mode,
            },
        ))
    }

    /// Digest of every ReLU input sign and max-pool winner on the tape.
    /// Evaluations with equal digests lie in the same smooth piece of the
    /// network, so a finite difference between them crosses no kink.
    pub fn switch_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v < 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Value) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(CfaError::shape("backward needs a scalar root"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&[1], 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv { x, w, b, win } => {
                    self.conv_backward(&g, *x, *w, *b, win, &mut grads, &mut pgrads)?
                }
                Op::ConvTranspose { x, w, b, win } => {
                    self.conv_transpose_backward(&g, *x, *w, *b, win, &mut grads, &mut pgrads)?
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, h, w) = g.dims4()?;
                    let plane = h * w;
                    let count = (n * plane) as f64;
                    let gd = g.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                            for (dy, xh) in gd[r.clone()].iter().zip(&xhat[r]) {
                                dbeta[ch] += dy;
                                dgamma[ch] += dy * xh;
                            }
                        }
                    }
                    let gamma_v = self.store.get(*gamma).data();
                    let mut dx = vec![0.0; gd.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let scale = gamma_v[ch] * inv_std[ch];
                            let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                            for ((d, dy), xh) in
                                dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xhat[r])
                            {
                                *d = if *batch_stats {
                                    scale * (dy - dbeta[ch] / count - xh * dgamma[ch] / count)
                                } else {
                                    scale * dy
                                };
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(g.shape(), dx)?)?;
                    accumulate(&mut pgrads[gamma.index()], Tensor::from_vec(&[c], dgamma)?)?;
                    accumulate(&mut pgrads[beta.index()], Tensor::from_vec(&[c], dbeta)?)?;
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(g.shape(), dx)?)?;
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let dd = dx.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        dd[src] += g.data()[o];
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone())?;
                    accumulate(&mut grads[b.0], g)?;
                }
                Op::MeanAll(x) => {
                    let xt = self.value(*x);
                    let v = g.data()[0] / xt.len().max(1) as f64;
                    accumulate(&mut grads[x.0], Tensor::full(xt.shape(), v))?;
                }
                Op::MaskedMse {
                    x,
                    residual,
                    mask,
                    denom,
                } => {
                    let xt = self.value(*x);
                    let mut dx = Tensor::zeros(xt.shape());
                    if *denom > 0.0 {
                        let plane = xt.len() / mask.len();
                        let f = 2.0 * g.data()[0] / denom;
                        let dd = dx.data_mut();
                        for (p, &m) in mask.iter().enumerate() {
                            if m {
                                for k in p * plane..(p + 1) * plane {
                                    dd[k] = f * residual[k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::WeightedSum(terms) => {
                    for &(v, wgt) in terms {
                        accumulate(&mut grads[v.0], Tensor::full(&[1], wgt * g.data()[0]))?;
                    }
                }
                Op::Fuse { inputs, mode } => {
                    let n = inputs.len() as f64;
                    let out = node.value.data();
                    for v in inputs {
                        let y = self.value(*v).data();
                        let dx: Vec<f64> = match mode {
                            FusionMode::Mean => g.data().iter().map(|d| d / n).collect(),
                            // out = r / n with r = sqrt(Σ y²), so ∂out/∂y = y / (n² · out).
                            FusionMode::Eq5 => g
                                .data()
                                .iter()
                                .zip(y)
                                .zip(out)
                                .map(|((d, yi), o)| if *o > 0.0 { d * yi / (n * n * o) } else { 0.0 })
                                .collect(),
                        };
                        accumulate(&mut grads[v.0], Tensor::from_vec(g.shape(), dx)?)?;
                    }
                }
            }
        }
        Ok(Gradients {
            params: pgrads,
            nodes: grads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &Tensor,
        x: Value,
        w: ParamId,
        b: Option<ParamId>,
        win: &Window,
        grads: &mut [Option<Tensor>],
        pgrads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xt = self.value(x);
        let weight = self.store.get(w);
        let (n, o, ho, wo) = g.dims4()?;
        let plane = ho * wo;
        let rows = win.col_rows();
        let in_len = win.channels * win.height * win.width;
        let mut dw = vec![0.0; weight.len()];
        let mut dx = vec![0.0; xt.len()];
        let mut cols = vec![0.0; rows * plane];
        let mut dcols = vec![0.0; rows * plane];
        for i in 0..n {
            let src = &xt.data()[i * in_len..(i + 1) * in_len];
            let gi = &g.data()[i * o * plane..(i + 1) * o * plane];
            let dst = &mut dx[i * in_len..(i + 1) * in_len];
            if win.is_pointwise() {
                gemm(o, plane, rows, gi, false, src, true, &mut dw, 1.0);
                gemm(rows, o, plane, weight.data(), true, gi, false, dst, 0.0);
            } else {
                im2col(src, win, &mut cols);
                gemm(o, plane, rows, gi, false, &cols, true, &mut dw, 1.0);
                gemm(rows, o, plane, weight.data(), true, gi, false, &mut dcols, 0.0);
                col2im(&dcols, win, dst);
            }
        }
        accumulate(&mut grads[x.0], Tensor::from_vec(xt.shape(), dx)?)?;
        accumulate(&mut pgrads[w.index()], Tensor::from_vec(weight.shape(), dw)?)?;
        if let Some(b) = b {
            accumulate(&mut pgrads[b.index()], channel_sums(g, o, plane)?)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose_backward(
        &self,
        g: &Tensor,
        x: Value,
        w: ParamId,
        b: Option<ParamId>,
        win: &Window,
        grads: &mut [Option<Tensor>],
        pgrads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xt = self.value(x);
        let weight = self.store.get(w);
        let (n, ci, h, wd) = xt.dims4()?;
        let in_plane = h * wd;
        let co = win.channels;
        let out_plane = win.height * win.width;
        let rows = win.col_rows();
        let mut dw = vec![0.0; weight.len()];
        let mut dx = vec![0.0; xt.len()];
        let mut dcols = vec![0.0; rows * in_plane];
        for i in 0..n {
            let gi = &g.data()[i * co * out_plane..(i + 1) * co * out_plane];
            im2col(gi, win, &mut dcols);
            let src = &xt.data()[i * ci * in_plane..(i + 1) * ci * in_plane];
            let dst = &mut dx[i * ci * in_plane..(i + 1) * ci * in_plane];
            gemm(ci, rows, in_plane, weight.data(), false, &dcols, false, dst, 0.0);
            gemm(ci, in_plane, rows, src, false, &dcols, true, &mut dw, 1.0);
        }
        accumulate(&mut grads[x.0], Tensor::from_vec(xt.shape(), dx)?)?;
        accumulate(&mut pgrads[w.index()], Tensor::from_vec(weight.shape(), dw)?)?;
        if let Some(b) = b {
            accumulate(&mut pgrads[b.index()], channel_sums(g, co, out_plane)?)?;
        }
        Ok(())
    }
}

/// Blends observed batch statistics into the running buffers:
/// `running = (1 − momentum)·running + momentum·batch`.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate], momentum: f64) {
    for u in updates {
        for (r, m) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

fn add_channel_bias(dst: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in dst.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &Tensor, channels: usize, plane: usize) -> Result<Tensor> {
    let mut db = vec![0.0; channels];
    for (k, chunk) in g.data().chunks(plane).enumerate() {
        db[k % channels] += chunk.iter().sum::<f64>();
    }
    Tensor::from_vec(&[channels], db)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
