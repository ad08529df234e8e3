//! Eager reverse-mode autodiff over a flat operation tape.
//!
//! A [`Tape`] is built fresh for each forward pass and discarded after
//! [`Tape::backward`]. Nodes store their forward values; leaves keep a
//! persistent grad buffer that accumulates across repeated backward calls.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_err, shape_err, Result};
use crate::ops;
use crate::tensor::{check_same_shape, dims2, dims4, Tensor};

pub type TensorId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        dims: (usize, usize, usize),
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        train: bool,
    },
    Relu(TensorId),
    Sigmoid(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Sqrt(TensorId),
    AddConst(TensorId),
    MulConst(TensorId, f64),
    ConstMinus(TensorId),
    Dot(TensorId, TensorId),
    SumAll(TensorId),
    MeanAxis0(TensorId),
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Linear {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    GlobalMaxPool {
        x: TensorId,
        argmax: Vec<usize>,
    },
    BilinearResize(TensorId),
    MulMaskHw {
        x: TensorId,
        mask: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn value_scalar(&self, id: TensorId) -> f64 {
        self.nodes[id].data[0]
    }

    /// Gradient of a leaf (or any node) after `backward`; `None` before.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn leaf_data(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(shape_err!("leaf shape {:?} vs {} values", shape, data.len()));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<TensorId> {
        let xd = dims4(self.shape(x))?;
        let wd = dims4(self.shape(w))?;
        if xd.1 != wd.1 {
            return Err(shape_err!(
                "conv2d channel counts disagree: input {:?} vs weight {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        if self.shape(b) != [wd.0] {
            return Err(shape_err!(
                "conv2d bias {:?} for {} output channels",
                self.shape(b),
                wd.0
            ));
        }
        let oh = ops::conv_out_extent(xd.2, wd.2, stride.0, pad.0)?;
        let ow = ops::conv_out_extent(xd.3, wd.3, stride.1, pad.1)?;
        let out = ops::conv2d_forward(
            self.value(x),
            xd,
            self.value(w),
            wd,
            self.value(b),
            stride,
            pad,
            (oh, ow),
        );
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            vec![xd.0, wd.0, oh, ow],
            out,
            Op::Conv2d { x, w, b, stride, pad },
            req,
        ))
    }

    /// Batch normalization over the channel axis of a rank-4 (N,C,H,W) or
    /// rank-2 (N,C) input. Train mode normalizes with batch statistics and
    /// folds them into `running_*` with the given momentum; eval mode
    /// normalizes with the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        momentum: f64,
        eps: f64,
        train: bool,
    ) -> Result<TensorId> {
        let dims = match self.shape(x) {
            [n, c, h, w] => (*n, *c, h * w),
            [n, c] => (*n, *c, 1),
            other => return Err(shape_err!("batchnorm expects rank 2 or 4, got {:?}", other)),
        };
        let c = dims.1;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(shape_err!("batchnorm affine/running extents do not match C={}", c));
        }
        let (mean, var) = if train {
            let (m, v) = ops::batch_stats(self.value(x), dims);
            ops::update_running_stats(running_mean, running_var, &m, &v, momentum, dims.0 * dims.2);
            (m, v)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let out = ops::batchnorm_apply(
            self.value(x),
            dims,
            self.value(gamma),
            self.value(beta),
            &mean,
            &var,
            eps,
        );
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                mean,
                var,
                eps,
                train,
            },
            req,
        ))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, Op::Relu(x), req)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).iter().map(|&v| crate::math::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, Op::Sigmoid(x), req)
    }

    fn binary_elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        check_same_shape(self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, op, req))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).iter().map(|&v| crate::math::sqrt(v)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, Op::Sqrt(x), req)
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, Op::AddConst(x), req)
    }

    pub fn mul_const(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, Op::MulConst(x, c), req)
    }

    /// c - x, elementwise.
    pub fn const_minus(&mut self, c: f64, x: TensorId) -> TensorId {
        let data = self.value(x).iter().map(|&v| c - v).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, Op::ConstMinus(x), req)
    }

    /// Inner product of two same-extent tensors, flattened. Scalar output.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        check_same_shape(self.shape(a), self.shape(b))?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .sum();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![1], vec![v], Op::Dot(a, b), req))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).iter().sum();
        let req = self.requires(x);
        self.push(vec![1], vec![v], Op::SumAll(x), req)
    }

    /// Mean over the rows of a rank-2 tensor; output has the column extent.
    pub fn mean_axis0(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = dims2(self.shape(x))?;
        if n == 0 {
            return Err(invalid_err!("mean over zero rows"));
        }
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&self.value(x)[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let req = self.requires(x);
        Ok(self.push(vec![d], out, Op::MeanAxis0(x), req))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(invalid_err!("concat of zero tensors"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {} for rank {}", axis, first.len()));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() {
                return Err(shape_err!("concat rank mismatch: {:?} vs {:?}", s, first));
            }
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if d != axis && a != b {
                    return Err(shape_err!(
                        "concat non-axis extents differ at dim {}: {:?} vs {:?}",
                        d,
                        s,
                        first
                    ));
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let pa = self.shape(p)[axis];
            let src = self.value(p);
            for oi in 0..outer {
                let dst_base = (oi * axis_total + offset) * inner;
                let src_base = oi * pa * inner;
                data[dst_base..dst_base + pa * inner]
                    .copy_from_slice(&src[src_base..src_base + pa * inner]);
            }
            offset += pa;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        ))
    }

    /// Half-open slice along one axis.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, end: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("slice axis {} for rank {}", axis, shape.len()));
        }
        if start >= end || end > shape[axis] {
            return Err(invalid_err!(
                "slice [{}, {}) out of range for extent {}",
                start,
                end,
                shape[axis]
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let span = end - start;
        let mut data = vec![0.0; outer * span * inner];
        let src = self.value(x);
        for oi in 0..outer {
            let src_base = (oi * dim + start) * inner;
            let dst_base = oi * span * inner;
            data[dst_base..dst_base + span * inner]
                .copy_from_slice(&src[src_base..src_base + span * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = span;
        let req = self.requires(x);
        Ok(self.push(out_shape, data, Op::Slice { x, axis, start, end }, req))
    }

    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, i) = dims2(self.shape(x))?;
        let (o, wi) = dims2(self.shape(w))?;
        if wi != i {
            return Err(shape_err!(
                "linear input dim {} vs weight {:?}",
                i,
                self.shape(w)
            ));
        }
        if self.shape(b) != [o] {
            return Err(shape_err!("linear bias {:?} for {} outputs", self.shape(b), o));
        }
        let out = ops::linear_forward(self.value(x), (n, i), self.value(w), self.value(b), o);
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![n, o], out, Op::Linear { x, w, b }, req))
    }

    pub fn global_max_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let d = dims4(self.shape(x))?;
        if d.2 == 0 || d.3 == 0 {
            return Err(shape_err!("global_max_pool over empty map {:?}", self.shape(x)));
        }
        let (out, argmax) = ops::global_max_pool(self.value(x), d);
        let req = self.requires(x);
        Ok(self.push(vec![d.0, d.1], out, Op::GlobalMaxPool { x, argmax }, req))
    }

    pub fn bilinear_resize(&mut self, x: TensorId, oh: usize, ow: usize) -> Result<TensorId> {
        let d = dims4(self.shape(x))?;
        if oh == 0 || ow == 0 {
            return Err(invalid_err!("bilinear_resize to empty extent {}x{}", oh, ow));
        }
        let out = ops::bilinear_forward(self.value(x), d, (oh, ow));
        let req = self.requires(x);
        Ok(self.push(vec![d.0, d.1, oh, ow], out, Op::BilinearResize(x), req))
    }

    /// Multiply every channel of a rank-4 tensor by a constant HxW mask.
    pub fn mul_mask_hw(&mut self, x: TensorId, mask: &[f64]) -> Result<TensorId> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if mask.len() != h * w {
            return Err(shape_err!("mask of {} values for {}x{} maps", mask.len(), h, w));
        }
        let sp = h * w;
        let mut data = vec![0.0; n * c * sp];
        for plane in 0..n * c {
            let base = plane * sp;
            for k in 0..sp {
                data[base + k] = self.value(x)[base + k] * mask[k];
            }
        }
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        Ok(self.push(
            shape,
            data,
            Op::MulMaskHw {
                x,
                mask: mask.to_vec(),
            },
            req,
        ))
    }

    /// Mean over the batch of -log softmax probability at the label index.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (n, k) = dims2(self.shape(logits))?;
        if labels.len() != n {
            return Err(shape_err!("{} labels for batch of {}", labels.len(), n));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid_err!("label {} out of range for {} classes", bad, k));
        }
        let probs = ops::softmax_rows(self.value(logits), (n, k));
        let mut loss = 0.0;
        for (ni, &l) in labels.iter().enumerate() {
            loss -= crate::math::ln(probs[ni * k + l]);
        }
        loss /= n as f64;
        let req = self.requires(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            req,
        ))
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// grad-requiring leaf created before the loss; repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(invalid_err!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                let buf = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                for (dst, src) in buf.iter_mut().zip(&g) {
                    *dst += src;
                }
            }
        }
        // Untouched grad-requiring leaves still get a zero buffer so the
        // optimizer sees every parameter populated.
        for id in 0..=loss {
            let node = &mut self.nodes[id];
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(delta) {
                    *d += s;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_owned(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: Vec<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(&delta) {
                    *d += s;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: TensorId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Clone the op descriptor cheaply where it only holds ids; ops with
        // saved buffers are matched by reference.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xd = dims4(&self.nodes[*x].shape).unwrap();
                let wd = dims4(&self.nodes[*w].shape).unwrap();
                let oh = self.nodes[id].shape[2];
                let ow = self.nodes[id].shape[3];
                let (gx, gw, gb) = ops::conv2d_backward(
                    &self.nodes[*x].data,
                    xd,
                    &self.nodes[*w].data,
                    wd,
                    *stride,
                    *pad,
                    (oh, ow),
                    g,
                );
                self.accumulate_owned(grads, *x, gx);
                self.accumulate_owned(grads, *w, gw);
                self.accumulate_owned(grads, *b, gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                mean,
                var,
                eps,
                train,
            } => {
                let (gx, ggamma, gbeta) = if *train {
                    ops::batchnorm_backward_train(
                        &self.nodes[*x].data,
                        *dims,
                        &self.nodes[*gamma].data,
                        mean,
                        var,
                        *eps,
                        g,
                    )
                } else {
                    ops::batchnorm_backward_eval(
                        &self.nodes[*x].data,
                        *dims,
                        &self.nodes[*gamma].data,
                        mean,
                        var,
                        *eps,
                        g,
                    )
                };
                self.accumulate_owned(grads, *x, gx);
                self.accumulate_owned(grads, *gamma, ggamma);
                self.accumulate_owned(grads, *beta, gbeta);
            }
            Op::Relu(x) => {
                let delta: Vec<f64> = self.nodes[*x]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate_owned(grads, *x, delta);
            }
            Op::Sigmoid(x) => {
                let delta: Vec<f64> = self.nodes[id]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&o, &gv)| gv * o * (1.0 - o))
                    .collect();
                self.accumulate_owned(grads, *x, delta);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate_owned(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(&self.nodes[*b].data).map(|(&gv, &bv)| gv * bv).collect();
                let gb: Vec<f64> = g.iter().zip(&self.nodes[*a].data).map(|(&gv, &av)| gv * av).collect();
                self.accumulate_owned(grads, *a, ga);
                self.accumulate_owned(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let ga: Vec<f64> = g.iter().zip(&self.nodes[*b].data).map(|(&gv, &bv)| gv / bv).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[*a].data.iter().zip(&self.nodes[*b].data))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                self.accumulate_owned(grads, *a, ga);
                self.accumulate_owned(grads, *b, gb);
            }
            Op::Sqrt(x) => {
                let delta: Vec<f64> = self.nodes[id]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&o, &gv)| gv / (2.0 * o).max(1e-300))
                    .collect();
                self.accumulate_owned(grads, *x, delta);
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g),
            Op::MulConst(x, c) => {
                let delta: Vec<f64> = g.iter().map(|&v| v * c).collect();
                self.accumulate_owned(grads, *x, delta);
            }
            Op::ConstMinus(x) => {
                let delta: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate_owned(grads, *x, delta);
            }
            Op::Dot(a, b) => {
                let g0 = g[0];
                let ga: Vec<f64> = self.nodes[*b].data.iter().map(|&v| g0 * v).collect();
                let gb: Vec<f64> = self.nodes[*a].data.iter().map(|&v| g0 * v).collect();
                self.accumulate_owned(grads, *a, ga);
                self.accumulate_owned(grads, *b, gb);
            }
            Op::SumAll(x) => {
                let delta = vec![g[0]; self.nodes[*x].data.len()];
                self.accumulate_owned(grads, *x, delta);
            }
            Op::MeanAxis0(x) => {
                let (n, d) = dims2(&self.nodes[*x].shape).unwrap();
                let scale = 1.0 / n as f64;
                let mut delta = vec![0.0; n * d];
                for r in 0..n {
                    for k in 0..d {
                        delta[r * d + k] = g[k] * scale;
                    }
                }
                self.accumulate_owned(grads, *x, delta);
            }
            Op::Concat { parts, axis } => {
                let shape = &self.nodes[id].shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let pa = self.nodes[p].shape[*axis];
                    if self.nodes[p].requires_grad {
                        let mut delta = vec![0.0; self.nodes[p].data.len()];
                        for oi in 0..outer {
                            let src_base = (oi * total + offset) * inner;
                            let dst_base = oi * pa * inner;
                            delta[dst_base..dst_base + pa * inner]
                                .copy_from_slice(&g[src_base..src_base + pa * inner]);
                        }
                        self.accumulate_owned(grads, p, delta);
                    }
                    offset += pa;
                }
            }
            Op::Slice { x, axis, start, end } => {
                let shape = &self.nodes[*x].shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let dim = shape[*axis];
                let span = end - start;
                let mut delta = vec![0.0; self.nodes[*x].data.len()];
                for oi in 0..outer {
                    let dst_base = (oi * dim + start) * inner;
                    let src_base = oi * span * inner;
                    delta[dst_base..dst_base + span * inner]
                        .copy_from_slice(&g[src_base..src_base + span * inner]);
                }
                self.accumulate_owned(grads, *x, delta);
            }
            Op::Linear { x, w, b } => {
                let xd = dims2(&self.nodes[*x].shape).unwrap();
                let o = self.nodes[*w].shape[0];
                let (gx, gw, gb) =
                    ops::linear_backward(&self.nodes[*x].data, xd, &self.nodes[*w].data, o, g);
                self.accumulate_owned(grads, *x, gx);
                self.accumulate_owned(grads, *w, gw);
                self.accumulate_owned(grads, *b, gb);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let (_, _, h, w) = dims4(&self.nodes[*x].shape).unwrap();
                let sp = h * w;
                let mut delta = vec![0.0; self.nodes[*x].data.len()];
                for (plane, &at) in argmax.iter().enumerate() {
                    delta[plane * sp + at] = g[plane];
                }
                self.accumulate_owned(grads, *x, delta);
            }
            Op::BilinearResize(x) => {
                let xd = dims4(&self.nodes[*x].shape).unwrap();
                let oh = self.nodes[id].shape[2];
                let ow = self.nodes[id].shape[3];
                let delta = ops::bilinear_backward(xd, (oh, ow), g);
                self.accumulate_owned(grads, *x, delta);
            }
            Op::MulMaskHw { x, mask } => {
                let sp = mask.len();
                let planes = self.nodes[*x].data.len() / sp;
                let mut delta = vec![0.0; self.nodes[*x].data.len()];
                for plane in 0..planes {
                    let base = plane * sp;
                    for k in 0..sp {
                        delta[base + k] = g[base + k] * mask[k];
                    }
                }
                self.accumulate_owned(grads, *x, delta);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (n, k) = dims2(&self.nodes[*logits].shape).unwrap();
                let g0 = g[0] / n as f64;
                let mut delta = probs.clone();
                for (ni, &l) in labels.iter().enumerate() {
                    delta[ni * k + l] -= 1.0;
                }
                delta.iter_mut().for_each(|v| *v *= g0);
                self.accumulate_owned(grads, *logits, delta);
            }
        }
    }
}
