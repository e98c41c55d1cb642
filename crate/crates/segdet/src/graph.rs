//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! A [`Graph`] records one forward computation; every op appends a node whose
//! parents were recorded earlier, so the vector order is already topological.
//! [`Graph::backward`] walks the nodes exactly once in reverse recording
//! order and accumulates leaf gradients into the bound [`Param`] tensors,
//! where they stay (and keep accumulating across calls) until zeroed.
//!
//! Values are `f32`; scalar loss reductions accumulate in `f64` and round
//! once. In debug builds every forward op asserts its output is finite.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Const,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: [usize; 2], pad: [usize; 2] },
    Conv3d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: [usize; 3], pad: [usize; 3] },
    TConv3d { x: NodeId, w: NodeId },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Relu { x: NodeId },
    ConcatCh { a: NodeId, b: NodeId },
    SoftmaxCe { logits: NodeId, labels: Vec<i32>, ignore: Option<i32>, probs: Vec<f32>, count: usize },
    SmoothL1 { pred: NodeId, target: NodeId },
    Gather { x: NodeId, indices: Vec<usize> },
    Reshape { x: NodeId },
    Scale { x: NodeId, c: f32 },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sum { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Set on leaves staged from a [`Param`]; backward adds the leaf gradient
    /// into this shared tensor's grad buffer.
    bound: Option<Rc<RefCell<Tensor>>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Stage an untracked input (image data, regression targets, ...).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Const, false, None)
    }

    /// Stage a trainable parameter; its current values are copied onto the
    /// tape and its grad buffer receives the leaf gradient on backward.
    pub fn param(&mut self, p: &Param) -> NodeId {
        let t = p.borrow().clone();
        self.push(t, Op::Leaf, true, Some(p.share()))
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool, bound: Option<Rc<RefCell<Tensor>>>) -> NodeId {
        value.requires_grad = requires_grad;
        value.grad = None;
        debug_assert!(value.is_finite(), "forward op produced a non-finite value");
        self.nodes.push(Node { value, op, bound });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    /// N-d convolution with zero padding; dims inferred from the input rank
    /// (4 => 2D, 5 => 3D). Output extent per axis is
    /// `(in + 2*pad - k) / stride + 1`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: &[usize], pad: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        let wt = self.value(w);
        let rank = xt.rank();
        if rank != 4 && rank != 5 {
            return Err(Error::Dim(format!("conv expects rank-4 or rank-5 input, got rank {rank}")));
        }
        if wt.rank() != rank {
            return Err(Error::Dim(format!(
                "conv weight rank {} does not match input rank {rank}",
                wt.rank()
            )));
        }
        let spatial = rank - 2;
        if stride.len() != spatial || pad.len() != spatial {
            return Err(Error::Dim(format!(
                "conv stride/pad must have {spatial} entries, got {}/{}",
                stride.len(),
                pad.len()
            )));
        }
        if xt.shape[1] != wt.shape[1] {
            return Err(Error::Dim(format!(
                "conv input channels {} != weight channels {}",
                xt.shape[1], wt.shape[1]
            )));
        }
        for a in 0..spatial {
            if xt.shape[2 + a] + 2 * pad[a] < wt.shape[2 + a] {
                return Err(Error::Dim(format!(
                    "kernel extent {} exceeds padded input {} on spatial axis {a}",
                    wt.shape[2 + a],
                    xt.shape[2 + a] + 2 * pad[a]
                )));
            }
            if stride[a] == 0 {
                return Err(Error::Input("conv stride must be positive".into()));
            }
        }
        if let Some(bid) = b {
            let bt = self.value(bid);
            if bt.shape != vec![wt.shape[0]] {
                return Err(Error::Dim(format!(
                    "conv bias shape {:?} != [{}]",
                    bt.shape, wt.shape[0]
                )));
            }
        }

        let req = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|bid| self.needs_grad(bid));
        if rank == 4 {
            let xs = [xt.shape[0], xt.shape[1], xt.shape[2], xt.shape[3]];
            let ws = [wt.shape[0], wt.shape[1], wt.shape[2], wt.shape[3]];
            let st = [stride[0], stride[1]];
            let pd = [pad[0], pad[1]];
            let os = kernels::conv2d_out_shape(xs, ws, st, pd);
            let mut out = Tensor::zeros(&os);
            let bias = b.map(|bid| self.data(bid).to_vec());
            kernels::conv2d_forward(self.data(x), xs, self.data(w), ws, bias.as_deref(), st, pd, &mut out.data);
            Ok(self.push(out, Op::Conv2d { x, w, b, stride: st, pad: pd }, req, None))
        } else {
            let xs = [xt.shape[0], xt.shape[1], xt.shape[2], xt.shape[3], xt.shape[4]];
            let ws = [wt.shape[0], wt.shape[1], wt.shape[2], wt.shape[3], wt.shape[4]];
            let st = [stride[0], stride[1], stride[2]];
            let pd = [pad[0], pad[1], pad[2]];
            let os = kernels::conv3d_out_shape(xs, ws, st, pd);
            let mut out = Tensor::zeros(&os);
            let bias = b.map(|bid| self.data(bid).to_vec());
            kernels::conv3d_forward(self.data(x), xs, self.data(w), ws, bias.as_deref(), st, pd, &mut out.data);
            Ok(self.push(out, Op::Conv3d { x, w, b, stride: st, pad: pd }, req, None))
        }
    }

    /// Transposed 3D convolution; the adjoint of a strided convolution.
    /// Requires stride == kernel size per axis (each output voxel receives
    /// exactly one scatter contribution), which doubles every spatial extent
    /// for the 2x2x2/stride-2 configuration in use.
    pub fn tconv(&mut self, x: NodeId, w: NodeId, stride: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        let wt = self.value(w);
        if xt.rank() != 5 {
            return Err(Error::Dim(format!(
                "transposed conv expects rank-5 input, got rank {}",
                xt.rank()
            )));
        }
        if wt.rank() != 5 {
            return Err(Error::Dim(format!("transposed conv weight must be rank 5, got {}", wt.rank())));
        }
        if xt.shape[1] != wt.shape[0] {
            return Err(Error::Dim(format!(
                "transposed conv input channels {} != weight in-channels {}",
                xt.shape[1], wt.shape[0]
            )));
        }
        if stride != &wt.shape[2..5] {
            return Err(Error::Dim(format!(
                "transposed conv requires stride == kernel size, got stride {:?} kernel {:?}",
                stride,
                &wt.shape[2..5]
            )));
        }
        let xs = [xt.shape[0], xt.shape[1], xt.shape[2], xt.shape[3], xt.shape[4]];
        let ws = [wt.shape[0], wt.shape[1], wt.shape[2], wt.shape[3], wt.shape[4]];
        let os = [xs[0], ws[1], xs[2] * ws[2], xs[3] * ws[3], xs[4] * ws[4]];
        let req = self.needs_grad(x) || self.needs_grad(w);
        let mut out = Tensor::zeros(&os);
        kernels::tconv3d_forward(self.data(x), xs, self.data(w), ws, &mut out.data);
        Ok(self.push(out, Op::TConv3d { x, w }, req, None))
    }

    /// Max pooling; dims inferred from rank. Window positions are recorded
    /// for backward routing; ties go to the first element in scan order.
    pub fn maxpool(&mut self, x: NodeId, window: &[usize], stride: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        let rank = xt.rank();
        if rank != 4 && rank != 5 {
            return Err(Error::Dim(format!("maxpool expects rank-4 or rank-5 input, got rank {rank}")));
        }
        let spatial = rank - 2;
        if window.len() != spatial || stride.len() != spatial {
            return Err(Error::Dim(format!(
                "maxpool window/stride must have {spatial} entries, got {}/{}",
                window.len(),
                stride.len()
            )));
        }
        let mut oshape = vec![xt.shape[0], xt.shape[1]];
        for a in 0..spatial {
            let (e, wn, st) = (xt.shape[2 + a], window[a], stride[a]);
            if wn == 0 || st == 0 || e < wn || (e - wn) % st != 0 {
                return Err(Error::Dim(format!(
                    "maxpool extent {e} on spatial axis {a} is not divisible by window {wn} (stride {st})"
                )));
            }
            oshape.push((e - wn) / st + 1);
        }
        let req = self.needs_grad(x);
        let mut out = Tensor::zeros(&oshape);
        let mut argmax = vec![0usize; out.numel()];
        if rank == 4 {
            let xs = [xt.shape[0], xt.shape[1], xt.shape[2], xt.shape[3]];
            kernels::maxpool2d_forward(self.data(x), xs, [window[0], window[1]], [stride[0], stride[1]], &mut out.data, &mut argmax);
        } else {
            let xs = [xt.shape[0], xt.shape[1], xt.shape[2], xt.shape[3], xt.shape[4]];
            kernels::maxpool3d_forward(
                self.data(x),
                xs,
                [window[0], window[1], window[2]],
                [stride[0], stride[1], stride[2]],
                &mut out.data,
                &mut argmax,
            );
        }
        Ok(self.push(out, Op::MaxPool { x, argmax }, req, None))
    }

    /// Elementwise max(0, x); the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let req = self.needs_grad(x);
        let xt = self.value(x);
        let mut out = Tensor::zeros(&xt.shape);
        for (o, &v) in out.data.iter_mut().zip(&xt.data) {
            *o = v.max(0.0);
        }
        self.push(out, Op::Relu { x }, req, None)
    }

    /// Concatenate along the channel axis (axis 1); `a`'s channels first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        let bt = self.value(b);
        if at.rank() != bt.rank() || at.rank() < 2 {
            return Err(Error::Dim(format!(
                "concat ranks {} and {} incompatible",
                at.rank(),
                bt.rank()
            )));
        }
        for (axis, (ea, eb)) in at.shape.iter().zip(&bt.shape).enumerate() {
            if axis != 1 && ea != eb {
                return Err(Error::Dim(format!(
                    "concat requires equal extents off the channel axis; axis {axis}: {ea} vs {eb}"
                )));
            }
        }
        let (ca, cb) = (at.shape[1], bt.shape[1]);
        let mut oshape = at.shape.clone();
        oshape[1] = ca + cb;
        let spatial: usize = at.shape[2..].iter().product();
        let mut out = Tensor::zeros(&oshape);
        for n in 0..at.shape[0] {
            let dst = &mut out.data[n * (ca + cb) * spatial..][..(ca + cb) * spatial];
            dst[..ca * spatial].copy_from_slice(&at.data[n * ca * spatial..][..ca * spatial]);
            dst[ca * spatial..].copy_from_slice(&bt.data[n * cb * spatial..][..cb * spatial]);
        }
        let req = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, Op::ConcatCh { a, b }, req, None))
    }

    /// Mean over non-ignored positions of `-log softmax(logits)[label]`,
    /// stabilized by max subtraction. `logits` is `[N, L, spatial...]`,
    /// `labels` holds one class index per `[N, spatial...]` position.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[i32], ignore_label: Option<i32>) -> Result<NodeId> {
        let lt = self.value(logits);
        if lt.rank() < 2 {
            return Err(Error::Dim(format!(
                "softmax cross entropy expects rank >= 2 logits, got rank {}",
                lt.rank()
            )));
        }
        let n_batch = lt.shape[0];
        let n_classes = lt.shape[1];
        let spatial: usize = lt.shape[2..].iter().product();
        if labels.len() != n_batch * spatial {
            return Err(Error::Dim(format!(
                "expected {} labels, got {}",
                n_batch * spatial,
                labels.len()
            )));
        }
        for &l in labels {
            let ignored = ignore_label == Some(l);
            if !ignored && (l < 0 || l as usize >= n_classes) {
                return Err(Error::Input(format!(
                    "label {l} out of range for {n_classes} classes"
                )));
            }
        }

        let mut probs = vec![0.0f32; lt.numel()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for n in 0..n_batch {
            for pos in 0..spatial {
                let at = |l: usize| lt.data[(n * n_classes + l) * spatial + pos];
                let mut m = f32::NEG_INFINITY;
                for l in 0..n_classes {
                    m = m.max(at(l));
                }
                let mut denom = 0.0f64;
                for l in 0..n_classes {
                    denom += f64::from(at(l) - m).exp();
                }
                for l in 0..n_classes {
                    probs[(n * n_classes + l) * spatial + pos] = (f64::from(at(l) - m).exp() / denom) as f32;
                }
                let label = labels[n * spatial + pos];
                if ignore_label == Some(label) {
                    continue;
                }
                total += denom.ln() - f64::from(at(label as usize) - m);
                count += 1;
            }
        }
        let mean = if count == 0 { 0.0 } else { (total / count as f64) as f32 };
        let req = self.needs_grad(logits);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), ignore: ignore_label, probs, count },
            req,
            None,
        ))
    }

    /// Sum over elements of the piecewise loss `0.5*d^2` for `|d| < 1`,
    /// `|d| - 0.5` otherwise, with `d = pred - target`.
    pub fn smooth_l1(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let pt = self.value(pred);
        let tt = self.value(target);
        if pt.shape != tt.shape {
            return Err(Error::Dim(format!(
                "smooth_l1 shape mismatch: {:?} vs {:?}",
                pt.shape, tt.shape
            )));
        }
        let mut total = 0.0f64;
        for (&p, &t) in pt.data.iter().zip(&tt.data) {
            let d = f64::from(p) - f64::from(t);
            total += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        let req = self.needs_grad(pred) || self.needs_grad(target);
        Ok(self.push(Tensor::scalar(total as f32), Op::SmoothL1 { pred, target }, req, None))
    }

    /// Pick elements at the given flat indices; backward scatter-adds.
    pub fn gather(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        if indices.is_empty() {
            return Err(Error::Usage("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xt.numel()) {
            return Err(Error::Input(format!(
                "gather index {bad} out of range for {} elements",
                xt.numel()
            )));
        }
        let data: Vec<f32> = indices.iter().map(|&i| xt.data[i]).collect();
        let req = self.needs_grad(x);
        let t = Tensor::new(vec![indices.len()], data)?;
        Ok(self.push(t, Op::Gather { x, indices: indices.to_vec() }, req, None))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != xt.numel() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                xt.shape, shape
            )));
        }
        let t = Tensor::new(shape.to_vec(), xt.data.clone())?;
        let req = self.needs_grad(x);
        Ok(self.push(t, Op::Reshape { x }, req, None))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let xt = self.value(x);
        let mut out = Tensor::zeros(&xt.shape);
        for (o, &v) in out.data.iter_mut().zip(&xt.data) {
            *o = c * v;
        }
        let req = self.needs_grad(x);
        self.push(out, Op::Scale { x, c }, req, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape != bt.shape {
            return Err(Error::Dim(format!("add shape mismatch: {:?} vs {:?}", at.shape, bt.shape)));
        }
        let mut out = Tensor::zeros(&at.shape);
        for i in 0..out.data.len() {
            out.data[i] = at.data[i] + bt.data[i];
        }
        let req = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, Op::Add { a, b }, req, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape != bt.shape {
            return Err(Error::Dim(format!("mul shape mismatch: {:?} vs {:?}", at.shape, bt.shape)));
        }
        let mut out = Tensor::zeros(&at.shape);
        for i in 0..out.data.len() {
            out.data[i] = at.data[i] * bt.data[i];
        }
        let req = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, Op::Mul { a, b }, req, None))
    }

    /// Scalar sum of all elements (f64 accumulation).
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let xt = self.value(x);
        let total: f64 = xt.data.iter().map(|&v| f64::from(v)).sum();
        let req = self.needs_grad(x);
        self.push(Tensor::scalar(total as f32), Op::Sum { x }, req, None)
    }

    /// Reverse pass from a scalar loss. Every reachable parameter's grad
    /// buffer accumulates d(loss)/d(param); call `zero_grad` between steps.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        if !self.nodes[loss.0].value.requires_grad {
            return Ok(()); // loss does not depend on any parameter
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![1.0]);

        let nodes = &self.nodes;
        // Lazily materialize the gradient buffer of a parent, or None when
        // the parent does not require grad (pruned subgraph).
        fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], nodes: &[Node], id: NodeId) -> Option<&'a mut Vec<f32>> {
            if nodes[id.0].value.requires_grad {
                let numel = nodes[id.0].value.numel();
                Some(grads[id.0].get_or_insert_with(|| vec![0.0f32; numel]))
            } else {
                None
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf => {
                    if let Some(bound) = &nodes[i].bound {
                        let mut t = bound.borrow_mut();
                        let buf = t.ensure_grad();
                        for (dst, src) in buf.iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                }
                Op::Const => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xt = &nodes[x.0].value;
                    let wt = &nodes[w.0].value;
                    let xs = [xt.shape[0], xt.shape[1], xt.shape[2], xt.shape[3]];
                    let ws = [wt.shape[0], wt.shape[1], wt.shape[2], wt.shape[3]];
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        kernels::conv2d_backward_input(&g, dx, xs, &wt.data, ws, *stride, *pad);
                    }
                    if let Some(dw) = slot(&mut grads, nodes, *w) {
                        kernels::conv2d_backward_weight(&g, &xt.data, xs, dw, ws, *stride, *pad);
                    }
                    if let Some(bid) = b {
                        if let Some(db) = slot(&mut grads, nodes, *bid) {
                            let os = kernels::conv2d_out_shape(xs, ws, *stride, *pad);
                            kernels::conv_backward_bias(&g, os[0], os[1], os[2] * os[3], db);
                        }
                    }
                }
                Op::Conv3d { x, w, b, stride, pad } => {
                    let xt = &nodes[x.0].value;
                    let wt = &nodes[w.0].value;
                    let xs = [xt.shape[0], xt.shape[1], xt.shape[2], xt.shape[3], xt.shape[4]];
                    let ws = [wt.shape[0], wt.shape[1], wt.shape[2], wt.shape[3], wt.shape[4]];
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        kernels::conv3d_backward_input(&g, dx, xs, &wt.data, ws, *stride, *pad);
                    }
                    if let Some(dw) = slot(&mut grads, nodes, *w) {
                        kernels::conv3d_backward_weight(&g, &xt.data, xs, dw, ws, *stride, *pad);
                    }
                    if let Some(bid) = b {
                        if let Some(db) = slot(&mut grads, nodes, *bid) {
                            let os = kernels::conv3d_out_shape(xs, ws, *stride, *pad);
                            kernels::conv_backward_bias(&g, os[0], os[1], os[2] * os[3] * os[4], db);
                        }
                    }
                }
                Op::TConv3d { x, w } => {
                    let xt = &nodes[x.0].value;
                    let wt = &nodes[w.0].value;
                    let xs = [xt.shape[0], xt.shape[1], xt.shape[2], xt.shape[3], xt.shape[4]];
                    let ws = [wt.shape[0], wt.shape[1], wt.shape[2], wt.shape[3], wt.shape[4]];
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        kernels::tconv3d_backward_input(&g, dx, xs, &wt.data, ws);
                    }
                    if let Some(dw) = slot(&mut grads, nodes, *w) {
                        kernels::tconv3d_backward_weight(&g, &xt.data, xs, dw, ws);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        kernels::maxpool_backward(&g, argmax, dx);
                    }
                }
                Op::Relu { x } => {
                    let xdata = &nodes[x.0].value.data;
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for ((dst, &xv), gv) in dx.iter_mut().zip(xdata).zip(&g) {
                            if xv > 0.0 {
                                *dst += gv;
                            }
                        }
                    }
                }
                Op::ConcatCh { a, b } => {
                    let at = &nodes[a.0].value;
                    let bt = &nodes[b.0].value;
                    let (n_batch, ca, cb) = (at.shape[0], at.shape[1], bt.shape[1]);
                    let spatial: usize = at.shape[2..].iter().product();
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for nb in 0..n_batch {
                            let src = &g[nb * (ca + cb) * spatial..][..ca * spatial];
                            let dst = &mut da[nb * ca * spatial..][..ca * spatial];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        for nb in 0..n_batch {
                            let src = &g[nb * (ca + cb) * spatial + ca * spatial..][..cb * spatial];
                            let dst = &mut db[nb * cb * spatial..][..cb * spatial];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::SoftmaxCe { logits, labels, ignore, probs, count } => {
                    if *count == 0 {
                        continue;
                    }
                    let lt = &nodes[logits.0].value;
                    let n_classes = lt.shape[1];
                    let spatial: usize = lt.shape[2..].iter().product();
                    let n_batch = lt.shape[0];
                    let scale = g[0] / *count as f32;
                    if let Some(dl) = slot(&mut grads, nodes, *logits) {
                        for nb in 0..n_batch {
                            for pos in 0..spatial {
                                let label = labels[nb * spatial + pos];
                                if *ignore == Some(label) {
                                    continue;
                                }
                                for l in 0..n_classes {
                                    let idx = (nb * n_classes + l) * spatial + pos;
                                    let onehot = if l == label as usize { 1.0 } else { 0.0 };
                                    dl[idx] += scale * (probs[idx] - onehot);
                                }
                            }
                        }
                    }
                }
                Op::SmoothL1 { pred, target } => {
                    let deriv: Vec<f32> = nodes[pred.0]
                        .value
                        .data
                        .iter()
                        .zip(&nodes[target.0].value.data)
                        .map(|(&p, &t)| {
                            let d = p - t;
                            if d.abs() < 1.0 {
                                d
                            } else {
                                d.signum()
                            }
                        })
                        .collect();
                    let gv = g[0];
                    if let Some(dp) = slot(&mut grads, nodes, *pred) {
                        for (dst, dv) in dp.iter_mut().zip(&deriv) {
                            *dst += gv * dv;
                        }
                    }
                    if let Some(dt) = slot(&mut grads, nodes, *target) {
                        for (dst, dv) in dt.iter_mut().zip(&deriv) {
                            *dst -= gv * dv;
                        }
                    }
                }
                Op::Gather { x, indices } => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for (gi, &idx) in g.iter().zip(indices) {
                            dx[idx] += gi;
                        }
                    }
                }
                Op::Reshape { x } => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for (dst, src) in dx.iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for (dst, src) in dx.iter_mut().zip(&g) {
                            *dst += c * src;
                        }
                    }
                }
                Op::Add { a, b } => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for (dst, src) in da.iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        for (dst, src) in db.iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let adata = &nodes[a.0].value.data;
                    let bdata = &nodes[b.0].value.data;
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for i in 0..da.len() {
                            da[i] += g[i] * bdata[i];
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        for i in 0..db.len() {
                            db[i] += g[i] * adata[i];
                        }
                    }
                }
                Op::Sum { x } => {
                    let gv = g[0];
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for dst in dx.iter_mut() {
                            *dst += gv;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    fn param(name: &str, shape: &[usize], data: Vec<f32>) -> Param {
        Param::new(name, ParamKind::Weight, Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);

        let x = g.constant(Tensor::new(vec![3], vec![-5.0, -0.1, -2.0]).unwrap());
        let y = g.relu(x);
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_is_indicator() {
        let p = param("x", &[2], vec![-1.0, 2.0]);
        let mut g = Graph::new();
        let x = g.param(&p);
        let y = g.relu(x);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(p.borrow().grad.as_ref().unwrap(), &vec![0.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let p = param("x", &[4], vec![0.3, -2.0, 5.0, 0.0]);
        let mut g = Graph::new();
        let x = g.param(&p);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(p.borrow().grad.as_ref().unwrap(), &vec![1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let p = param("x", &[1], vec![3.0]);
        let mut g = Graph::new();
        let x = g.param(&p);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(p.borrow().grad.as_ref().unwrap(), &vec![6.0]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let p = param("x", &[2], vec![1.0, 2.0]);
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.param(&p);
            let loss = g.sum(x);
            g.backward(loss).unwrap();
        }
        assert_eq!(p.borrow().grad.as_ref().unwrap(), &vec![2.0, 2.0]);
        p.zero_grad();
        assert_eq!(p.borrow().grad.as_ref().unwrap(), &vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let p = param("x", &[2], vec![1.0, 2.0]);
        let mut g = Graph::new();
        let x = g.param(&p);
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn softmax_ce_uniform_is_ln2() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let labels = vec![1i32; 16];
        let loss = g.softmax_cross_entropy(logits, &labels, None).unwrap();
        assert!((g.data(loss)[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_is_stable_at_extreme_logits() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap());
        let loss = g.softmax_cross_entropy(logits, &[0], None).unwrap();
        let v = g.data(loss)[0];
        assert!(v.is_finite());
        assert!(v.abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_matches_high_precision_oracle() {
        // fixed pseudo-random 2-class 4x4 map, oracle evaluated in f64
        let mut vals = Vec::with_capacity(32);
        let mut s = 88172645463325252u64;
        for _ in 0..32 {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            vals.push(((s >> 33) as f32 / (1u64 << 31) as f32) * 4.0 - 2.0);
        }
        let labels: Vec<i32> = (0..16).map(|i| (i % 2) as i32).collect();
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 2, 4, 4], vals.clone()).unwrap());
        let loss = g.softmax_cross_entropy(logits, &labels, None).unwrap();

        let mut want = 0.0f64;
        for pos in 0..16 {
            let l0 = f64::from(vals[pos]);
            let l1 = f64::from(vals[16 + pos]);
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            let picked = if labels[pos] == 0 { l0 } else { l1 };
            want += lse - picked;
        }
        want /= 16.0;
        assert!((f64::from(g.data(loss)[0]) - want).abs() < 1e-5);
    }

    #[test]
    fn softmax_ce_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let labels = vec![0, 1, 2, 0];
        assert!(matches!(
            g.softmax_cross_entropy(logits, &labels, None),
            Err(Error::Input(_))
        ));
        // the same value is fine when declared as the ignore label
        assert!(g.softmax_cross_entropy(logits, &labels, Some(2)).is_ok());
    }

    #[test]
    fn softmax_ce_ignore_label_excluded_from_mean_and_grad() {
        let p = param("logits", &[1, 2, 2], vec![0.3, -0.7, 0.1, 0.4]);
        let mut g = Graph::new();
        let logits = g.param(&p);
        let loss = g.softmax_cross_entropy(logits, &[1, -1], Some(-1)).unwrap();
        g.backward(loss).unwrap();
        let grad = p.borrow().grad.clone().unwrap();
        // position 1 is ignored: zero gradient on both its logits
        assert_eq!(grad[1], 0.0);
        assert_eq!(grad[3], 0.0);
        assert!(grad[0] != 0.0 && grad[2] != 0.0);
    }

    #[test]
    fn smooth_l1_closed_forms() {
        let cases = [(0.0f32, 0.0f32), (0.5, 0.125), (2.0, 1.5)];
        for (d, want) in cases {
            let mut g = Graph::new();
            let pred = g.constant(Tensor::scalar(d));
            let target = g.constant(Tensor::scalar(0.0));
            let loss = g.smooth_l1(pred, target).unwrap();
            assert!((g.data(loss)[0] - want).abs() < 1e-7, "d={d}");
        }
    }

    #[test]
    fn concat_shapes_and_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::filled(&[1, 1, 2, 3, 2], 1.5));
        let b = g.constant(Tensor::filled(&[1, 1, 2, 3, 2], -2.5));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 2, 2, 3, 2]);
        // channel 0 of the result recovers a exactly
        assert!(g.data(c)[..12].iter().all(|&v| v == 1.5));
        assert!(g.data(c)[12..].iter().all(|&v| v == -2.5));

        let bad = g.constant(Tensor::zeros(&[1, 1, 2, 3, 3]));
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn concat_gradient_splits_unchanged() {
        let pa = param("a", &[1, 1, 2], vec![1.0, 2.0]);
        let pb = param("b", &[1, 2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let a = g.param(&pa);
        let b = g.param(&pb);
        let c = g.concat_channels(a, b).unwrap();
        let weights = g.constant(Tensor::new(vec![1, 3, 2], vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0]).unwrap());
        let weighted = g.mul(c, weights).unwrap();
        let loss = g.sum(weighted);
        g.backward(loss).unwrap();
        assert_eq!(pa.borrow().grad.as_ref().unwrap(), &vec![10.0, 20.0]);
        assert_eq!(pb.borrow().grad.as_ref().unwrap(), &vec![30.0, 40.0, 50.0, 60.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut vals = Vec::with_capacity(2 * 27);
        let mut s = 123456789u64;
        for _ in 0..2 * 27 {
            s = s.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            vals.push((s >> 40) as f32 / 1e7);
        }
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![1, 2, 3, 3, 3], vals[..54].to_vec()).unwrap());
            let w = g.constant(Tensor::new(vec![1, 2, 3, 3, 3], vals[..54].to_vec()).unwrap());
            let y = g.conv(x, w, None, &[1, 1, 1], &[1, 1, 1]).unwrap();
            let y = g.relu(y);
            g.data(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(matches!(g.conv(x, w, None, &[1, 1], &[1, 1]), Err(Error::Dim(_))));
    }

    #[test]
    fn conv_graph_center_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let y = g.conv(x, w, None, &[1, 1], &[1, 1]).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.data(y)[4], 9.0);
    }

    #[test]
    fn tconv_rejects_non_5d() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(g.tconv(x, w, &[2, 2]), Err(Error::Dim(_))));
    }

    #[test]
    fn maxpool_rejects_indivisible_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 5, 4]));
        assert!(matches!(g.maxpool(x, &[2, 2], &[2, 2]), Err(Error::Dim(_))));
    }
}
