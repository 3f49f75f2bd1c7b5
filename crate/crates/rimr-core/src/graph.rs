//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Ops append nodes holding eagerly computed values; `backward` walks the tape
//! in reverse insertion order, which is a valid reverse topological order
//! because an op may only reference earlier vars. Gradients accumulate, so a
//! second backward pass doubles them unless the graph is rebuilt.

use crate::conv::{self, ConvGeom3};
use crate::scalar::Scalar;
use crate::tensor::{strides_for, Tensor, TensorError, TensorResult};

/// Handle to a node in one [`Graph`]. Handles from different graphs must not
/// be mixed; indices are graph-local.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch normalization statistics for one op application, one entry per channel.
#[derive(Debug, Clone)]
pub struct BnStats<E: Scalar> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
}

/// Extension point for losses whose backward pass needs saved state from the
/// forward computation (nearest-neighbour indices and the like).
pub trait CustomOp<E: Scalar>: std::fmt::Debug {
    fn name(&self) -> &'static str;
    /// Returns one optional gradient per input, in input order.
    fn backward(&self, inputs: &[&Tensor<E>], grad_out: &Tensor<E>) -> Vec<Option<Tensor<E>>>;
}

#[derive(Debug)]
enum Op<E: Scalar> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv3d { x: Var, k: Var, geom: ConvGeom3 },
    ConvTranspose3d { x: Var, k: Var, geom: ConvGeom3 },
    /// 2D wrappers keep rank-3 activations / rank-4 kernels on the tape and
    /// lift to the 3D kernels with a unit depth axis.
    Conv2d { x: Var, k: Var, geom: ConvGeom3 },
    ConvTranspose2d { x: Var, k: Var, geom: ConvGeom3 },
    BiasChannels { x: Var, b: Var },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: E },
    Sigmoid { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, stats: BnStats<E>, train: bool },
    TopK { x: Var, source: Vec<usize> },
    Mse { a: Var, b: Var },
    L1 { a: Var, b: Var },
    Add { a: Var, b: Var },
    MulScalar { x: Var },
    SumAll { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    ResizeNearest2d { x: Var },
    RepeatRows { x: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<E>> },
}

#[derive(Debug)]
struct Node<E: Scalar> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    requires_grad: bool,
    op: Op<E>,
    scale: E,
}

#[derive(Debug, Default)]
pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
    named: Vec<(String, Var)>,
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), named: Vec::new() }
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        self.push_scaled(value, requires_grad, op, E::ONE)
    }

    fn push_scaled(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>, scale: E) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op, scale });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf that participates in differentiation.
    pub fn variable(&mut self, value: Tensor<E>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Differentiable leaf registered under a name, for routing gradients back
    /// to network parameters after `backward`.
    pub fn named_variable(&mut self, name: impl Into<String>, value: Tensor<E>) -> Var {
        let v = self.variable(value);
        self.named.push((name.into(), v));
        v
    }

    /// Named leaves in registration order with their accumulated gradients.
    pub fn named_grads(&self) -> impl Iterator<Item = (&str, Option<&Tensor<E>>)> {
        self.named.iter().map(|(name, v)| (name.as_str(), self.grad(*v)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> TensorResult<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: xs.to_vec(), rhs: ws.to_vec() });
        }
        let (batch, out_dim) = (xs[0], ws[1]);
        let mut out = vec![E::ZERO; batch * out_dim];
        for row in out.chunks_exact_mut(out_dim) {
            row.copy_from_slice(self.value(b).data());
        }
        E::gemm(batch, xs[1], out_dim, E::ONE, self.value(x).data(), self.value(w).data(), E::ONE, &mut out);
        let value = Tensor::new(vec![batch, out_dim], out)?;
        let req = self.any_requires(&[x, w, b]);
        Ok(self.push(value, req, Op::Linear { x, w, b }))
    }

    pub fn conv3d(&mut self, x: Var, kernels: Var, stride: [usize; 3], pad: [usize; 3]) -> TensorResult<Var> {
        let geom = ConvGeom3::new(stride, pad);
        let value = conv::conv3d(self.value(x), self.value(kernels), geom)?;
        let req = self.any_requires(&[x, kernels]);
        Ok(self.push(value, req, Op::Conv3d { x, k: kernels, geom }))
    }

    pub fn conv_transpose3d(&mut self, x: Var, kernels: Var, stride: [usize; 3], pad: [usize; 3]) -> TensorResult<Var> {
        let geom = ConvGeom3::new(stride, pad);
        let value = conv::conv_transpose3d(self.value(x), self.value(kernels), geom)?;
        let req = self.any_requires(&[x, kernels]);
        Ok(self.push(value, req, Op::ConvTranspose3d { x, k: kernels, geom }))
    }

    /// `x`: `[C, H, W]`, `kernels`: `[K, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: [usize; 2], pad: [usize; 2]) -> TensorResult<Var> {
        let geom = ConvGeom3::from_2d(stride, pad);
        let (x3, k4) = (lift_activation(self.value(x))?, lift_kernels(self.value(kernels))?);
        let value = drop_depth_axis(conv::conv3d(&x3, &k4, geom)?)?;
        let req = self.any_requires(&[x, kernels]);
        Ok(self.push(value, req, Op::Conv2d { x, k: kernels, geom }))
    }

    /// `x`: `[K, H, W]`, `kernels`: `[K, C, kh, kw]`, output `[C, H', W']`.
    pub fn conv_transpose2d(&mut self, x: Var, kernels: Var, stride: [usize; 2], pad: [usize; 2]) -> TensorResult<Var> {
        let geom = ConvGeom3::from_2d(stride, pad);
        let (x3, k4) = (lift_activation(self.value(x))?, lift_kernels(self.value(kernels))?);
        let value = drop_depth_axis(conv::conv_transpose3d(&x3, &k4, geom)?)?;
        let req = self.any_requires(&[x, kernels]);
        Ok(self.push(value, req, Op::ConvTranspose2d { x, k: kernels, geom }))
    }

    /// Adds a per-channel bias, broadcasting over every non-channel axis.
    pub fn bias_channels(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape();
        if xs.is_empty() || bs.len() != 1 || bs[0] != xs[0] {
            return Err(TensorError::ShapeMismatch { op: "bias_channels", lhs: xs, rhs: bs.to_vec() });
        }
        let per_channel = self.value(x).len() / xs[0];
        let mut value = self.value(x).clone();
        for (c, chunk) in value.data_mut().chunks_exact_mut(per_channel).enumerate() {
            let b = self.value(bias).data()[c];
            for v in chunk {
                *v += b;
            }
        }
        let req = self.any_requires(&[x, bias]);
        Ok(self.push(value, req, Op::BiasChannels { x, b: bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(E::ZERO));
        let req = self.requires(x);
        self.push(value, req, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = E::from_f64(slope);
        let value = self.value(x).map(|v| if v > E::ZERO { v } else { s * v });
        let req = self.requires(x);
        self.push(value, req, Op::LeakyRelu { x, slope: s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| E::ONE / (E::ONE + (-v).exp()));
        let req = self.requires(x);
        self.push(value, req, Op::Sigmoid { x })
    }

    /// Normalizes with the given per-channel statistics (axis 0 is channels).
    /// `train` selects the full backward pass in which the statistics are
    /// treated as functions of `x`; eval treats them as constants.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<E>, train: bool) -> TensorResult<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() {
            return Err(TensorError::RankMismatch { op: "batch_norm", expected: 1, shape: xs });
        }
        let channels = xs[0];
        if self.value(x).is_empty() {
            return Err(TensorError::Empty { op: "batch_norm" });
        }
        let gs = self.value(gamma).shape();
        let bs = self.value(beta).shape();
        if gs != [channels] || bs != [channels] || stats.mean.len() != channels || stats.inv_std.len() != channels {
            return Err(TensorError::ShapeMismatch { op: "batch_norm", lhs: xs, rhs: gs.to_vec() });
        }
        let per_channel = self.value(x).len() / channels;
        let mut value = self.value(x).clone();
        for (c, chunk) in value.data_mut().chunks_exact_mut(per_channel).enumerate() {
            let (m, istd) = (stats.mean[c], stats.inv_std[c]);
            let (g, b) = (self.value(gamma).data()[c], self.value(beta).data()[c]);
            for v in chunk {
                *v = (*v - m) * istd * g + b;
            }
        }
        let req = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(value, req, Op::BatchNorm { x, gamma, beta, stats, train }))
    }

    /// The `k` largest values along `axis`, sorted descending; ties keep the
    /// lower source index first and gradients flow to the selected positions.
    pub fn reduce_topk_max(&mut self, x: Var, axis: usize, k: usize) -> TensorResult<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "reduce_topk_max",
                message: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        if k == 0 || k > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "reduce_topk_max",
                message: format!("k={k} outside 1..={} along axis {axis}", shape[axis]),
            });
        }
        let strides = strides_for(&shape);
        let axis_len = shape[axis];
        let axis_stride = strides[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = k;
        let mut out = Tensor::zeros(&out_shape);
        let mut source = vec![0usize; out.len()];
        let out_strides = out.strides();
        let data = self.value(x).data();
        let mut lane: Vec<(E, usize)> = Vec::with_capacity(axis_len);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * axis_stride + i;
                lane.clear();
                lane.extend((0..axis_len).map(|a| (data[base + a * axis_stride], base + a * axis_stride)));
                // Stable sort by descending value keeps equal values in
                // source order, which is the tie-break contract.
                lane.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
                let out_base = o * k * out_strides[axis] + i;
                for (rank, &(v, src)) in lane.iter().take(k).enumerate() {
                    let idx = out_base + rank * out_strides[axis];
                    out.data_mut()[idx] = v;
                    source[idx] = src;
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, req, Op::TopK { x, source }))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let diff = self.value(a).zip_map(self.value(b), "mse", |x, y| (x - y) * (x - y))?;
        let n = E::from_f64(diff.len() as f64);
        let value = Tensor::scalar(diff.data().iter().copied().sum::<E>() / n);
        let req = self.any_requires(&[a, b]);
        Ok(self.push(value, req, Op::Mse { a, b }))
    }

    pub fn l1(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let diff = self.value(a).zip_map(self.value(b), "l1", |x, y| (x - y).abs())?;
        let n = E::from_f64(diff.len() as f64);
        let value = Tensor::scalar(diff.data().iter().copied().sum::<E>() / n);
        let req = self.any_requires(&[a, b]);
        Ok(self.push(value, req, Op::L1 { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let req = self.any_requires(&[a, b]);
        Ok(self.push(value, req, Op::Add { a, b }))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let s = E::from_f64(c);
        let value = self.value(x).map(|v| v * s);
        let req = self.requires(x);
        self.push_scaled(value, req, Op::MulScalar { x }, s)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        let req = self.requires(x);
        self.push(value, req, Op::SumAll { x })
    }

    /// Mean of scalar vars, for averaging losses over a batch.
    pub fn mean_of(&mut self, vars: &[Var]) -> TensorResult<Var> {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(self.mul_scalar(acc, 1.0 / vars.len() as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> TensorResult<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: Var, perm: Vec<usize>) -> TensorResult<Var> {
        let value = self.value(x).permuted(&perm)?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::Permute { x, perm }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> TensorResult<Var> {
        if inputs.is_empty() {
            return Err(TensorError::Empty { op: "concat" });
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                message: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        let mut offset = 0usize;
        for &v in inputs {
            let a = self.value(v).shape()[axis];
            let src = self.value(v).data();
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * a * inner;
                out.data_mut()[dst_start..dst_start + a * inner]
                    .copy_from_slice(&src[src_start..src_start + a * inner]);
            }
            offset += a;
        }
        let req = self.any_requires(inputs);
        Ok(self.push(out, req, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Nearest-neighbour resize of `[C, H, W]` maps; source index floors.
    pub fn resize_nearest2d(&mut self, x: Var, out_h: usize, out_w: usize) -> TensorResult<Var> {
        let shape = self.value(x).shape();
        if shape.len() != 3 {
            return Err(TensorError::RankMismatch { op: "resize_nearest2d", expected: 3, shape: shape.to_vec() });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(TensorError::Empty { op: "resize_nearest2d" });
        }
        let mut out = Tensor::zeros(&[c, out_h, out_w]);
        let src = self.value(x).data();
        for ch in 0..c {
            for y in 0..out_h {
                let sy = y * h / out_h;
                for xcol in 0..out_w {
                    let sx = xcol * w / out_w;
                    out.data_mut()[(ch * out_h + y) * out_w + xcol] = src[(ch * h + sy) * w + sx];
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, req, Op::ResizeNearest2d { x }))
    }

    /// Tiles a single row `[1, F]` to `[n, F]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> TensorResult<Var> {
        let shape = self.value(x).shape();
        if shape.len() != 2 || shape[0] != 1 {
            return Err(TensorError::RankMismatch { op: "repeat_rows", expected: 2, shape: shape.to_vec() });
        }
        let f = shape[1];
        let mut out = Tensor::zeros(&[n, f]);
        for row in out.data_mut().chunks_exact_mut(f) {
            row.copy_from_slice(self.value(x).data());
        }
        let req = self.requires(x);
        Ok(self.push(out, req, Op::RepeatRows { x }))
    }

    /// Inserts a precomputed value whose backward pass is delegated to `op`.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor<E>, op: Box<dyn CustomOp<E>>) -> Var {
        let req = self.any_requires(&inputs);
        self.push(value, req, Op::Custom { inputs, op })
    }

    /// Accumulates d`loss`/d`v` into every differentiable node reachable from
    /// `loss`. The loss must be scalar.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.nodes[loss.0].value.rank() != 0 {
            return Err(TensorError::RankMismatch {
                op: "backward",
                expected: 0,
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Per-pass seed buffers, merged into persistent grads at the end so
        // repeated backward calls accumulate.
        let mut pass: Vec<Option<Tensor<E>>> = (0..=loss.0).map(|_| None).collect();
        pass[loss.0] = Some(Tensor::scalar(E::ONE));
        for i in (0..=loss.0).rev() {
            let Some(grad_out) = pass[i].take() else { continue };
            let contributions = self.local_grads(i, &grad_out)?;
            for (var, grad) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut pass[var.0] {
                    Some(existing) => {
                        for (dst, src) in existing.data_mut().iter_mut().zip(grad.data()) {
                            *dst += *src;
                        }
                    }
                    slot => *slot = Some(grad),
                }
            }
            let node = &mut self.nodes[i];
            if i == loss.0 || matches!(node.op, Op::Leaf) {
                match &mut node.grad {
                    Some(existing) => {
                        for (dst, src) in existing.data_mut().iter_mut().zip(grad_out.data()) {
                            *dst += *src;
                        }
                    }
                    slot => *slot = Some(grad_out),
                }
            }
        }
        Ok(())
    }

    /// Gradients of node `i`'s output w.r.t. each of its inputs, scaled by the
    /// upstream gradient.
    fn local_grads(&self, i: usize, g: &Tensor<E>) -> TensorResult<Vec<(Var, Tensor<E>)>> {
        let node = &self.nodes[i];
        let out = Vec::new();
        let mut grads = out;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, in_dim, out_dim) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.requires(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    crate::scalar::gemm_nt(batch, out_dim, in_dim, g.data(), wv.data(), dx.data_mut());
                    grads.push((*x, dx));
                }
                if self.requires(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    crate::scalar::gemm_tn(in_dim, batch, out_dim, xv.data(), g.data(), dw.data_mut());
                    grads.push((*w, dw));
                }
                if self.requires(*b) {
                    let mut db = Tensor::zeros(&[out_dim]);
                    for row in g.data().chunks_exact(out_dim) {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    grads.push((*b, db));
                }
            }
            Op::Conv3d { x, k, geom } => {
                if self.requires(*x) {
                    let dx = conv::conv3d_grad_input(g, self.value(*k), self.value(*x).shape(), *geom)?;
                    grads.push((*x, dx));
                }
                if self.requires(*k) {
                    let dk = conv::conv3d_grad_kernels(g, self.value(*x), self.value(*k).shape(), *geom)?;
                    grads.push((*k, dk));
                }
            }
            Op::ConvTranspose3d { x, k, geom } => {
                if self.requires(*x) {
                    grads.push((*x, conv::conv_transpose3d_grad_input(g, self.value(*k), *geom)?));
                }
                if self.requires(*k) {
                    let dk =
                        conv::conv_transpose3d_grad_kernels(g, self.value(*x), self.value(*k).shape(), *geom)?;
                    grads.push((*k, dk));
                }
            }
            Op::Conv2d { x, k, geom } => {
                let g3 = lift_activation(g)?;
                let k4 = lift_kernels(self.value(*k))?;
                if self.requires(*x) {
                    let x3 = lift_activation(self.value(*x))?;
                    let dx = conv::conv3d_grad_input(&g3, &k4, x3.shape(), *geom)?;
                    grads.push((*x, drop_depth_axis(dx)?));
                }
                if self.requires(*k) {
                    let x3 = lift_activation(self.value(*x))?;
                    let dk = conv::conv3d_grad_kernels(&g3, &x3, k4.shape(), *geom)?;
                    grads.push((*k, drop_kernel_depth(dk)?));
                }
            }
            Op::ConvTranspose2d { x, k, geom } => {
                let g3 = lift_activation(g)?;
                let k4 = lift_kernels(self.value(*k))?;
                if self.requires(*x) {
                    let dx = conv::conv_transpose3d_grad_input(&g3, &k4, *geom)?;
                    grads.push((*x, drop_depth_axis(dx)?));
                }
                if self.requires(*k) {
                    let x3 = lift_activation(self.value(*x))?;
                    let dk = conv::conv_transpose3d_grad_kernels(&g3, &x3, k4.shape(), *geom)?;
                    grads.push((*k, drop_kernel_depth(dk)?));
                }
            }
            Op::BiasChannels { x, b } => {
                if self.requires(*x) {
                    grads.push((*x, g.clone()));
                }
                if self.requires(*b) {
                    let channels = self.value(*b).len();
                    let per_channel = g.len() / channels;
                    let mut db = Tensor::zeros(&[channels]);
                    for (c, chunk) in g.data().chunks_exact(per_channel).enumerate() {
                        db.data_mut()[c] = chunk.iter().copied().sum();
                    }
                    grads.push((*b, db));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= E::ZERO {
                        *d = E::ZERO;
                    }
                }
                grads.push((*x, dx));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= E::ZERO {
                        *d *= *slope;
                    }
                }
                grads.push((*x, dx));
            }
            Op::Sigmoid { x } => {
                let s = &node.value;
                let mut dx = g.clone();
                for (d, &sv) in dx.data_mut().iter_mut().zip(s.data()) {
                    *d *= sv * (E::ONE - sv);
                }
                grads.push((*x, dx));
            }
            Op::BatchNorm { x, gamma, beta, stats, train } => {
                let xv = self.value(*x);
                let channels = stats.mean.len();
                let per_channel = xv.len() / channels;
                let n = E::from_f64(per_channel as f64);
                let gamma_v = self.value(*gamma);
                let mut dgamma = Tensor::zeros(&[channels]);
                let mut dbeta = Tensor::zeros(&[channels]);
                let mut dx = Tensor::zeros(xv.shape());
                for c in 0..channels {
                    let (m, istd, gam) = (stats.mean[c], stats.inv_std[c], gamma_v.data()[c]);
                    let xs = &xv.data()[c * per_channel..(c + 1) * per_channel];
                    let gs = &g.data()[c * per_channel..(c + 1) * per_channel];
                    let mut sum_g = E::ZERO;
                    let mut sum_gx = E::ZERO;
                    for (&xi, &gi) in xs.iter().zip(gs) {
                        sum_g += gi;
                        sum_gx += gi * (xi - m) * istd;
                    }
                    dbeta.data_mut()[c] = sum_g;
                    dgamma.data_mut()[c] = sum_gx;
                    let dxs = &mut dx.data_mut()[c * per_channel..(c + 1) * per_channel];
                    if *train {
                        for ((d, &xi), &gi) in dxs.iter_mut().zip(xs).zip(gs) {
                            let xhat = (xi - m) * istd;
                            *d = gam * istd * (gi - sum_g / n - xhat * sum_gx / n);
                        }
                    } else {
                        for (d, &gi) in dxs.iter_mut().zip(gs) {
                            *d = gam * istd * gi;
                        }
                    }
                }
                if self.requires(*x) {
                    grads.push((*x, dx));
                }
                if self.requires(*gamma) {
                    grads.push((*gamma, dgamma));
                }
                if self.requires(*beta) {
                    grads.push((*beta, dbeta));
                }
            }
            Op::TopK { x, source } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (out_idx, &src) in source.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[out_idx];
                }
                grads.push((*x, dx));
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g.item()? * E::from_f64(2.0 / av.len() as f64);
                if self.requires(*a) {
                    grads.push((*a, av.zip_map(bv, "mse", |x, y| scale * (x - y))?));
                }
                if self.requires(*b) {
                    grads.push((*b, av.zip_map(bv, "mse", |x, y| -scale * (x - y))?));
                }
            }
            Op::L1 { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g.item()? / E::from_f64(av.len() as f64);
                let sign = |x: E, y: E| {
                    if x > y {
                        E::ONE
                    } else if x < y {
                        -E::ONE
                    } else {
                        E::ZERO
                    }
                };
                if self.requires(*a) {
                    grads.push((*a, av.zip_map(bv, "l1", |x, y| scale * sign(x, y))?));
                }
                if self.requires(*b) {
                    grads.push((*b, av.zip_map(bv, "l1", |x, y| -scale * sign(x, y))?));
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    grads.push((*a, g.clone()));
                }
                if self.requires(*b) {
                    grads.push((*b, g.clone()));
                }
            }
            Op::MulScalar { x } => {
                let c = node.scale;
                grads.push((*x, g.map(|v| v * c)));
            }
            Op::SumAll { x } => {
                let gv = g.item()?;
                grads.push((*x, Tensor::full(self.value(*x).shape(), gv)));
            }
            Op::Reshape { x } => {
                let dx = g.clone().reshaped(self.value(*x).shape().to_vec())?;
                grads.push((*x, dx));
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                grads.push((*x, g.permuted(&inverse)?));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0usize;
                for &v in inputs {
                    let a = self.value(v).shape()[*axis];
                    if self.requires(v) {
                        let mut dv = Tensor::zeros(self.value(v).shape());
                        for o in 0..outer {
                            let src_start = (o * axis_total + offset) * inner;
                            let dst_start = o * a * inner;
                            dv.data_mut()[dst_start..dst_start + a * inner]
                                .copy_from_slice(&g.data()[src_start..src_start + a * inner]);
                        }
                        grads.push((v, dv));
                    }
                    offset += a;
                }
            }
            Op::ResizeNearest2d { x } => {
                let xs = self.value(*x).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let mut dx = Tensor::zeros(xs);
                for ch in 0..c {
                    for y in 0..oh {
                        let sy = y * h / oh;
                        for xcol in 0..ow {
                            let sx = xcol * w / ow;
                            dx.data_mut()[(ch * h + sy) * w + sx] += g.data()[(ch * oh + y) * ow + xcol];
                        }
                    }
                }
                grads.push((*x, dx));
            }
            Op::RepeatRows { x } => {
                let f = self.value(*x).shape()[1];
                let mut dx = Tensor::zeros(&[1, f]);
                for row in g.data().chunks_exact(f) {
                    for (d, v) in dx.data_mut().iter_mut().zip(row) {
                        *d += *v;
                    }
                }
                grads.push((*x, dx));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<E>> = inputs.iter().map(|&v| self.value(v)).collect();
                let local = op.backward(&values, g);
                debug_assert_eq!(local.len(), inputs.len(), "{} backward arity", op.name());
                for (&v, maybe) in inputs.iter().zip(local) {
                    if let Some(dv) = maybe {
                        grads.push((v, dv));
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn lift_activation<E: Scalar>(t: &Tensor<E>) -> TensorResult<Tensor<E>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(TensorError::RankMismatch { op: "conv2d", expected: 3, shape: s.to_vec() });
    }
    t.clone().reshaped(vec![s[0], 1, s[1], s[2]])
}

fn lift_kernels<E: Scalar>(t: &Tensor<E>) -> TensorResult<Tensor<E>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(TensorError::RankMismatch { op: "conv2d", expected: 4, shape: s.to_vec() });
    }
    t.clone().reshaped(vec![s[0], s[1], 1, s[2], s[3]])
}

fn drop_depth_axis<E: Scalar>(t: Tensor<E>) -> TensorResult<Tensor<E>> {
    let s = t.shape().to_vec();
    debug_assert_eq!(s[1], 1);
    t.reshaped(vec![s[0], s[2], s[3]])
}

fn drop_kernel_depth<E: Scalar>(t: Tensor<E>) -> TensorResult<Tensor<E>> {
    let s = t.shape().to_vec();
    debug_assert_eq!(s[2], 1);
    t.reshaped(vec![s[0], s[1], s[3], s[4]])
}
