//! Network building blocks: parameters, optimizer, and layers that bind
//! themselves onto an autodiff [`Graph`] per forward pass.

use crate::graph::{BnStats, Graph, Var};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Trainable or buffered tensor with optimizer state. Buffers (running batch
/// statistics) ride along for checkpointing but are skipped by the optimizer.
#[derive(Debug, Clone)]
pub struct Parameter<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Option<Tensor<E>>,
    pub moment1: Tensor<E>,
    pub moment2: Tensor<E>,
    pub trainable: bool,
}

impl<E: Scalar> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        let moment1 = Tensor::zeros(value.shape());
        let moment2 = Tensor::zeros(value.shape());
        Self { name: name.into(), value, grad: None, moment1, moment2, trainable: true }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<E>) -> Self {
        let mut p = Self::new(name, value);
        p.trainable = false;
        p
    }

    /// Reconstructs a parameter from checkpointed state.
    pub fn from_state(name: impl Into<String>, value: Tensor<E>, moment1: Tensor<E>, moment2: Tensor<E>) -> Self {
        Self { name: name.into(), value, grad: None, moment1, moment2, trainable: true }
    }
}

/// Whether a forward pass registers parameters for gradient computation.
/// Frozen passes evaluate the same function but leave parameters out of the
/// backward graph (used for the discriminator while the generator trains).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    Trainable,
    Frozen,
}

/// Train mode uses per-call batch statistics in normalization layers and
/// updates their running buffers; eval mode is a pure function of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetMode {
    Train,
    Eval,
}

/// Per-forward context shared by all layers of a network.
#[derive(Debug, Clone, Copy)]
pub struct FwdCtx {
    pub mode: NetMode,
    pub bind: Bind,
}

impl FwdCtx {
    pub fn train() -> Self {
        Self { mode: NetMode::Train, bind: Bind::Trainable }
    }

    pub fn train_frozen() -> Self {
        Self { mode: NetMode::Train, bind: Bind::Frozen }
    }

    pub fn eval() -> Self {
        Self { mode: NetMode::Eval, bind: Bind::Frozen }
    }
}

pub fn bind_param<E: Scalar>(g: &mut Graph<E>, p: &Parameter<E>, bind: Bind) -> Var {
    match bind {
        Bind::Trainable if p.trainable => g.named_variable(p.name.clone(), p.value.clone()),
        _ => g.constant(p.value.clone()),
    }
}

/// Copies gradients accumulated in `graph` back onto the owning parameters,
/// matching by registration name. A parameter bound several times in one
/// graph (e.g. shared weights applied to two inputs) receives the sum of all
/// its bindings' gradients. Parameters absent from the graph are left
/// untouched.
pub fn harvest_grads<E: Scalar>(graph: &Graph<E>, params: Vec<&mut Parameter<E>>) {
    let mut grads: std::collections::HashMap<&str, Tensor<E>> = std::collections::HashMap::new();
    for (name, grad) in graph.named_grads() {
        if let Some(g) = grad {
            match grads.get_mut(name) {
                Some(acc) => {
                    for (dst, src) in acc.data_mut().iter_mut().zip(g.data()) {
                        *dst += *src;
                    }
                }
                None => {
                    grads.insert(name, g.clone());
                }
            }
        }
    }
    for p in params {
        if let Some(g) = grads.get(p.name.as_str()) {
            match &mut p.grad {
                Some(existing) => {
                    for (dst, src) in existing.data_mut().iter_mut().zip(g.data()) {
                        *dst += *src;
                    }
                }
                slot => *slot = Some(g.clone()),
            }
        }
    }
}

pub fn clear_grads<E: Scalar>(params: Vec<&mut Parameter<E>>) {
    for p in params {
        p.grad = None;
    }
}

/// Adam with bias correction. One `step` call advances the shared timestep
/// and updates every trainable parameter in the given order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.5, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0 }
    }

    pub fn timestep(&self) -> u32 {
        self.t
    }

    /// Restores the step counter when resuming, so bias correction picks up
    /// where the previous run stopped.
    pub fn set_timestep(&mut self, t: u32) {
        self.t = t;
    }

    /// Requires every trainable parameter to carry a gradient. Gradients are
    /// not modified or cleared.
    pub fn step<E: Scalar>(&mut self, params: Vec<&mut Parameter<E>>) -> TensorResult<()> {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (E::from_f64(self.beta1), E::from_f64(self.beta2));
        let corr1 = E::ONE - b1.powi(t);
        let corr2 = E::ONE - b2.powi(t);
        let (lr, eps) = (E::from_f64(self.lr), E::from_f64(self.eps));
        for p in params {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().ok_or_else(|| TensorError::InvalidArgument {
                op: "adam_step",
                message: format!("parameter {} has no gradient", p.name),
            })?;
            for i in 0..grad.len() {
                let g = grad.data()[i];
                let m = b1 * p.moment1.data()[i] + (E::ONE - b1) * g;
                let v = b2 * p.moment2.data()[i] + (E::ONE - b2) * g * g;
                p.moment1.data_mut()[i] = m;
                p.moment2.data_mut()[i] = v;
                let m_hat = m / corr1;
                let v_hat = v / corr2;
                p.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Per-channel mean and inverse standard deviation of `x` (channel axis 0),
/// with the variance floored by `eps`. Variance is the population estimate.
pub fn batch_stats<E: Scalar>(x: &Tensor<E>, eps: f64) -> BnStats<E> {
    let channels = x.shape()[0];
    let per_channel = x.len() / channels;
    let n = E::from_f64(per_channel as f64);
    let eps = E::from_f64(eps);
    let mut mean = Vec::with_capacity(channels);
    let mut inv_std = Vec::with_capacity(channels);
    for c in 0..channels {
        let xs = &x.data()[c * per_channel..(c + 1) * per_channel];
        let m = xs.iter().copied().sum::<E>() / n;
        let var = xs.iter().map(|&v| (v - m) * (v - m)).sum::<E>() / n;
        mean.push(m);
        inv_std.push(E::ONE / (var + eps).sqrt());
    }
    BnStats { mean, inv_std }
}

fn uniform_init<E: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Derives the per-layer init stream from a network seed and the layer name,
/// so adding a layer never shifts the draws of existing ones.
fn init_stream(seed: u64, name: &str) -> ChaCha8Rng {
    stream(seed, name, 0)
}

#[derive(Debug, Clone)]
pub struct Linear<E: Scalar> {
    pub w: Parameter<E>,
    pub b: Parameter<E>,
}

impl<E: Scalar> Linear<E> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = init_stream(seed, name);
        Self {
            w: Parameter::new(format!("{name}.w"), uniform_init(&[in_dim, out_dim], in_dim, &mut rng)),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(&[out_dim])),
        }
    }

    /// Constant initial bias; positive values keep relu stacks off the
    /// zero kink at initialization.
    pub fn with_bias(mut self, init: f64) -> Self {
        for v in self.b.value.data_mut() {
            *v = E::from_f64(init);
        }
        self
    }

    pub fn forward(&self, g: &mut Graph<E>, x: Var, ctx: FwdCtx) -> TensorResult<Var> {
        let w = bind_param(g, &self.w, ctx.bind);
        let b = bind_param(g, &self.b, ctx.bind);
        g.linear(x, w, b)
    }

    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        vec![&self.w, &self.b]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone)]
pub struct Conv3dLayer<E: Scalar> {
    pub kernels: Parameter<E>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl<E: Scalar> Conv3dLayer<E> {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        seed: u64,
    ) -> Self {
        let mut rng = init_stream(seed, name);
        let shape = [out_ch, in_ch, kernel[0], kernel[1], kernel[2]];
        let fan_in = in_ch * kernel.iter().product::<usize>();
        Self { kernels: Parameter::new(format!("{name}.k"), uniform_init(&shape, fan_in, &mut rng)), stride, pad }
    }

    pub fn forward(&self, g: &mut Graph<E>, x: Var, ctx: FwdCtx) -> TensorResult<Var> {
        let k = bind_param(g, &self.kernels, ctx.bind);
        g.conv3d(x, k, self.stride, self.pad)
    }

    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        vec![&self.kernels]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.kernels]
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer<E: Scalar> {
    pub kernels: Parameter<E>,
    pub stride: [usize; 2],
    pub pad: [usize; 2],
}

impl<E: Scalar> Conv2dLayer<E> {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
        seed: u64,
    ) -> Self {
        let mut rng = init_stream(seed, name);
        let shape = [out_ch, in_ch, kernel[0], kernel[1]];
        let fan_in = in_ch * kernel.iter().product::<usize>();
        Self { kernels: Parameter::new(format!("{name}.k"), uniform_init(&shape, fan_in, &mut rng)), stride, pad }
    }

    pub fn forward(&self, g: &mut Graph<E>, x: Var, ctx: FwdCtx) -> TensorResult<Var> {
        let k = bind_param(g, &self.kernels, ctx.bind);
        g.conv2d(x, k, self.stride, self.pad)
    }

    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        vec![&self.kernels]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.kernels]
    }
}

/// Transposed 2D convolution; kernels `[in_ch, out_ch, kh, kw]`. The optional
/// per-channel bias serves final layers that are not followed by
/// normalization.
#[derive(Debug, Clone)]
pub struct ConvTranspose2dLayer<E: Scalar> {
    pub kernels: Parameter<E>,
    pub bias: Option<Parameter<E>>,
    pub stride: [usize; 2],
    pub pad: [usize; 2],
}

impl<E: Scalar> ConvTranspose2dLayer<E> {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
        seed: u64,
    ) -> Self {
        let mut rng = init_stream(seed, name);
        let shape = [in_ch, out_ch, kernel[0], kernel[1]];
        let fan_in = in_ch * kernel.iter().product::<usize>();
        Self {
            kernels: Parameter::new(format!("{name}.k"), uniform_init(&shape, fan_in, &mut rng)),
            bias: None,
            stride,
            pad,
        }
    }

    pub fn with_bias(mut self, init: f64) -> Self {
        let out_ch = self.kernels.value.shape()[1];
        let name = self.kernels.name.trim_end_matches(".k").to_string();
        self.bias = Some(Parameter::new(format!("{name}.b"), Tensor::full(&[out_ch], E::from_f64(init))));
        self
    }

    pub fn forward(&self, g: &mut Graph<E>, x: Var, ctx: FwdCtx) -> TensorResult<Var> {
        let k = bind_param(g, &self.kernels, ctx.bind);
        let mut y = g.conv_transpose2d(x, k, self.stride, self.pad)?;
        if let Some(bias) = &self.bias {
            let b = bind_param(g, bias, ctx.bind);
            y = g.bias_channels(y, b)?;
        }
        Ok(y)
    }

    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut out = vec![&self.kernels];
        if let Some(b) = &self.bias {
            out.push(b);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut out = vec![&mut self.kernels];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }
}

/// Normalizes over every non-channel axis (axis 0 is channels). Train mode
/// uses the batch statistics of the incoming tensor and folds them into the
/// running buffers; eval mode reads the buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm<E: Scalar> {
    pub gamma: Parameter<E>,
    pub beta: Parameter<E>,
    pub running_mean: Parameter<E>,
    pub running_var: Parameter<E>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Scalar> BatchNorm<E> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], E::ONE)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Parameter::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Parameter::buffer(format!("{name}.running_var"), Tensor::full(&[channels], E::ONE)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, g: &mut Graph<E>, x: Var, ctx: FwdCtx) -> TensorResult<Var> {
        let channels = self.gamma.value.len();
        let xv = g.value(x);
        if xv.is_empty() {
            return Err(TensorError::Empty { op: "batch_norm" });
        }
        if xv.shape().first() != Some(&channels) {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: xv.shape().to_vec(),
                rhs: vec![channels],
            });
        }
        let stats = match ctx.mode {
            NetMode::Train => {
                let per_channel = xv.len() / channels;
                let n = E::from_f64(per_channel as f64);
                let mut mean = Vec::with_capacity(channels);
                let mut inv_std = Vec::with_capacity(channels);
                let eps = E::from_f64(self.eps);
                let momentum = E::from_f64(self.momentum);
                for c in 0..channels {
                    let xs = &xv.data()[c * per_channel..(c + 1) * per_channel];
                    let m = xs.iter().copied().sum::<E>() / n;
                    let var = xs.iter().map(|&v| (v - m) * (v - m)).sum::<E>() / n;
                    mean.push(m);
                    inv_std.push(E::ONE / (var + eps).sqrt());
                    // Running variance follows the sample (unbiased) estimate
                    // when possible, matching common framework behaviour.
                    let running_var_update = if per_channel > 1 {
                        var * n / (n - E::ONE)
                    } else {
                        var
                    };
                    let rm = &mut self.running_mean.value.data_mut()[c];
                    *rm = (E::ONE - momentum) * *rm + momentum * m;
                    let rv = &mut self.running_var.value.data_mut()[c];
                    *rv = (E::ONE - momentum) * *rv + momentum * running_var_update;
                }
                BnStats { mean, inv_std }
            }
            NetMode::Eval => {
                let eps = E::from_f64(self.eps);
                BnStats {
                    mean: self.running_mean.value.data().to_vec(),
                    inv_std: self.running_var.value.data().iter().map(|&v| E::ONE / (v + eps).sqrt()).collect(),
                }
            }
        };
        let gamma = bind_param(g, &self.gamma, ctx.bind);
        let beta = bind_param(g, &self.beta, ctx.bind);
        g.batch_norm(x, gamma, beta, stats, matches!(ctx.mode, NetMode::Train))
    }

    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}
