//! Minimal differentiable layer toolkit: dense, conv2d, transposed conv2d,
//! batchnorm2d and pointwise activations, each with an explicit backward
//! pass, plus an Adam optimizer. The two GAN networks are the only graphs,
//! so a network is just an ordered layer stack.

mod checkpoint;
mod gradcheck;
pub mod layers;

pub use checkpoint::{
    arch_to_network, load_network, load_network_with_config, network_arch, read_tensor_list,
    read_weights, save_network, write_tensor_list, write_weights, ArchFile, ArchLayer, WEIGHT_MAGIC,
};
pub use gradcheck::{gradient_check, standard_check_specs, GradCheckEntry, GradCheckReport};

use crate::tensor::{matmul, matmul_nt, matmul_tn_acc};
use crate::{Error, Result, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use layers::*;

/// Forward-pass mode; batchnorm uses batch statistics only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Layer description. Shapes are per-sample; all ops take a leading batch dim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    #[serde(rename = "conv_t2d")]
    ConvT2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    #[serde(rename = "batchnorm2d")]
    BatchNorm2d {
        channels: usize,
        epsilon: f64,
        momentum: f64,
    },
    LeakyRelu {
        slope: f32,
    },
    Relu,
    Tanh,
    Sigmoid,
    /// Parameter-free view change of the per-sample shape.
    Reshape {
        shape: Vec<usize>,
    },
    /// Rescales the first `dim` features of each sample to L2 norm √dim,
    /// leaving the rest (e.g. appended one-hot labels) untouched. Makes a
    /// generator invariant to the latent vector's magnitude.
    #[serde(rename = "latent_norm")]
    LatentNorm {
        dim: usize,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d { kernel, stride, .. } | LayerSpec::ConvT2d { kernel, stride, .. } => {
                if *kernel < 1 || *stride < 1 {
                    return Err(Error::config(
                        "layer",
                        format!("kernel and stride must be >= 1, got k={kernel} s={stride}"),
                    ));
                }
            }
            LayerSpec::BatchNorm2d { epsilon, .. } => {
                if *epsilon <= 0.0 {
                    return Err(Error::config("layer", format!("epsilon must be > 0, got {epsilon}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ConvT2d { .. } => "conv_t2d",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Relu => "relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::LatentNorm { .. } => "latent_norm",
        }
    }
}

/// Weights, non-trainable buffers, and Adam moments for one layer.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub name: String,
    pub weights: Vec<Tensor>,
    /// Non-trainable state (batchnorm running mean/var).
    pub buffers: Vec<Tensor>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub step: u64,
}

impl LayerState {
    fn new(name: String, weights: Vec<Tensor>, buffers: Vec<Tensor>) -> LayerState {
        let adam_m = weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
        let adam_v = weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
        LayerState {
            name,
            weights,
            buffers,
            adam_m,
            adam_v,
            step: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub state: LayerState,
}

/// Intermediate values one layer needs for its backward pass.
#[derive(Debug)]
pub enum Cache {
    Dense {
        input: Tensor,
    },
    Conv {
        input: Tensor,
    },
    ConvT {
        input: Tensor,
    },
    BatchNorm {
        /// Normalized activations x̂.
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    /// Backward through an eval-mode batchnorm has no batch statistics.
    BatchNormEval,
    LeakyRelu {
        input: Tensor,
    },
    Relu {
        input: Tensor,
    },
    Tanh {
        output: Tensor,
    },
    Sigmoid {
        output: Tensor,
    },
    Reshape {
        input_shape: Vec<usize>,
    },
    LatentNorm {
        input: Tensor,
        /// Per-sample L2 norm of the latent block (after flooring).
        norms: Vec<f64>,
    },
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamParams {
    pub fn with_lr(lr: f32) -> AdamParams {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// An ordered layer stack with weights and optimizer state.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Network {
        Network { layers }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.state.weights.iter().map(|w| w.len()).sum::<usize>())
            .sum()
    }

    /// Runs the stack, returning the output and per-layer caches.
    pub fn forward(&mut self, input: Tensor, mode: Mode) -> Result<(Tensor, Vec<Cache>)> {
        let mut x = input;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter_mut() {
            let (y, cache) = layer_forward(&layer.spec, &mut layer.state, x, mode)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Eval-mode forward without caches; does not touch any state, so it is
    /// safe to call concurrently.
    pub fn eval(&self, input: Tensor) -> Result<Tensor> {
        let mut x = input;
        for layer in self.layers.iter() {
            x = layer_forward_eval(&layer.spec, &layer.state, x)?;
        }
        Ok(x)
    }

    /// Backpropagates `upstream` through the cached forward pass. Returns the
    /// input gradient and per-layer parameter gradients (aligned with
    /// `layers` and each layer's `weights`).
    pub fn backward(&self, caches: &[Cache], upstream: Tensor) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
        if caches.len() != self.layers.len() {
            return Err(Error::shape(
                "Network::backward",
                format!("{} caches", self.layers.len()),
                format!("{} caches", caches.len()),
            ));
        }
        let mut grad = upstream;
        let mut param_grads: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let (g, pg) = layer_backward(&layer.spec, &layer.state, &caches[idx], grad)?;
            param_grads[idx] = pg;
            grad = g;
        }
        Ok((grad, param_grads))
    }

    /// Accumulates `other` parameter gradients into `acc` (same structure).
    pub fn add_grads(acc: &mut [Vec<Tensor>], other: &[Vec<Tensor>]) {
        for (a_layer, o_layer) in acc.iter_mut().zip(other.iter()) {
            for (a, o) in a_layer.iter_mut().zip(o_layer.iter()) {
                for (av, ov) in a.data_mut().iter_mut().zip(o.data().iter()) {
                    *av += ov;
                }
            }
        }
    }

    /// Scales every gradient tensor in place.
    pub fn scale_grads(grads: &mut [Vec<Tensor>], s: f32) {
        for layer in grads.iter_mut() {
            for g in layer.iter_mut() {
                for v in g.data_mut().iter_mut() {
                    *v *= s;
                }
            }
        }
    }

    /// One bias-corrected Adam update over all layers.
    pub fn adam_step(&mut self, grads: &[Vec<Tensor>], params: AdamParams) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} layers", self.layers.len()),
                format!("{} grad groups", grads.len()),
            ));
        }
        for (layer, layer_grads) in self.layers.iter_mut().zip(grads.iter()) {
            if layer.state.weights.is_empty() {
                continue;
            }
            for g in layer_grads.iter() {
                if !g.all_finite() {
                    return Err(Error::numeric(
                        format!("adam_step({})", layer.state.name),
                        "non-finite gradient",
                    ));
                }
            }
            layer.state.step += 1;
            let t = layer.state.step as i32;
            let b1c = 1.0 - params.beta1.powi(t);
            let b2c = 1.0 - params.beta2.powi(t);
            for ((w, g), (m, v)) in layer
                .state
                .weights
                .iter_mut()
                .zip(layer_grads.iter())
                .zip(layer.state.adam_m.iter_mut().zip(layer.state.adam_v.iter_mut()))
            {
                let wd = w.data_mut();
                let gd = g.data();
                let md = m.data_mut();
                let vd = v.data_mut();
                for i in 0..wd.len() {
                    md[i] = params.beta1 * md[i] + (1.0 - params.beta1) * gd[i];
                    vd[i] = params.beta2 * vd[i] + (1.0 - params.beta2) * gd[i] * gd[i];
                    let m_hat = md[i] / b1c;
                    let v_hat = vd[i] / b2c;
                    wd[i] -= params.lr * m_hat / (v_hat.sqrt() + params.eps);
                }
            }
        }
        Ok(())
    }

    /// EMA update of this network toward `student`: w ← τ·w + (1−τ)·w_s,
    /// applied to every weight and buffer.
    pub fn ema_from(&mut self, student: &Network, tau: f32) -> Result<()> {
        if self.layers.len() != student.layers.len() {
            return Err(Error::shape(
                "ema_from",
                format!("{} layers", self.layers.len()),
                format!("{} layers", student.layers.len()),
            ));
        }
        for (t_layer, s_layer) in self.layers.iter_mut().zip(student.layers.iter()) {
            let pairs = t_layer
                .state
                .weights
                .iter_mut()
                .chain(t_layer.state.buffers.iter_mut())
                .zip(s_layer.state.weights.iter().chain(s_layer.state.buffers.iter()));
            for (tw, sw) in pairs {
                if tw.shape() != sw.shape() {
                    return Err(Error::shape(
                        format!("ema_from({})", t_layer.state.name),
                        format!("{:?}", tw.shape()),
                        format!("{:?}", sw.shape()),
                    ));
                }
                for (tv, sv) in tw.data_mut().iter_mut().zip(sw.data().iter()) {
                    *tv = tau * *tv + (1.0 - tau) * sv;
                }
            }
        }
        Ok(())
    }

    /// Flat copy of all weights and buffers, in layer order.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for t in layer.state.weights.iter().chain(layer.state.buffers.iter()) {
                out.extend_from_slice(t.data());
            }
        }
        out
    }
}

/// Builds a freshly initialized layer. Conv/dense weights are N(0, 0.02)
/// (DCGAN convention), biases zero, batchnorm scale 1 / shift 0.
pub fn init_layer(spec: LayerSpec, name: &str, rng: &mut impl rand::Rng) -> Result<Layer> {
    use rand_distr::{Distribution, Normal};
    spec.validate()?;
    let normal = Normal::new(0.0f32, 0.02).expect("valid stddev");
    let mut sample = |shape: &[usize]| -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::from_vec(shape, data).expect("shape matches data")
    };
    let (weights, buffers) = match &spec {
        LayerSpec::Dense { in_dim, out_dim } => (
            vec![sample(&[*out_dim, *in_dim]), Tensor::zeros(&[*out_dim])],
            vec![],
        ),
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            bias,
            ..
        } => {
            let mut w = vec![sample(&[*out_ch, in_ch * kernel * kernel])];
            if *bias {
                w.push(Tensor::zeros(&[*out_ch]));
            }
            (w, vec![])
        }
        LayerSpec::ConvT2d {
            in_ch,
            out_ch,
            kernel,
            bias,
            ..
        } => {
            let mut w = vec![sample(&[*in_ch, out_ch * kernel * kernel])];
            if *bias {
                w.push(Tensor::zeros(&[*out_ch]));
            }
            (w, vec![])
        }
        LayerSpec::BatchNorm2d { channels, .. } => (
            vec![Tensor::filled(&[*channels], 1.0), Tensor::zeros(&[*channels])],
            vec![Tensor::zeros(&[*channels]), Tensor::filled(&[*channels], 1.0)],
        ),
        _ => (vec![], vec![]),
    };
    Ok(Layer {
        spec,
        state: LayerState::new(name.to_string(), weights, buffers),
    })
}

fn shape_err(layer: &LayerState, spec: &LayerSpec, expected: String, got: &[usize]) -> Error {
    Error::shape(
        format!("{} ({})", layer.name, spec.kind_name()),
        expected,
        format!("{got:?}"),
    )
}

/// Single-layer forward. Train mode updates batchnorm running stats.
pub fn layer_forward(
    spec: &LayerSpec,
    state: &mut LayerState,
    input: Tensor,
    mode: Mode,
) -> Result<(Tensor, Cache)> {
    match spec {
        LayerSpec::Dense { in_dim, out_dim } => {
            if input.shape().len() != 2 || input.shape()[1] != *in_dim {
                return Err(shape_err(state, spec, format!("[N, {in_dim}]"), input.shape()));
            }
            let n = input.shape()[0];
            let w = &state.weights[0];
            let b = &state.weights[1];
            let mut out = Tensor::zeros(&[n, *out_dim]);
            matmul_nt(input.data(), w.data(), n, *in_dim, *out_dim, out.data_mut());
            for row in 0..n {
                let o = &mut out.data_mut()[row * out_dim..(row + 1) * out_dim];
                for (ov, bv) in o.iter_mut().zip(b.data().iter()) {
                    *ov += bv;
                }
            }
            Ok((out, Cache::Dense { input }))
        }
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            bias,
        } => {
            let s = input.shape().to_vec();
            if s.len() != 4 || s[1] != *in_ch {
                return Err(shape_err(state, spec, format!("[N, {in_ch}, H, W]"), &s));
            }
            let (n, h, w) = (s[0], s[2], s[3]);
            if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                return Err(shape_err(
                    state,
                    spec,
                    format!("spatial dims >= kernel {kernel} (pad {pad})"),
                    &s,
                ));
            }
            let oh = conv_out_size(h, *kernel, *stride, *pad);
            let ow = conv_out_size(w, *kernel, *stride, *pad);
            let mut out = Tensor::zeros(&[n, *out_ch, oh, ow]);
            let weight = state.weights[0].data();
            let bias_v = if *bias { Some(state.weights[1].data()) } else { None };
            let in_sz = in_ch * h * w;
            let out_sz = out_ch * oh * ow;
            let in_data = input.data();
            out.data_mut()
                .par_chunks_mut(out_sz)
                .enumerate()
                .for_each(|(ni, out_chunk)| {
                    let mut cols = Vec::new();
                    conv2d_sample(
                        &in_data[ni * in_sz..(ni + 1) * in_sz],
                        weight,
                        bias_v,
                        *in_ch,
                        h,
                        w,
                        *out_ch,
                        *kernel,
                        *stride,
                        *pad,
                        &mut cols,
                        out_chunk,
                    );
                });
            Ok((out, Cache::Conv { input }))
        }
        LayerSpec::ConvT2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            bias,
        } => {
            let s = input.shape().to_vec();
            if s.len() != 4 || s[1] != *in_ch {
                return Err(shape_err(state, spec, format!("[N, {in_ch}, H, W]"), &s));
            }
            let (n, h, w) = (s[0], s[2], s[3]);
            let oh = convt_out_size(h, *kernel, *stride, *pad);
            let ow = convt_out_size(w, *kernel, *stride, *pad);
            let mut out = Tensor::zeros(&[n, *out_ch, oh, ow]);
            let weight = state.weights[0].data();
            let bias_v = if *bias { Some(state.weights[1].data()) } else { None };
            let in_sz = in_ch * h * w;
            let out_sz = out_ch * oh * ow;
            let in_data = input.data();
            out.data_mut()
                .par_chunks_mut(out_sz)
                .enumerate()
                .for_each(|(ni, out_chunk)| {
                    let mut cols = Vec::new();
                    convt2d_sample(
                        &in_data[ni * in_sz..(ni + 1) * in_sz],
                        weight,
                        bias_v,
                        *in_ch,
                        h,
                        w,
                        *out_ch,
                        *kernel,
                        *stride,
                        *pad,
                        &mut cols,
                        out_chunk,
                    );
                });
            Ok((out, Cache::ConvT { input }))
        }
        LayerSpec::BatchNorm2d { channels, epsilon, momentum } => {
            let s = input.shape().to_vec();
            if s.len() != 4 || s[1] != *channels {
                return Err(shape_err(state, spec, format!("[N, {channels}, H, W]"), &s));
            }
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let plane = h * w;
            let gamma = state.weights[0].data().to_vec();
            let beta = state.weights[1].data().to_vec();
            match mode {
                Mode::Train => {
                    let stats = bn_batch_stats(&input, c);
                    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                    let mut normalized = Tensor::zeros(&s);
                    {
                        let nd = normalized.data_mut();
                        let xd = input.data();
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                let mu = stats.mean[ci];
                                let is = inv_std[ci];
                                for i in base..base + plane {
                                    nd[i] = ((xd[i] as f64 - mu) * is) as f32;
                                }
                            }
                        }
                    }
                    let mut out = Tensor::zeros(&s);
                    {
                        let od = out.data_mut();
                        let nd = normalized.data();
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                let (g, b) = (gamma[ci], beta[ci]);
                                for i in base..base + plane {
                                    od[i] = g * nd[i] + b;
                                }
                            }
                        }
                    }
                    // running = (1 - momentum)·running + momentum·batch
                    let m = *momentum;
                    for ci in 0..c {
                        let rm = &mut state.buffers[0].data_mut()[ci];
                        *rm = ((1.0 - m) * *rm as f64 + m * stats.mean[ci]) as f32;
                        let rv = &mut state.buffers[1].data_mut()[ci];
                        *rv = ((1.0 - m) * *rv as f64 + m * stats.var[ci]) as f32;
                    }
                    Ok((out, Cache::BatchNorm { normalized, inv_std }))
                }
                Mode::Eval => {
                    let rm = state.buffers[0].data().to_vec();
                    let rv = state.buffers[1].data().to_vec();
                    let mut out = Tensor::zeros(&s);
                    {
                        let od = out.data_mut();
                        let xd = input.data();
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                let inv = 1.0 / ((rv[ci] as f64 + epsilon).sqrt());
                                let (g, b) = (gamma[ci], beta[ci]);
                                let mu = rm[ci] as f64;
                                for i in base..base + plane {
                                    od[i] = (g as f64 * ((xd[i] as f64 - mu) * inv) + b as f64) as f32;
                                }
                            }
                        }
                    }
                    Ok((out, Cache::BatchNormEval))
                }
            }
        }
        LayerSpec::LeakyRelu { slope } => {
            let s = *slope;
            let out = input.map(|x| if x >= 0.0 { x } else { s * x });
            Ok((out, Cache::LeakyRelu { input }))
        }
        LayerSpec::Relu => {
            let out = input.map(|x| x.max(0.0));
            Ok((out, Cache::Relu { input }))
        }
        LayerSpec::Tanh => {
            let out = input.map(f32::tanh);
            let cached = out.clone();
            Ok((out, Cache::Tanh { output: cached }))
        }
        LayerSpec::Sigmoid => {
            let out = input.map(|x| 1.0 / (1.0 + (-x).exp()));
            let cached = out.clone();
            Ok((out, Cache::Sigmoid { output: cached }))
        }
        LayerSpec::Reshape { shape } => {
            let n = input.shape()[0];
            let per_sample: usize = shape.iter().product();
            if input.len() != n * per_sample {
                return Err(shape_err(
                    state,
                    spec,
                    format!("{} elements per sample", per_sample),
                    input.shape(),
                ));
            }
            let input_shape = input.shape().to_vec();
            let mut target = vec![n];
            target.extend_from_slice(shape);
            let out = input.reshape(&target)?;
            Ok((out, Cache::Reshape { input_shape }))
        }
        LayerSpec::LatentNorm { dim } => {
            let s = input.shape().to_vec();
            if s.len() != 2 || s[1] < *dim {
                return Err(shape_err(state, spec, format!("[N, >= {dim}]"), &s));
            }
            let (n, width) = (s[0], s[1]);
            let target = (*dim as f64).sqrt();
            let mut out = input.clone();
            let mut norms = Vec::with_capacity(n);
            {
                let od = out.data_mut();
                for ni in 0..n {
                    let row = &mut od[ni * width..ni * width + dim];
                    let norm = row
                        .iter()
                        .map(|&v| v as f64 * v as f64)
                        .sum::<f64>()
                        .sqrt()
                        .max(1e-12);
                    let scale = (target / norm) as f32;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                    norms.push(norm);
                }
            }
            Ok((out, Cache::LatentNorm { input, norms }))
        }
    }
}

/// Eval forward that never mutates state (no cache).
pub fn layer_forward_eval(spec: &LayerSpec, state: &LayerState, input: Tensor) -> Result<Tensor> {
    // Batchnorm is the only layer whose train forward mutates state; clone its
    // (tiny) state so eval stays immutable and thread-safe.
    match spec {
        LayerSpec::BatchNorm2d { .. } => {
            let mut tmp = state.clone();
            let (out, _) = layer_forward(spec, &mut tmp, input, Mode::Eval)?;
            Ok(out)
        }
        _ => {
            let mut tmp = LayerState {
                name: state.name.clone(),
                weights: state.weights.clone(),
                buffers: Vec::new(),
                adam_m: Vec::new(),
                adam_v: Vec::new(),
                step: 0,
            };
            let (out, _) = layer_forward(spec, &mut tmp, input, Mode::Eval)?;
            Ok(out)
        }
    }
}

/// Single-layer backward. Returns (input gradient, parameter gradients).
pub fn layer_backward(
    spec: &LayerSpec,
    state: &LayerState,
    cache: &Cache,
    upstream: Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    match (spec, cache) {
        (LayerSpec::Dense { in_dim, out_dim }, Cache::Dense { input }) => {
            let n = input.shape()[0];
            if upstream.shape() != [n, *out_dim] {
                return Err(shape_err(state, spec, format!("[{n}, {out_dim}]"), upstream.shape()));
            }
            let w = &state.weights[0];
            // dx = dy · W
            let mut dx = Tensor::zeros(&[n, *in_dim]);
            matmul(upstream.data(), w.data(), n, *out_dim, *in_dim, dx.data_mut());
            // dW = dyᵀ · x
            let mut dw = Tensor::zeros(&[*out_dim, *in_dim]);
            matmul_tn_acc(upstream.data(), input.data(), *out_dim, n, *in_dim, dw.data_mut());
            // db = column sums of dy
            let mut db = Tensor::zeros(&[*out_dim]);
            for row in 0..n {
                for (bi, b) in db.data_mut().iter_mut().enumerate() {
                    *b += upstream.data()[row * out_dim + bi];
                }
            }
            Ok((dx, vec![dw, db]))
        }
        (
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                bias,
            },
            Cache::Conv { input },
        ) => {
            let s = input.shape().to_vec();
            let (n, h, w) = (s[0], s[2], s[3]);
            let oh = conv_out_size(h, *kernel, *stride, *pad);
            let ow = conv_out_size(w, *kernel, *stride, *pad);
            if upstream.shape() != [n, *out_ch, oh, ow] {
                return Err(shape_err(
                    state,
                    spec,
                    format!("[{n}, {out_ch}, {oh}, {ow}]"),
                    upstream.shape(),
                ));
            }
            let ckk = in_ch * kernel * kernel;
            let in_sz = in_ch * h * w;
            let out_sz = out_ch * oh * ow;
            let weight = state.weights[0].data();
            let mut dx = Tensor::zeros(&s);
            let in_data = input.data();
            let up_data = upstream.data();

            // Per-sample partials reduced in index order to stay deterministic.
            let partials: Vec<(Vec<f32>, Vec<f32>)> = dx
                .data_mut()
                .par_chunks_mut(in_sz)
                .enumerate()
                .map(|(ni, dx_chunk)| {
                    let mut cols = Vec::new();
                    let mut dcols = Vec::new();
                    let mut dw = vec![0.0f32; out_ch * ckk];
                    let mut db = vec![0.0f32; if *bias { *out_ch } else { 0 }];
                    conv2d_backward_sample(
                        &in_data[ni * in_sz..(ni + 1) * in_sz],
                        &up_data[ni * out_sz..(ni + 1) * out_sz],
                        weight,
                        *in_ch,
                        h,
                        w,
                        *out_ch,
                        *kernel,
                        *stride,
                        *pad,
                        &mut cols,
                        &mut dcols,
                        &mut dw,
                        if *bias { Some(&mut db) } else { None },
                        dx_chunk,
                    );
                    (dw, db)
                })
                .collect();
            let mut dw = Tensor::zeros(state.weights[0].shape());
            let mut db = Tensor::zeros(&[*out_ch]);
            for (pdw, pdb) in &partials {
                for (a, b) in dw.data_mut().iter_mut().zip(pdw.iter()) {
                    *a += b;
                }
                for (a, b) in db.data_mut().iter_mut().zip(pdb.iter()) {
                    *a += b;
                }
            }
            let mut grads = vec![dw];
            if *bias {
                grads.push(db);
            }
            Ok((dx, grads))
        }
        (
            LayerSpec::ConvT2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                bias,
            },
            Cache::ConvT { input },
        ) => {
            let s = input.shape().to_vec();
            let (n, h, w) = (s[0], s[2], s[3]);
            let oh = convt_out_size(h, *kernel, *stride, *pad);
            let ow = convt_out_size(w, *kernel, *stride, *pad);
            if upstream.shape() != [n, *out_ch, oh, ow] {
                return Err(shape_err(
                    state,
                    spec,
                    format!("[{n}, {out_ch}, {oh}, {ow}]"),
                    upstream.shape(),
                ));
            }
            let okk = out_ch * kernel * kernel;
            let in_sz = in_ch * h * w;
            let out_sz = out_ch * oh * ow;
            let weight = state.weights[0].data();
            let mut dx = Tensor::zeros(&s);
            let in_data = input.data();
            let up_data = upstream.data();
            let partials: Vec<(Vec<f32>, Vec<f32>)> = dx
                .data_mut()
                .par_chunks_mut(in_sz)
                .enumerate()
                .map(|(ni, dx_chunk)| {
                    let mut dcols = Vec::new();
                    let mut dw = vec![0.0f32; in_ch * okk];
                    let mut db = vec![0.0f32; if *bias { *out_ch } else { 0 }];
                    convt2d_backward_sample(
                        &in_data[ni * in_sz..(ni + 1) * in_sz],
                        &up_data[ni * out_sz..(ni + 1) * out_sz],
                        weight,
                        *in_ch,
                        h,
                        w,
                        *out_ch,
                        *kernel,
                        *stride,
                        *pad,
                        &mut dcols,
                        &mut dw,
                        if *bias { Some(&mut db) } else { None },
                        dx_chunk,
                    );
                    (dw, db)
                })
                .collect();
            let mut dw = Tensor::zeros(state.weights[0].shape());
            let mut db = Tensor::zeros(&[*out_ch]);
            for (pdw, pdb) in &partials {
                for (a, b) in dw.data_mut().iter_mut().zip(pdw.iter()) {
                    *a += b;
                }
                for (a, b) in db.data_mut().iter_mut().zip(pdb.iter()) {
                    *a += b;
                }
            }
            let mut grads = vec![dw];
            if *bias {
                grads.push(db);
            }
            Ok((dx, grads))
        }
        (LayerSpec::BatchNorm2d { channels, .. }, Cache::BatchNorm { normalized, inv_std }) => {
            let s = normalized.shape().to_vec();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            if upstream.shape() != s.as_slice() {
                return Err(shape_err(state, spec, format!("{s:?}"), upstream.shape()));
            }
            debug_assert_eq!(c, *channels);
            let plane = h * w;
            let count = (n * plane) as f64;
            let gamma = state.weights[0].data();
            let nd = normalized.data();
            let ud = upstream.data();
            // Channel sums in f64.
            let mut sum_dy = vec![0.0f64; c];
            let mut sum_dy_xhat = vec![0.0f64; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let mut a = 0.0f64;
                    let mut b = 0.0f64;
                    for i in base..base + plane {
                        a += ud[i] as f64;
                        b += ud[i] as f64 * nd[i] as f64;
                    }
                    sum_dy[ci] += a;
                    sum_dy_xhat[ci] += b;
                }
            }
            let mut dx = Tensor::zeros(&s);
            {
                let dxd = dx.data_mut();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let g = gamma[ci] as f64;
                        let is = inv_std[ci];
                        let sd = sum_dy[ci];
                        let sdx = sum_dy_xhat[ci];
                        for i in base..base + plane {
                            let t = count * ud[i] as f64 - sd - nd[i] as f64 * sdx;
                            dxd[i] = (g * is / count * t) as f32;
                        }
                    }
                }
            }
            let mut dgamma = Tensor::zeros(&[c]);
            let mut dbeta = Tensor::zeros(&[c]);
            for ci in 0..c {
                dgamma.data_mut()[ci] = sum_dy_xhat[ci] as f32;
                dbeta.data_mut()[ci] = sum_dy[ci] as f32;
            }
            Ok((dx, vec![dgamma, dbeta]))
        }
        (LayerSpec::BatchNorm2d { .. }, Cache::BatchNormEval) => Err(Error::numeric(
            format!("{} (batchnorm2d)", state.name),
            "backward through an eval-mode cache: batch statistics unavailable",
        )),
        (LayerSpec::LeakyRelu { slope }, Cache::LeakyRelu { input }) => {
            let s = *slope;
            let mut dx = upstream;
            for (g, &x) in dx.data_mut().iter_mut().zip(input.data().iter()) {
                if x < 0.0 {
                    *g *= s;
                }
            }
            Ok((dx, vec![]))
        }
        (LayerSpec::Relu, Cache::Relu { input }) => {
            let mut dx = upstream;
            for (g, &x) in dx.data_mut().iter_mut().zip(input.data().iter()) {
                if x < 0.0 {
                    *g = 0.0;
                }
            }
            Ok((dx, vec![]))
        }
        (LayerSpec::Tanh, Cache::Tanh { output }) => {
            let mut dx = upstream;
            for (g, &y) in dx.data_mut().iter_mut().zip(output.data().iter()) {
                *g *= 1.0 - y * y;
            }
            Ok((dx, vec![]))
        }
        (LayerSpec::Sigmoid, Cache::Sigmoid { output }) => {
            let mut dx = upstream;
            for (g, &y) in dx.data_mut().iter_mut().zip(output.data().iter()) {
                *g *= y * (1.0 - y);
            }
            Ok((dx, vec![]))
        }
        (LayerSpec::Reshape { .. }, Cache::Reshape { input_shape }) => {
            let dx = upstream.reshape(input_shape)?;
            Ok((dx, vec![]))
        }
        (LayerSpec::LatentNorm { dim }, Cache::LatentNorm { input, norms }) => {
            // y = √d · z / ‖z‖ ⇒ dz = √d/‖z‖ · (g − z·(z·g)/‖z‖²)
            let s = input.shape().to_vec();
            let (n, width) = (s[0], s[1]);
            let target = (*dim as f64).sqrt();
            let mut dx = upstream;
            {
                let dxd = dx.data_mut();
                let xd = input.data();
                for ni in 0..n {
                    let z = &xd[ni * width..ni * width + dim];
                    let g = &mut dxd[ni * width..ni * width + dim];
                    let norm = norms[ni];
                    let dot: f64 = z.iter().zip(g.iter()).map(|(&zv, &gv)| zv as f64 * gv as f64).sum();
                    let scale = target / norm;
                    let proj = dot / (norm * norm);
                    for (gv, &zv) in g.iter_mut().zip(z.iter()) {
                        *gv = (scale * (*gv as f64 - zv as f64 * proj)) as f32;
                    }
                }
            }
            Ok((dx, vec![]))
        }
        _ => Err(Error::numeric(
            format!("{} ({})", state.name, spec.kind_name()),
            "cache does not match layer kind",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn dense_identity(dim: usize) -> Layer {
        let mut rng = StdRng::seed_from_u64(0);
        let mut layer = init_layer(
            LayerSpec::Dense {
                in_dim: dim,
                out_dim: dim,
            },
            "id",
            &mut rng,
        )
        .unwrap();
        let w = layer.state.weights[0].data_mut();
        w.fill(0.0);
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        layer.state.weights[1].data_mut().fill(0.0);
        layer
    }

    #[test]
    fn dense_identity_passthrough() {
        let mut layer = dense_identity(3);
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (y, _) = layer_forward(&layer.spec, &mut layer.state, x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_all_ones_3x3_gives_nine() {
        let mut rng = StdRng::seed_from_u64(0);
        let mut layer = init_layer(
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 1,
                kernel: 3,
                stride: 1,
                pad: 0,
                bias: false,
            },
            "c",
            &mut rng,
        )
        .unwrap();
        layer.state.weights[0].data_mut().fill(1.0);
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let (y, _) = layer_forward(&layer.spec, &mut layer.state, x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert!((y.data()[0] - 9.0).abs() < 1e-6);
    }

    #[test]
    fn tanh_zero_is_zero_and_unit_derivative() {
        let mut layer = init_layer(LayerSpec::Tanh, "t", &mut StdRng::seed_from_u64(0)).unwrap();
        let x = Tensor::zeros(&[2, 3]);
        let (y, cache) = layer_forward(&layer.spec, &mut layer.state, x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let upstream = Tensor::from_vec(&[2, 3], vec![0.5; 6]).unwrap();
        let (dx, _) = layer_backward(&layer.spec, &layer.state, &cache, upstream).unwrap();
        assert!(dx.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn dense_input_grad_is_w_transpose_times_upstream() {
        // y = W x with W = [[1,2],[3,4]]; upstream u → dx = Wᵀ u.
        let mut rng = StdRng::seed_from_u64(0);
        let mut layer = init_layer(
            LayerSpec::Dense { in_dim: 2, out_dim: 2 },
            "d",
            &mut rng,
        )
        .unwrap();
        layer.state.weights[0] = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        layer.state.weights[1].data_mut().fill(0.0);
        let x = Tensor::from_vec(&[1, 2], vec![0.3, -0.7]).unwrap();
        let (_, cache) = layer_forward(&layer.spec, &mut layer.state, x, Mode::Train).unwrap();
        let u = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
        let (dx, _) = layer_backward(&layer.spec, &layer.state, &cache, u).unwrap();
        // Wᵀ·[1,-1] = [1·1+3·(−1), 2·1+4·(−1)] = [−2, −2]
        assert!((dx.data()[0] + 2.0).abs() < 1e-6);
        assert!((dx.data()[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut layer = init_layer(
            LayerSpec::BatchNorm2d {
                channels: 2,
                epsilon: 1e-5,
                momentum: 0.1,
            },
            "bn",
            &mut rng,
        )
        .unwrap();
        let n = 8;
        let data: Vec<f32> = (0..n * 2 * 4 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(&[n, 2, 4, 4], data).unwrap();
        let (y, _) = layer_forward(&layer.spec, &mut layer.state, x, Mode::Train).unwrap();
        // per-channel mean ~0, var ~1
        for ci in 0..2 {
            let mut vals = Vec::new();
            for ni in 0..n {
                let base = (ni * 2 + ci) * 16;
                vals.extend_from_slice(&y.data()[base..base + 16]);
            }
            let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batchnorm_eval_cache_rejects_backward() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut layer = init_layer(
            LayerSpec::BatchNorm2d {
                channels: 1,
                epsilon: 1e-5,
                momentum: 0.1,
            },
            "bn",
            &mut rng,
        )
        .unwrap();
        let x = Tensor::filled(&[2, 1, 2, 2], 0.5);
        let (_, cache) = layer_forward(&layer.spec, &mut layer.state, x, Mode::Eval).unwrap();
        let err = layer_backward(&layer.spec, &layer.state, &cache, Tensor::zeros(&[2, 1, 2, 2]));
        assert!(err.is_err());
        let msg = format!("{}", err.unwrap_err());
        assert!(msg.contains("eval-mode"), "unexpected message: {msg}");
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = StdRng::seed_from_u64(0);
        let mut layer = init_layer(
            LayerSpec::Dense { in_dim: 4, out_dim: 2 },
            "g.project",
            &mut rng,
        )
        .unwrap();
        let x = Tensor::zeros(&[1, 5]);
        let err = layer_forward(&layer.spec, &mut layer.state, x, Mode::Train).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("g.project"), "message should name the layer: {msg}");
        assert!(msg.contains('4'), "message should name dims: {msg}");
    }

    #[test]
    fn adam_zero_grad_keeps_weights() {
        let mut rng = StdRng::seed_from_u64(1);
        let layer = init_layer(LayerSpec::Dense { in_dim: 3, out_dim: 2 }, "d", &mut rng).unwrap();
        let mut net = Network::new(vec![layer]);
        let before = net.flat_params();
        let grads = vec![vec![Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])]];
        net.adam_step(&grads, AdamParams::with_lr(0.1)).unwrap();
        assert_eq!(before, net.flat_params());
    }

    #[test]
    fn adam_first_step_closed_form() {
        // scalar w=0, g=1, lr=0.1: bias-corrected m̂=1, v̂=1 → w=−0.1·1/(1+eps)≈−0.1
        let mut rng = StdRng::seed_from_u64(1);
        let mut layer = init_layer(LayerSpec::Dense { in_dim: 1, out_dim: 1 }, "d", &mut rng).unwrap();
        layer.state.weights[0].data_mut()[0] = 0.0;
        layer.state.weights[1].data_mut()[0] = 0.0;
        let mut net = Network::new(vec![layer]);
        let grads = vec![vec![
            Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            Tensor::zeros(&[1]),
        ]];
        net.adam_step(&grads, AdamParams::with_lr(0.1)).unwrap();
        let w = net.layers[0].state.weights[0].data()[0];
        assert!((w + 0.1).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn adam_rejects_non_finite_grad() {
        let mut rng = StdRng::seed_from_u64(1);
        let layer = init_layer(LayerSpec::Dense { in_dim: 1, out_dim: 1 }, "gen.head", &mut rng).unwrap();
        let mut net = Network::new(vec![layer]);
        let grads = vec![vec![
            Tensor::from_vec(&[1, 1], vec![f32::NAN]).unwrap(),
            Tensor::zeros(&[1]),
        ]];
        let err = net.adam_step(&grads, AdamParams::with_lr(0.1)).unwrap_err();
        assert!(format!("{err}").contains("gen.head"));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = StdRng::seed_from_u64(7);
            let layer = init_layer(LayerSpec::Dense { in_dim: 4, out_dim: 4 }, "d", &mut rng).unwrap();
            let mut net = Network::new(vec![layer]);
            let g: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin()).collect();
            let grads = vec![vec![
                Tensor::from_vec(&[4, 4], g).unwrap(),
                Tensor::filled(&[4], 0.1),
            ]];
            for _ in 0..5 {
                net.adam_step(&grads, AdamParams::with_lr(0.01)).unwrap();
            }
            net.flat_params()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ema_endpoints() {
        let mut rng = StdRng::seed_from_u64(2);
        let student = Network::new(vec![
            init_layer(LayerSpec::Dense { in_dim: 3, out_dim: 3 }, "d", &mut rng).unwrap()
        ]);
        let mut teacher = student.clone();
        for v in teacher.layers[0].state.weights[0].data_mut() {
            *v += 1.0;
        }
        let t0 = teacher.flat_params();
        teacher.ema_from(&student, 1.0).unwrap();
        assert_eq!(teacher.flat_params(), t0);
        teacher.ema_from(&student, 0.0).unwrap();
        assert_eq!(teacher.flat_params(), student.flat_params());
    }
}
