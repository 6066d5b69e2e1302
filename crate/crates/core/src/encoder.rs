//! MLP encoder with an L2-normalized output, manual backpropagation and Adam.
//!
//! Layers are affine maps with `tanh` between them (none after the last
//! layer); the final output is divided by its L2 norm.
//!
//! # Checkpoint layout
//!
//! A UTF-8 text file:
//!
//! ```text
//! contramem-encoder v1
//! sizes 32 64 32
//! layer 0
//! w <n_in values of output row 0>
//! ...                       (one `w` line per output unit)
//! b <n_out values>
//! layer 1
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a checkpoint
//! reloads bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::feature::{dot, FeatureVector};
use crate::rng::Rng;

const CHECKPOINT_MAGIC: &str = "contramem-encoder v1";

/// One affine layer; `weights` is row-major `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Layer {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| self.bias[o] + dot(&self.weights[o * self.n_in..(o + 1) * self.n_in], x))
            .collect()
    }
}

/// Encoder parameters. The same shape doubles as the gradient container and
/// as Adam's moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    /// Fan-in scaled Gaussian weights, zero biases.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let mut layer = Layer::zeros(w[0], w[1]);
                let scale = 1.0 / (w[0] as f64).sqrt();
                layer.weights.iter_mut().for_each(|x| *x = scale * rng.gaussian());
                layer
            })
            .collect();
        Ok(EncoderParams { layers })
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.n_in, l.n_out))
                .collect(),
        }
    }

    /// Single square layer with identity weights and zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut layer = Layer::zeros(dim, dim);
        (0..dim).for_each(|i| layer.weights[i * dim + i] = 1.0);
        EncoderParams {
            layers: vec![layer],
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameter tensors in a fixed order (w0, b0, w1, b1, ...).
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().flatten().all(|x| x.is_finite())
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.sizes() == other.sizes()
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let sizes: Vec<String> = self.sizes().iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "sizes {}", sizes.join(" "));
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "layer {i}");
            for row in l.weights.chunks(l.n_in) {
                out.push('w');
                row.iter().for_each(|x| {
                    let _ = write!(out, " {x:?}");
                });
                out.push('\n');
            }
            out.push('b');
            l.bias.iter().for_each(|x| {
                let _ = write!(out, " {x:?}");
            });
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("checkpoint: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing header"));
        }
        let sizes: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("sizes "))
            .ok_or_else(|| bad("missing sizes"))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad size")))
            .collect::<Result<_>>()?;
        if sizes.len() < 2 {
            return Err(bad("need at least two sizes"));
        }
        let floats = |line: Option<&str>, tag: char, n: usize| -> Result<Vec<f64>> {
            let line = line.ok_or_else(|| bad("truncated"))?;
            let rest = line
                .strip_prefix(tag)
                .ok_or_else(|| bad(&format!("expected `{tag}` line")))?;
            let v: Vec<f64> = rest
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad("bad float")))
                .collect::<Result<_>>()?;
            if v.len() != n {
                return Err(bad("row length mismatch"));
            }
            Ok(v)
        };
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            if lines.next() != Some(format!("layer {i}").as_str()) {
                return Err(bad("missing layer marker"));
            }
            let mut layer = Layer::zeros(w[0], w[1]);
            layer.weights.clear();
            for _ in 0..w[1] {
                layer.weights.extend(floats(lines.next(), 'w', w[0])?);
            }
            layer.bias = floats(lines.next(), 'b', w[1])?;
            layers.push(layer);
        }
        Ok(EncoderParams { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `layer_inputs[s][l]` is the input of layer `l` for sample `s`.
    layer_inputs: Vec<Vec<Vec<f64>>>,
    outputs: Vec<FeatureVector>,
    norms: Vec<f64>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.outputs.len()
    }
}

pub fn forward<I: AsRef<[f64]>>(
    params: &EncoderParams,
    batch: &[I],
) -> Result<(Vec<FeatureVector>, ForwardCache)> {
    let n_layers = params.layers.len();
    let mut cache = ForwardCache {
        layer_inputs: Vec::with_capacity(batch.len()),
        outputs: Vec::with_capacity(batch.len()),
        norms: Vec::with_capacity(batch.len()),
    };
    for x in batch {
        let x = x.as_ref();
        if x.len() != params.input_dim() {
            return Err(Error::Contract(format!(
                "encoder input has length {}, expected {}",
                x.len(),
                params.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite encoder input".into()));
        }
        let mut inputs = Vec::with_capacity(n_layers);
        let mut h = x.to_vec();
        for (l, layer) in params.layers.iter().enumerate() {
            let mut a = layer.apply(&h);
            if l + 1 < n_layers {
                a.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut h, a));
        }
        let n = crate::feature::norm(&h);
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Numeric(format!("encoder pre-normalization norm is {n}")));
        }
        cache.norms.push(n);
        cache
            .outputs
            .push(FeatureVector::new(h.into_iter().map(|v| v / n).collect()));
        cache.layer_inputs.push(inputs);
    }
    Ok((cache.outputs.clone(), cache))
}

/// Encodes without keeping a cache.
pub fn encode<I: AsRef<[f64]>>(params: &EncoderParams, batch: &[I]) -> Result<Vec<FeatureVector>> {
    forward(params, batch).map(|(f, _)| f)
}

/// Gradients of the loss with respect to every parameter, summed over the
/// batch. `grads[s]` is the loss gradient with respect to normalized output `s`.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grads: &[Vec<f64>],
) -> Result<EncoderParams> {
    if grads.len() != cache.batch_len() {
        return Err(Error::Contract(format!(
            "{} output gradients for a batch of {}",
            grads.len(),
            cache.batch_len()
        )));
    }
    let mut out = params.zeros_like();
    let n_layers = params.layers.len();
    for (s, g_y) in grads.iter().enumerate() {
        let y = cache.outputs[s].as_slice();
        // Jacobian of y = f / |f|: project out the radial component.
        let radial = dot(y, g_y);
        let mut delta: Vec<f64> = g_y
            .iter()
            .zip(y)
            .map(|(g, yi)| (g - yi * radial) / cache.norms[s])
            .collect();
        for l in (0..n_layers).rev() {
            let layer = &params.layers[l];
            let input = &cache.layer_inputs[s][l];
            let grad = &mut out.layers[l];
            for o in 0..layer.n_out {
                let d = delta[o];
                grad.bias[o] += d;
                if d != 0.0 {
                    grad.weights[o * layer.n_in..(o + 1) * layer.n_in]
                        .iter_mut()
                        .zip(input)
                        .for_each(|(gw, x)| *gw += d * x);
                }
            }
            if l == 0 {
                break;
            }
            // input of layer l is tanh output of layer l-1
            delta = (0..layer.n_in)
                .map(|i| {
                    let back: f64 = (0..layer.n_out)
                        .map(|o| layer.weights[o * layer.n_in + i] * delta[o])
                        .sum();
                    back * (1.0 - input[i] * input[i])
                })
                .collect();
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric("non-finite encoder gradient".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: EncoderParams,
    pub second: EncoderParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 0.00035;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0005;

    pub fn new(params: &EncoderParams, lr: f64, weight_decay: f64) -> Self {
        AdamState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            weight_decay,
        }
    }
}

/// One Adam step with decoupled weight decay (`param -= decay * lr * param`).
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut AdamState,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.first) {
        return Err(Error::Contract("Adam shape mismatch".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, lr, wd) = (state.beta1, state.beta2, state.eps, state.lr, state.weight_decay);
    let tensors = params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.first.tensors_mut().zip(state.second.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps) + wd * lr * p[i];
        }
    }
    if !params.is_finite() {
        return Err(Error::Numeric("non-finite parameter after Adam step".into()));
    }
    Ok(())
}

/// Step-decay schedule: `base * gamma^(epoch / step)`. The step length is
/// 20 epochs out of 50, scaled proportionally to `total_epochs`.
pub fn scheduled_lr(base: f64, gamma: f64, epoch: usize, total_epochs: usize) -> f64 {
    let step = ((20.0 * total_epochs as f64 / 50.0).round() as usize).max(1);
    base * gamma.powi((epoch / step) as i32)
}
