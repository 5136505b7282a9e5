//! Fully connected networks with hand-written reverse-mode gradients.
//!
//! Layers store weights as `out × in` matrices. Batches are row-major
//! `batch × features`. Gradients from [`Mlp::backward`] are sums over the
//! batch; callers that want a mean scale the upstream gradient.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Linear => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Linear),
            other => Err(Error::Checkpoint(format!(
                "unknown activation code {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_layers: Vec<usize>,
        output_dim: usize,
        output_activation: Activation,
    ) -> Self {
        Self {
            input_dim,
            hidden_layers,
            output_dim,
            hidden_activation: Activation::Relu,
            output_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_layers.contains(&0) {
            return Err(Error::invalid(
                "mlp",
                format!("all layer widths must be >= 1: {self:?}"),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer == self.hidden_layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// Weights (`out × in`) and biases of one dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn fill(&mut self, value: f64) {
        self.weights.fill(value);
        self.bias.fill(value);
    }

    fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Post-activation output of each layer.
    outputs: Vec<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    grads: Vec<Layer>,
    cache: Option<ForwardCache>,
}

impl Mlp {
    /// All parameters zero.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers: Vec<Layer> = spec
            .layer_shapes()
            .iter()
            .map(|&(i, o)| Layer::zeros(i, o))
            .collect();
        let grads = layers.clone();
        Ok(Self {
            spec,
            layers,
            grads,
            cache: None,
        })
    }

    /// He-normal hidden layers, zero biases, and a final layer drawn
    /// uniformly from `±final_scale`.
    pub fn init<R: Rng>(spec: MlpSpec, rng: &mut R, final_scale: f64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let last = net.layers.len() - 1;
        for (idx, layer) in net.layers.iter_mut().enumerate() {
            if idx == last {
                let dist = Uniform::new_inclusive(-final_scale, final_scale)
                    .map_err(|e| Error::invalid("final_scale", e.to_string()))?;
                layer.weights.mapv_inplace(|_| rng.sample(dist));
                layer.bias.mapv_inplace(|_| rng.sample(dist));
            } else {
                let std = (2.0 / layer.weights.ncols() as f64).sqrt();
                layer
                    .weights
                    .mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Gradients from the most recent backward pass.
    pub fn grads(&self) -> &[Layer] {
        &self.grads
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Layer::all_finite)
    }

    /// Parameters flattened in checkpoint order.
    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        flatten(&self.grads)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.spec.parameter_count();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "set_flat_params",
                expected,
                actual: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = it.next().unwrap_or_default();
            }
        }
        Ok(())
    }

    /// Batch forward pass that keeps the activations for [`Mlp::backward`].
    pub fn forward(&mut self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for (idx, layer) in self.layers.iter().enumerate() {
            let act = self.spec.activation(idx);
            let mut z = x.dot(&layer.weights.t());
            z += &layer.bias;
            z.mapv_inplace(|v| act.apply(v));
            inputs.push(x);
            x = z.clone();
            outputs.push(z);
        }
        self.cache = Some(ForwardCache { inputs, outputs });
        Ok(x)
    }

    /// Batch forward pass without caching.
    pub fn forward_inference(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut x = input.to_owned();
        for (idx, layer) in self.layers.iter().enumerate() {
            let act = self.spec.activation(idx);
            let mut z = x.dot(&layer.weights.t());
            z += &layer.bias;
            z.mapv_inplace(|v| act.apply(v));
            x = z;
        }
        Ok(x)
    }

    /// Single-sample forward pass.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let mut x: Vec<f64> = input.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let act = self.spec.activation(idx);
            x = layer
                .weights
                .rows()
                .into_iter()
                .zip(layer.bias.iter())
                .map(|(row, b)| act.apply(row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + b))
                .collect();
        }
        Ok(x)
    }

    /// Back-propagates `upstream` (∂loss/∂output, `batch × output_dim`)
    /// through the last forward pass. Parameter gradients overwrite the
    /// gradient buffers; the gradient with respect to the input is returned.
    pub fn backward(&mut self, upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        let batch = cache.inputs[0].nrows();
        if upstream.nrows() != batch || upstream.ncols() != self.spec.output_dim {
            return Err(Error::DimensionMismatch {
                context: "backward upstream",
                expected: batch * self.spec.output_dim,
                actual: upstream.len(),
            });
        }
        let mut delta = upstream.to_owned();
        for idx in (0..self.layers.len()).rev() {
            let act = self.spec.activation(idx);
            delta.zip_mut_with(&cache.outputs[idx], |d, &y| {
                *d *= act.derivative_from_output(y)
            });
            let grad = &mut self.grads[idx];
            grad.weights = delta.t().dot(&cache.inputs[idx]);
            grad.bias = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.layers[idx].weights);
        }
        Ok(delta)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.spec.input_dim,
                actual: cols,
            });
        }
        Ok(())
    }

    /// Writes the network in the binary checkpoint layout (little endian):
    ///
    /// ```text
    /// b"FIPWCMLP"  u32 version=1
    /// u32 input_dim  u32 output_dim  u32 n_hidden  u32 × n_hidden widths
    /// u8 hidden_activation  u8 output_activation   (0 relu, 1 tanh, 2 linear)
    /// per layer: f64 weights (out × in, row-major), f64 biases (out)
    /// ```
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MLP_MAGIC)?;
        w.write_all(&MLP_VERSION.to_le_bytes())?;
        let s = &self.spec;
        for v in [s.input_dim, s.output_dim, s.hidden_layers.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for &h in &s.hidden_layers {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        w.write_all(&[s.hidden_activation.code(), s.output_activation.code()])?;
        for layer in &self.layers {
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MLP_MAGIC {
            return Err(Error::Checkpoint("bad network magic".into()));
        }
        let version = read_u32(r)?;
        if version != MLP_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported network version {version}"
            )));
        }
        let input_dim = read_u32(r)? as usize;
        let output_dim = read_u32(r)? as usize;
        let n_hidden = read_u32(r)? as usize;
        if n_hidden > 4096 {
            return Err(Error::Checkpoint(format!(
                "implausible hidden layer count {n_hidden}"
            )));
        }
        let hidden_layers = (0..n_hidden)
            .map(|_| read_u32(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut codes = [0u8; 2];
        read_exact(r, &mut codes)?;
        let spec = MlpSpec {
            input_dim,
            hidden_layers,
            output_dim,
            hidden_activation: Activation::from_code(codes[0])?,
            output_activation: Activation::from_code(codes[1])?,
        };
        let mut net = Mlp::zeros(spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = [0u8; 8];
        for layer in &mut net.layers {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                read_exact(r, &mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(net)
    }
}

const MLP_MAGIC: &[u8; 8] = b"FIPWCMLP";
const MLP_VERSION: u32 = 1;

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated input: {e}")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let zeros: Vec<Layer> = net
            .spec
            .layer_shapes()
            .iter()
            .map(|&(i, o)| Layer::zeros(i, o))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.step.to_le_bytes())?;
        for layer in self.first.iter().chain(self.second.iter()) {
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut R, net: &Mlp, config: AdamConfig) -> Result<Self> {
        let mut state = Self::new(net, config);
        let mut b8 = [0u8; 8];
        read_exact(r, &mut b8)?;
        state.step = u64::from_le_bytes(b8);
        for layer in state.first.iter_mut().chain(state.second.iter_mut()) {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                read_exact(r, &mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
        }
        Ok(state)
    }
}

/// Bias-corrected Adam update using the gradients stored in `net`.
pub fn adam_step(net: &mut Mlp, opt: &mut AdamState) -> Result<()> {
    for (idx, g) in net.grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                context: "gradient",
                detail: format!("layer {idx} of {:?}", net.spec.layer_shapes()),
            });
        }
    }
    opt.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = opt.config;
    let t = opt.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);

    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    };

    for (((layer, grad), m), v) in net
        .layers
        .iter_mut()
        .zip(net.grads.iter())
        .zip(opt.first.iter_mut())
        .zip(opt.second.iter_mut())
    {
        ndarray::Zip::from(&mut layer.weights)
            .and(&grad.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut layer.bias)
            .and(&grad.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

/// `target ← τ·online + (1−τ)·target`
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if target.spec != online.spec {
        return Err(Error::SpecMismatch(format!(
            "{:?} vs {:?}",
            target.spec, online.spec
        )));
    }
    for (t, o) in target.layers.iter_mut().zip(online.layers.iter()) {
        t.weights
            .zip_mut_with(&o.weights, |t, &o| *t = tau * o + (1.0 - tau) * *t);
        t.bias
            .zip_mut_with(&o.bias, |t, &o| *t = tau * o + (1.0 - tau) * *t);
    }
    Ok(())
}
