//! Minimal neural substrate: dense stacks with explicit forward traces and
//! reverse-mode gradients, Adam, and a flat binary checkpoint format.
//!
//! Batches are `Array2<f64>` with one sample per row. Parameters of every
//! model are exposed as one flat vector (per layer: row-major weight, then
//! bias) so that optimizers, checksums and finite-difference checks share a
//! single view.

pub mod checkpoint;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, TensorSpec};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward called without a matching forward trace")]
    NoTrace,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiplies `delta` by the activation derivative, expressed through the
    /// activation output `y`.
    fn backprop(self, y: &Array2<f64>, delta: &mut Array2<f64>) {
        match self {
            Activation::Relu => delta.zip_mut_with(y, |d, &v| {
                if v <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::Tanh => delta.zip_mut_with(y, |d, &v| *d *= 1.0 - v * v),
            Activation::Identity => {}
        }
    }
}

/// Xavier-uniform matrix of shape `rows × cols`.
pub fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: xavier(input, output, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight);
        z += &self.bias;
        z
    }
}

/// Intermediates recorded by [`DenseNet::forward_traced`]: the input to each
/// layer followed by the final output.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    activations: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> Option<&Array2<f64>> {
        self.activations.last()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }
}

/// Gradients of a scalar loss with respect to parameters and inputs.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

/// Fully connected stack with one activation per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
    activations: Vec<Activation>,
}

impl DenseNet {
    /// `widths` lists the input width followed by each layer's output width.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self, NnError> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(NnError::Shape(format!(
                "{} widths need {} activations, got {}",
                widths.len(),
                widths.len().saturating_sub(1),
                activations.len()
            )));
        }
        if widths.contains(&0) {
            return Err(NnError::Shape("zero-width layer".into()));
        }
        let layers = widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Ok(Self {
            layers,
            activations: activations.to_vec(),
        })
    }

    /// Hidden layers share `hidden` activation; the output layer is linear.
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, rng: &mut R) -> Result<Self, NnError> {
        let n = widths.len().saturating_sub(1);
        let mut acts = vec![hidden; n];
        if let Some(last) = acts.last_mut() {
            *last = Activation::Identity;
        }
        Self::new(widths, &acts, rng)
    }

    pub fn from_layers(layers: Vec<Dense>, activations: Vec<Activation>) -> Result<Self, NnError> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(NnError::Shape("layer/activation count mismatch".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NnError::Shape("incompatible consecutive layers".into()));
            }
        }
        Ok(Self { layers, activations })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Dense::output_dim));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x)?;
        let mut h = self.layers[0].forward(x);
        self.activations[0].apply(&mut h);
        for (layer, act) in self.layers.iter().zip(&self.activations).skip(1) {
            h = layer.forward(&h.view());
            act.apply(&mut h);
        }
        Ok(h)
    }

    /// Finishes a forward pass from the first layer's pre-activation output,
    /// for callers that assemble it from cached partial products.
    pub fn forward_from_first(&self, mut z1: Array2<f64>) -> Result<Array2<f64>, NnError> {
        if z1.ncols() != self.layers[0].output_dim() {
            return Err(NnError::Shape(format!(
                "first-layer output has {} columns, expected {}",
                z1.ncols(),
                self.layers[0].output_dim()
            )));
        }
        self.activations[0].apply(&mut z1);
        let mut h = z1;
        for (layer, act) in self.layers.iter().zip(&self.activations).skip(1) {
            h = layer.forward(&h.view());
            act.apply(&mut h);
        }
        Ok(h)
    }

    pub fn forward_traced(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Trace), NnError> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let mut h = layer.forward(&acts[acts.len() - 1].view());
            act.apply(&mut h);
            acts.push(h);
        }
        let out = acts[acts.len() - 1].clone();
        Ok((out, Trace { activations: acts }))
    }

    /// Back-propagates `upstream` (dL/d output) through the trace.
    pub fn backward(&self, trace: &Trace, upstream: &ArrayView2<f64>) -> Result<Gradients, NnError> {
        let mut params = vec![0.0; self.num_params()];
        let input = self.backward_into(trace, upstream, Some(&mut params))?;
        Ok(Gradients { params, input })
    }

    /// Input gradient only; skips the weight-gradient products.
    pub fn input_gradient(&self, trace: &Trace, upstream: &ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.backward_into(trace, upstream, None)
    }

    /// Back-propagates and *adds* parameter gradients into `param_grads`
    /// when given. Returns the input gradient.
    pub fn backward_into(
        &self,
        trace: &Trace,
        upstream: &ArrayView2<f64>,
        mut param_grads: Option<&mut [f64]>,
    ) -> Result<Array2<f64>, NnError> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(NnError::NoTrace);
        }
        let out = &trace.activations[self.layers.len()];
        if upstream.dim() != out.dim() {
            return Err(NnError::Shape(format!(
                "upstream {:?} does not match output {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        if let Some(g) = param_grads.as_deref() {
            if g.len() != self.num_params() {
                return Err(NnError::Shape("gradient buffer length".into()));
            }
        }
        let offsets = self.param_offsets();
        let mut delta = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            self.activations[l].backprop(&trace.activations[l + 1], &mut delta);
            if let Some(g) = param_grads.as_deref_mut() {
                let x = &trace.activations[l];
                let dw = x.t().dot(&delta);
                let off = offsets[l];
                let nw = layer.weight.len();
                for (dst, src) in g[off..off + nw].iter_mut().zip(dw.iter()) {
                    *dst += src;
                }
                let db = delta.sum_axis(Axis(0));
                for (dst, src) in g[off + nw..off + nw + layer.bias.len()].iter_mut().zip(db.iter()) {
                    *dst += src;
                }
            }
            delta = delta.dot(&layer.weight.t());
        }
        Ok(delta)
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.num_params();
        }
        offsets
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_params(&mut out);
        out
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
    }

    /// Reads parameters from the front of `src`, advancing it.
    pub fn read_params(&mut self, src: &mut &[f64]) -> Result<(), NnError> {
        if src.len() < self.num_params() {
            return Err(NnError::Shape("parameter vector too short".into()));
        }
        for layer in &mut self.layers {
            let nw = layer.weight.len();
            for (dst, s) in layer.weight.iter_mut().zip(&src[..nw]) {
                *dst = *s;
            }
            let nb = layer.bias.len();
            for (dst, s) in layer.bias.iter_mut().zip(&src[nw..nw + nb]) {
                *dst = *s;
            }
            *src = &src[nw + nb..];
        }
        Ok(())
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.num_params() {
            return Err(NnError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut src = params;
        self.read_params(&mut src)
    }

    /// Tensor shapes in parameter order, for checkpoint headers.
    pub fn tensor_specs(&self, prefix: &str) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        for (i, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate() {
            out.push(TensorSpec::new(
                format!("{prefix}{i}.weight"),
                vec![layer.input_dim(), layer.output_dim()],
                Some(*act),
            ));
            out.push(TensorSpec::new(format!("{prefix}{i}.bias"), vec![layer.output_dim()], None));
        }
        out
    }
}

/// Bias-corrected adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update in place. Non-finite gradients are rejected before
    /// any state changes.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::Shape(format!(
                "adam state has {} slots, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFinite("gradient"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescales `grads` so its L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Order-sensitive FNV-1a checksum over the bit patterns of `values`.
pub fn checksum(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numerical_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Maximum over entries of `|a - n| / max(|a| + |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max)
}
