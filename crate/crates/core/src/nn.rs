//! Dense network substrate: affine layers with fixed activations, explicit
//! forward traces, and backpropagation into caller-owned gradient buffers.
//!
//! Networks are read-only during `forward`/`backward`; the only mutable state
//! in a backward pass is the [`NetGrads`] accumulator the caller passes in.
//! Parameter updates go through [`Optimizer`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Softplus => softplus(z),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`, given the activation output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Softplus => sigmoid(z),
            Activation::Identity => 1.0,
        }
    }
}

pub fn softplus(z: f64) -> f64 {
    // log(1 + e^z) without overflow for large z
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Glorot-uniform bound for a layer with the given fan-in and fan-out.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// One affine transform followed by an activation. Weights are row-major
/// `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = glorot_bound(inputs, outputs);
        let weights = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Dense {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn from_parts(
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != inputs * outputs {
            return Err(Error::Shape {
                context: "dense weights",
                expected: inputs * outputs,
                actual: weights.len(),
            });
        }
        if bias.len() != outputs {
            return Err(Error::Shape {
                context: "dense bias",
                expected: outputs,
                actual: bias.len(),
            });
        }
        Ok(Dense {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v))
            .collect()
    }
}

/// Values recorded by a forward pass, needed to run the matching backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn output(&self) -> Option<&[f64]> {
        self.post.last().map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient accumulator mirroring a [`DenseNet`]'s parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetGrads {
    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(|g| *g *= factor);
            layer.bias.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

impl DenseNet {
    /// Builds a Glorot-initialized net. `widths` has one more entry than
    /// `activations`: `[input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        check_widths(widths, activations)?;
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| Dense::glorot(w[0], w[1], act, rng))
            .collect();
        Ok(DenseNet { layers })
    }

    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        check_widths(widths, activations)?;
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| Dense::zeros(w[0], w[1], act))
            .collect();
        Ok(DenseNet { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Shape {
                    context: "layer chain",
                    expected: pair[0].outputs,
                    actual: pair[1].inputs,
                });
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_width(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut current = x.to_vec();
        for layer in &self.layers {
            let mut z = layer.pre_activation(&current);
            z.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            current = z;
        }
        Ok(current)
    }

    /// Forward pass that records what [`DenseNet::backward`] needs.
    pub fn forward_traced(&self, x: &[f64]) -> Result<(Vec<f64>, Trace)> {
        self.check_input(x)?;
        let mut trace = Trace::default();
        let mut current = x.to_vec();
        for layer in &self.layers {
            let z = layer.pre_activation(&current);
            let a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            trace.inputs.push(current);
            trace.pre.push(z);
            trace.post.push(a.clone());
            current = a;
        }
        Ok((current, trace))
    }

    pub fn zero_grads(&self) -> NetGrads {
        NetGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the traced input.
    pub fn backward(&self, trace: &Trace, upstream: &[f64], grads: &mut NetGrads) -> Result<Vec<f64>> {
        if trace.is_empty() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if trace.inputs.len() != self.layers.len() {
            return Err(Error::State(format!(
                "trace has {} layers, network has {}",
                trace.inputs.len(),
                self.layers.len()
            )));
        }
        if upstream.len() != self.output_width() {
            return Err(Error::Shape {
                context: "upstream gradient",
                expected: self.output_width(),
                actual: upstream.len(),
            });
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Shape {
                context: "gradient buffer layers",
                expected: self.layers.len(),
                actual: grads.layers.len(),
            });
        }

        let mut delta = upstream.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre[idx];
            let a = &trace.post[idx];
            let input = &trace.inputs[idx];
            for (o, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative(z[o], a[o]);
            }

            let g = &mut grads.layers[idx];
            let mut next = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let grow = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for i in 0..layer.inputs {
                    grow[i] += d * input[i];
                    next[i] += d * row[i];
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// All parameters flattened layer by layer, weights before bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape {
                context: "flat parameters",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let n = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

fn check_widths(widths: &[usize], activations: &[Activation]) -> Result<()> {
    if widths.len() < 2 || widths.len() != activations.len() + 1 {
        return Err(Error::Validation(format!(
            "need one activation per layer: {} widths, {} activations",
            widths.len(),
            activations.len()
        )));
    }
    if widths.contains(&0) {
        return Err(Error::Validation("layer widths must be positive".into()));
    }
    Ok(())
}

/// Linear classifier whose logits are dot products `s(x, W_t)` with one
/// weight row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl ClassifierHead {
    pub fn glorot<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Self {
        let bound = glorot_bound(dim, classes);
        ClassifierHead {
            classes,
            dim,
            weights: (0..classes * dim)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || dim == 0 {
            return Err(Error::Validation("classifier head needs non-empty rows".into()));
        }
        let mut weights = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::Shape {
                    context: "classifier row",
                    expected: dim,
                    actual: row.len(),
                });
            }
            weights.extend_from_slice(row);
        }
        Ok(ClassifierHead {
            classes: rows.len(),
            dim,
            weights,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape {
                context: "classifier input",
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect())
    }

    /// Accumulates `dL/dW` into `grad` (same layout as the weights) and
    /// returns `dL/dx`.
    pub fn backward(&self, x: &[f64], d_logits: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        if d_logits.len() != self.classes {
            return Err(Error::Shape {
                context: "logit gradient",
                expected: self.classes,
                actual: d_logits.len(),
            });
        }
        if x.len() != self.dim {
            return Err(Error::Shape {
                context: "classifier input",
                expected: self.dim,
                actual: x.len(),
            });
        }
        let mut dx = vec![0.0; self.dim];
        for (t, &d) in d_logits.iter().enumerate() {
            let row = self.row(t);
            let grow = &mut grad[t * self.dim..(t + 1) * self.dim];
            for i in 0..self.dim {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub beta1: f64,
    /// Adam's second-moment decay; unused by SGD.
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct SlotState {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// SGD (with optional momentum) or Adam over an ordered list of parameter
/// slices. Slot order must be the same on every call.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    slots: Vec<SlotState>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            slots: Vec::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                context: "optimizer slots",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    context: "optimizer slot",
                    expected: p.len(),
                    actual: g.len(),
                });
            }
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| SlotState {
                    first: vec![0.0; p.len()],
                    second: vec![0.0; p.len()],
                })
                .collect();
        } else if self.slots.len() != params.len() {
            return Err(Error::State("optimizer slot layout changed between steps".into()));
        }
        self.steps += 1;
        let cfg = self.config;
        if cfg.learning_rate == 0.0 {
            return Ok(());
        }

        let t = self.steps as i32;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            for i in 0..p.len() {
                let grad = g[i] + cfg.weight_decay * p[i];
                match cfg.kind {
                    OptimizerKind::Sgd => {
                        let v = cfg.beta1 * slot.first[i] + grad;
                        slot.first[i] = v;
                        p[i] -= cfg.learning_rate * v;
                    }
                    OptimizerKind::Adam => {
                        let m = cfg.beta1 * slot.first[i] + (1.0 - cfg.beta1) * grad;
                        let v = cfg.beta2 * slot.second[i] + (1.0 - cfg.beta2) * grad * grad;
                        slot.first[i] = m;
                        slot.second[i] = v;
                        let m_hat = m / (1.0 - cfg.beta1.powi(t));
                        let v_hat = v / (1.0 - cfg.beta2.powi(t));
                        p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
