//! Minimal feed-forward neural-network engine.
//!
//! Everything is f64: finite-difference validation at 1e-4 relative
//! tolerance is not reliable in f32. The engine is deliberately small —
//! dense layers, a handful of activations, MSE or softmax/cross-entropy
//! losses, plain SGD — because the attack and detection code needs exact
//! control over every update, not a general autodiff framework.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Identity,
    Softmax,
}

impl Activation {
    fn apply(self, pre: &[f64], out: &mut [f64]) {
        match self {
            Activation::Sigmoid => {
                for (o, &z) in out.iter_mut().zip(pre) {
                    *o = 1.0 / (1.0 + (-z).exp());
                }
            }
            Activation::Tanh => {
                for (o, &z) in out.iter_mut().zip(pre) {
                    *o = z.tanh();
                }
            }
            Activation::Relu => {
                for (o, &z) in out.iter_mut().zip(pre) {
                    *o = if z > 0.0 { z } else { 0.0 };
                }
            }
            Activation::Identity => out.copy_from_slice(pre),
            Activation::Softmax => {
                let max = pre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &z) in out.iter_mut().zip(pre) {
                    *o = (z - max).exp();
                    sum += *o;
                }
                for o in out.iter_mut() {
                    *o /= sum;
                }
            }
        }
    }

    /// Element-wise derivative dφ/dz, written in terms of pre-activation z
    /// and output o. Not defined for softmax (handled jointly with the
    /// cross-entropy loss).
    fn derivative(self, z: f64, o: f64) -> f64 {
        match self {
            Activation::Sigmoid => o * (1.0 - o),
            Activation::Tanh => 1.0 - o * o,
            // Sub-gradient at z == 0 is taken as 0 (deterministic tie-break).
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Softmax => unreachable!("softmax derivative is fused with cross-entropy"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Clamp for log arguments; confidently wrong predictions from poisoned
/// models would otherwise produce -inf cross-entropy.
const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self { in_dim, out_dim, activation }
    }
}

/// Ordered dense layers with per-layer weights (out_dim x in_dim, row-major)
/// and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForwardNet {
    specs: Vec<LayerSpec>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    loss_kind: LossKind,
    init_seed: u64,
}

/// All intermediate per-layer pre-activations and outputs of one forward
/// pass, plus the input and the scalar loss.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub pre_activations: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
    pub loss: f64,
}

/// Per-layer weight and bias gradients, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(net: &FeedForwardNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Tensor::zeros(w.shape().to_vec())).collect(),
            biases: net.biases.iter().map(|b| Tensor::zeros(b.shape().to_vec())).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self
            .weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .zip(other.weights.iter().chain(other.biases.iter()))
        {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += *y;
            }
        }
    }
}

impl FeedForwardNet {
    /// Build a net with the given layer stack and seeded uniform
    /// initialization in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn new(specs: Vec<LayerSpec>, loss_kind: LossKind, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("net needs at least one layer".into()));
        }
        for pair in specs.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer output dim {} does not match next layer input dim {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
            if pair[0].activation == Activation::Softmax {
                return Err(Error::UnsupportedConfig(
                    "softmax is permitted only on the final layer".into(),
                ));
            }
        }
        let last = specs.last().unwrap().activation;
        match loss_kind {
            LossKind::CrossEntropy if last != Activation::Softmax => {
                return Err(Error::UnsupportedConfig(
                    "cross-entropy loss requires a softmax final activation".into(),
                ));
            }
            LossKind::Mse if last == Activation::Softmax => {
                return Err(Error::UnsupportedConfig(
                    "mse loss requires a non-softmax final activation".into(),
                ));
            }
            _ => {}
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(specs.len());
        let mut biases = Vec::with_capacity(specs.len());
        for spec in &specs {
            let limit = 1.0 / (spec.in_dim as f64).sqrt();
            let w: Vec<f64> =
                (0..spec.out_dim * spec.in_dim).map(|_| rng.gen_range(-limit..limit)).collect();
            let b: Vec<f64> = (0..spec.out_dim).map(|_| rng.gen_range(-limit..limit)).collect();
            weights.push(Tensor::new(vec![spec.out_dim, spec.in_dim], w)?);
            biases.push(Tensor::new(vec![spec.out_dim], b)?);
        }
        Ok(Self { specs, weights, biases, loss_kind, init_seed: seed })
    }

    /// Convenience constructor: all-sigmoid stack from a dim list, except an
    /// optional softmax head when `loss_kind` is cross-entropy.
    pub fn sigmoid_stack(dims: &[usize], loss_kind: LossKind, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("dim list needs at least two entries".into()));
        }
        let n_layers = dims.len() - 1;
        let specs = (0..n_layers)
            .map(|i| {
                let act = if i == n_layers - 1 && loss_kind == LossKind::CrossEntropy {
                    Activation::Softmax
                } else {
                    Activation::Sigmoid
                };
                LayerSpec::new(dims[i], dims[i + 1], act)
            })
            .collect();
        Self::new(specs, loss_kind, seed)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn depth(&self) -> usize {
        self.specs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs.last().unwrap().out_dim
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum::<usize>()
            + self.biases.iter().map(Tensor::len).sum::<usize>()
    }

    fn check_pair(&self, x: &Tensor, t: &Tensor) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input dimension {} does not match layer-0 in_dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        if t.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "target dimension {} does not match final out_dim {}",
                t.len(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass recording every intermediate pre-activation and output,
    /// plus the scalar loss against target `t`.
    pub fn forward(&self, x: &Tensor, t: &Tensor) -> Result<ForwardTrace> {
        self.check_pair(x, t)?;
        let mut pre_activations = Vec::with_capacity(self.depth());
        let mut outputs = Vec::with_capacity(self.depth());
        let mut cur = x.data().to_vec();
        for (layer, (w, b)) in self.specs.iter().zip(self.weights.iter().zip(&self.biases)) {
            let mut pre = b.data().to_vec();
            matvec_add(w.data(), &cur, &mut pre, layer.out_dim, layer.in_dim);
            let mut out = vec![0.0; layer.out_dim];
            layer.activation.apply(&pre, &mut out);
            cur = out.clone();
            pre_activations.push(Tensor::vector(pre));
            outputs.push(Tensor::vector(out));
        }
        let loss = self.loss(outputs.last().unwrap().data(), t.data());
        Ok(ForwardTrace { input: x.clone(), pre_activations, outputs, loss })
    }

    /// Loss of a single (x, t) pair without keeping the trace.
    pub fn forward_loss(&self, x: &Tensor, t: &Tensor) -> Result<f64> {
        self.check_pair(x, t)?;
        let out = self.output_unchecked(x.data());
        Ok(self.loss(&out, t.data()))
    }

    /// Final-layer output for an input.
    pub fn output(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input dimension {} does not match layer-0 in_dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(Tensor::vector(self.output_unchecked(x.data())))
    }

    fn output_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (layer, (w, b)) in self.specs.iter().zip(self.weights.iter().zip(&self.biases)) {
            let mut pre = b.data().to_vec();
            matvec_add(w.data(), &cur, &mut pre, layer.out_dim, layer.in_dim);
            let mut out = vec![0.0; layer.out_dim];
            layer.activation.apply(&pre, &mut out);
            cur = out;
        }
        cur
    }

    fn loss(&self, out: &[f64], t: &[f64]) -> f64 {
        match self.loss_kind {
            LossKind::Mse => {
                0.5 * out.iter().zip(t).map(|(o, ti)| (o - ti) * (o - ti)).sum::<f64>()
            }
            LossKind::CrossEntropy => {
                -out.iter().zip(t).map(|(o, ti)| ti * o.max(LOG_CLAMP).ln()).sum::<f64>()
            }
        }
    }

    fn check_trace(&self, trace: &ForwardTrace, t: &Tensor) -> Result<()> {
        if trace.outputs.len() != self.depth()
            || trace.input.len() != self.input_dim()
            || trace
                .outputs
                .iter()
                .zip(&self.specs)
                .any(|(o, s)| o.len() != s.out_dim)
        {
            return Err(Error::Shape("trace does not match net layer shapes".into()));
        }
        if t.len() != self.output_dim() {
            return Err(Error::Shape("target dimension does not match final out_dim".into()));
        }
        Ok(())
    }

    /// Sensitivities dL/dz_k for every layer, back to front.
    fn deltas(&self, trace: &ForwardTrace, t: &Tensor) -> Vec<Vec<f64>> {
        let depth = self.depth();
        let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); depth];
        let out = trace.outputs[depth - 1].data();
        let last = &self.specs[depth - 1];
        deltas[depth - 1] = match self.loss_kind {
            // softmax + cross-entropy collapses to o - t
            LossKind::CrossEntropy => out.iter().zip(t.data()).map(|(o, ti)| o - ti).collect(),
            LossKind::Mse => out
                .iter()
                .zip(t.data())
                .zip(trace.pre_activations[depth - 1].data())
                .map(|((o, ti), z)| (o - ti) * last.activation.derivative(*z, *o))
                .collect(),
        };
        self.backfill_deltas(trace, &mut deltas);
        deltas
    }

    /// Propagate the already-filled output-layer delta down to layer 0.
    fn backfill_deltas(&self, trace: &ForwardTrace, deltas: &mut [Vec<f64>]) {
        let depth = self.depth();
        for k in (0..depth - 1).rev() {
            let w_next = self.weights[k + 1].data();
            let (rows, cols) = (self.specs[k + 1].out_dim, self.specs[k + 1].in_dim);
            let mut back = vec![0.0; cols];
            matvec_transpose(w_next, &deltas[k + 1], &mut back, rows, cols);
            let o = trace.outputs[k].data();
            let z = trace.pre_activations[k].data();
            deltas[k] = back
                .iter()
                .zip(z.iter().zip(o))
                .map(|(g, (&zi, &oi))| g * self.specs[k].activation.derivative(zi, oi))
                .collect();
        }
    }

    /// Weight and bias gradients of the loss recorded in `trace`.
    pub fn backprop_weights(&self, trace: &ForwardTrace, t: &Tensor) -> Result<Gradients> {
        self.check_trace(trace, t)?;
        let deltas = self.deltas(trace, t);
        Ok(self.grads_from_deltas(trace, &deltas))
    }

    /// Backpropagate an externally imposed gradient w.r.t. the final-layer
    /// output (dObjective/dOut) and return the parameter gradients. Used to
    /// drive the poison generator, whose objective lives outside this net.
    pub fn backprop_output_error(
        &self,
        trace: &ForwardTrace,
        output_error: &Tensor,
    ) -> Result<Gradients> {
        if self.specs.last().unwrap().activation == Activation::Softmax {
            return Err(Error::UnsupportedConfig(
                "imposed output errors are not defined for a softmax head".into(),
            ));
        }
        self.check_trace(trace, output_error)?;
        let depth = self.depth();
        let last = &self.specs[depth - 1];
        let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); depth];
        deltas[depth - 1] = output_error
            .data()
            .iter()
            .zip(trace.pre_activations[depth - 1].data().iter().zip(trace.outputs[depth - 1].data()))
            .map(|(e, (&z, &o))| e * last.activation.derivative(z, o))
            .collect();
        self.backfill_deltas(trace, &mut deltas);
        Ok(self.grads_from_deltas(trace, &deltas))
    }

    fn grads_from_deltas(&self, trace: &ForwardTrace, deltas: &[Vec<f64>]) -> Gradients {
        let mut weights = Vec::with_capacity(self.depth());
        let mut biases = Vec::with_capacity(self.depth());
        for k in 0..self.depth() {
            let prev: &[f64] =
                if k == 0 { trace.input.data() } else { trace.outputs[k - 1].data() };
            let spec = &self.specs[k];
            let mut grad = vec![0.0; spec.out_dim * spec.in_dim];
            for (row, &d) in deltas[k].iter().enumerate() {
                let dst = &mut grad[row * spec.in_dim..(row + 1) * spec.in_dim];
                for (g, &p) in dst.iter_mut().zip(prev) {
                    *g = d * p;
                }
            }
            weights.push(
                Tensor::new(vec![spec.out_dim, spec.in_dim], grad).expect("shape by construction"),
            );
            biases.push(Tensor::vector(deltas[k].clone()));
        }
        Gradients { weights, biases }
    }

    /// Gradient of the loss w.r.t. the input vector.
    pub fn input_gradient(&self, trace: &ForwardTrace, t: &Tensor) -> Result<Tensor> {
        self.check_trace(trace, t)?;
        let deltas = self.deltas(trace, t);
        let spec = &self.specs[0];
        let mut grad = vec![0.0; spec.in_dim];
        matvec_transpose(self.weights[0].data(), &deltas[0], &mut grad, spec.out_dim, spec.in_dim);
        Ok(Tensor::vector(grad))
    }

    /// One SGD step: every parameter decreases by `lr * gradient`.
    pub fn sgd_step(&mut self, gradients: &Gradients, lr: f64) -> Result<()> {
        if gradients.weights.len() != self.depth() {
            return Err(Error::Shape("gradient layer count does not match net".into()));
        }
        for ((w, b), (gw, gb)) in self
            .weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .zip(gradients.weights.iter().zip(&gradients.biases))
        {
            if w.shape() != gw.shape() || b.shape() != gb.shape() {
                return Err(Error::Shape("gradient shapes do not match parameters".into()));
            }
            for (p, g) in w.data_mut().iter_mut().zip(gw.data()) {
                *p -= lr * g;
            }
            for (p, g) in b.data_mut().iter_mut().zip(gb.data()) {
                *p -= lr * g;
            }
        }
        Ok(())
    }

    /// Forward + backward + SGD step on one labeled pair. Returns the loss
    /// observed before the update.
    pub fn sgd_step_on_sample(&mut self, x: &Tensor, t: &Tensor, lr: f64) -> Result<f64> {
        let trace = self.forward(x, t)?;
        let grads = self.backprop_weights(&trace, t)?;
        self.sgd_step(&grads, lr)?;
        Ok(trace.loss)
    }

    /// Mini-batch SGD training with a seeded shuffle. Gradients are averaged
    /// over each batch. Returns the training-set accuracy after every epoch.
    pub fn train(
        &mut self,
        dataset: &LabeledDataset,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if dataset.len() == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            shuffle(&mut order, &mut rng);
            for batch in order.chunks(batch_size) {
                let mut acc = Gradients::zeros_like(self);
                for &i in batch {
                    let trace = self.forward(dataset.input(i), dataset.label(i))?;
                    let grads = self.backprop_weights(&trace, dataset.label(i))?;
                    acc.accumulate(&grads);
                }
                acc.scale(1.0 / batch.len() as f64);
                self.sgd_step(&acc, lr)?;
            }
            history.push(self.accuracy(dataset)?);
        }
        Ok(history)
    }

    /// Fraction of samples whose argmax output equals the argmax label.
    pub fn accuracy(&self, dataset: &LabeledDataset) -> Result<f64> {
        if dataset.len() == 0 {
            return Err(Error::EmptyDataset);
        }
        let hits = crate::attack::maybe_par_map_indices(dataset.len(), |i| {
            let out = self.output_unchecked(dataset.input(i).data());
            usize::from(Tensor::vector(out).argmax() == dataset.label(i).argmax())
        });
        Ok(hits.iter().sum::<usize>() as f64 / dataset.len() as f64)
    }

    /// Layer-k sensitivity computed by the closed-form sigmoid/MSE recursion,
    /// independent of the backprop code path. Test oracle only.
    pub fn analytic_delta(&self, trace: &ForwardTrace, t: &Tensor, k: usize) -> Result<Tensor> {
        if self.loss_kind != LossKind::Mse
            || self.specs.iter().any(|s| s.activation != Activation::Sigmoid)
        {
            return Err(Error::UnsupportedConfig(
                "analytic delta is defined for all-sigmoid nets with mse loss".into(),
            ));
        }
        self.check_trace(trace, t)?;
        if k >= self.depth() {
            return Err(Error::InvalidArgument(format!(
                "layer index {k} out of range for depth {}",
                self.depth()
            )));
        }
        let depth = self.depth();
        // output layer: (o - t) ∘ o ∘ (1 - o)
        let out = trace.outputs[depth - 1].data();
        let mut delta: Vec<f64> = out
            .iter()
            .zip(t.data())
            .map(|(o, ti)| (o - ti) * o * (1.0 - o))
            .collect();
        // inner layers: (w_{k+1}^T δ_{k+1}) ∘ o_k ∘ (1 - o_k)
        for layer in (k..depth - 1).rev() {
            let w_next = self.weights[layer + 1].data();
            let (rows, cols) = (self.specs[layer + 1].out_dim, self.specs[layer + 1].in_dim);
            let mut back = vec![0.0; cols];
            matvec_transpose(w_next, &delta, &mut back, rows, cols);
            let o = trace.outputs[layer].data();
            delta = back.iter().zip(o).map(|(g, &oi)| g * oi * (1.0 - oi)).collect();
        }
        Ok(Tensor::vector(delta))
    }

    /// Write a self-describing JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| Error::Parse(e.to_string()))
    }

    /// Load a checkpoint written by [`FeedForwardNet::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// out += W x for a row-major (rows x cols) matrix.
fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for (row, o) in out.iter_mut().enumerate().take(rows) {
        let r = &w[row * cols..(row + 1) * cols];
        let mut sum = 0.0;
        for (a, b) in r.iter().zip(x) {
            sum += a * b;
        }
        *o += sum;
    }
}

/// out = W^T d for a row-major (rows x cols) matrix.
fn matvec_transpose(w: &[f64], d: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for (row, &dv) in d.iter().enumerate().take(rows) {
        let r = &w[row * cols..(row + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(r) {
            *o += dv * wv;
        }
    }
}

/// Fisher-Yates with the provided RNG; kept local so shuffle order is part
/// of the engine's determinism contract.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
