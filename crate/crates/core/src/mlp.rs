//! Fully connected ReLU classifier with a softmax negative log-likelihood
//! head and a hand-written reverse pass.
//!
//! Parameters are stored as `fc{k}.weight` with shape `(out, in)` followed by
//! `fc{k}.bias` with shape `(out)`, for `k = 1..=L`. Hidden layers use ReLU
//! (derivative 0 at 0); the last layer produces logits.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DrmError, Result};
use crate::losses::{LossModel, Sample};
use crate::param::{Layer, ParamVector};
use crate::rng::{stream_rng, STREAM_INIT};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(DrmError::InvalidConfig(format!(
                "all network dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` for every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.num_classes)) {
            dims.push((h, fan_in));
            fan_in = h;
        }
        dims
    }

    pub fn zeros(&self) -> ParamVector {
        let mut layers = Vec::new();
        for (k, (out, inp)) in self.layer_dims().into_iter().enumerate() {
            layers.push(Layer::zeros(format!("fc{}.weight", k + 1), vec![out, inp]));
            layers.push(Layer::zeros(format!("fc{}.bias", k + 1), vec![out]));
        }
        ParamVector::new(layers).expect("generated layer names are unique")
    }

    /// Recover the architecture from a checkpoint laid out like [`MlpSpec::zeros`].
    pub fn from_params(w: &ParamVector, seed: u64) -> Result<Self> {
        let bad = || DrmError::ShapeMismatch("parameters do not describe an fc1..fcK network".into());
        let depth = w.layers().len() / 2;
        if depth == 0 {
            return Err(bad());
        }
        let weight_shape = |k: usize| -> Result<(usize, usize)> {
            match w.layer(&format!("fc{k}.weight")).map(|l| l.shape()) {
                Some(&[out, inp]) => Ok((out, inp)),
                _ => Err(bad()),
            }
        };
        let (_, input_dim) = weight_shape(1)?;
        let mut hidden_dims = Vec::new();
        for k in 1..depth {
            hidden_dims.push(weight_shape(k)?.0);
        }
        let spec = MlpSpec {
            input_dim,
            hidden_dims,
            num_classes: weight_shape(depth)?.0,
            seed,
        };
        spec.validate()?;
        spec.zeros().check_compatible(w).map_err(|_| bad())?;
        Ok(spec)
    }
}

/// He-scaled normal weights `N(0, 2 / fan_in)`, zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<ParamVector> {
    spec.validate()?;
    let mut w = spec.zeros();
    for (k, layer) in w.layers_mut().iter_mut().enumerate() {
        if k % 2 == 1 {
            continue;
        }
        let fan_in = layer.shape()[1];
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        layer.values_mut().iter_mut().for_each(|x| *x = normal.sample(rng));
    }
    Ok(w)
}

/// `out = W x + b` with `W` row-major `(out.len(), x.len())`.
fn affine(weight: &[f64], bias: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let n_in = x.len();
    for (row, b) in weight.chunks_exact(n_in).zip(bias) {
        let mut acc = *b;
        for (a, xi) in row.iter().zip(x) {
            acc += a * xi;
        }
        out.push(acc);
    }
}

fn check_params(spec: &MlpSpec, w: &ParamVector) -> Result<()> {
    let expected = spec.layer_dims();
    if w.layers().len() != 2 * expected.len() {
        return Err(DrmError::ShapeMismatch(format!(
            "expected {} parameter layers, got {}",
            2 * expected.len(),
            w.layers().len()
        )));
    }
    for (k, (out, inp)) in expected.into_iter().enumerate() {
        let (wl, bl) = (&w.layers()[2 * k], &w.layers()[2 * k + 1]);
        if wl.shape() != [out, inp] || bl.shape() != [out] {
            return Err(DrmError::ShapeMismatch(format!(
                "layer {}: expected ({out},{inp}) and ({out}), got {:?} and {:?}",
                k + 1,
                wl.shape(),
                bl.shape()
            )));
        }
    }
    Ok(())
}

/// Activations of one forward pass: `acts[0]` is the input, `acts[k]` the
/// output of affine layer `k` (after ReLU for hidden layers), and the last
/// entry holds the logits.
struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    fn new(spec: &MlpSpec) -> Self {
        Trace {
            acts: vec![Vec::new(); spec.hidden_dims.len() + 2],
        }
    }

    fn run(&mut self, w: &ParamVector, x: &[f64]) {
        let layers = w.layers();
        let n_affine = layers.len() / 2;
        self.acts[0].clear();
        self.acts[0].extend_from_slice(x);
        for k in 0..n_affine {
            let (prev, rest) = self.acts.split_at_mut(k + 1);
            let out = &mut rest[0];
            affine(layers[2 * k].values(), layers[2 * k + 1].values(), &prev[k], out);
            if k + 1 < n_affine {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    fn logits(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

fn check_input(spec: &MlpSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(DrmError::ShapeMismatch(format!(
            "input has {} features, network expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    Ok(())
}

pub fn forward(spec: &MlpSpec, w: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    check_params(spec, w)?;
    check_input(spec, x)?;
    let mut trace = Trace::new(spec);
    trace.run(w, x);
    Ok(trace.logits().to_vec())
}

/// `-log softmax(logits)[label]`, evaluated with the max-shift.
pub fn nll_softmax(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let nll = max + sum.ln() - logits[label];
    // Clip rounding below zero but let NaN through.
    if nll < 0.0 {
        0.0
    } else {
        nll
    }
}

/// Predicted class: first index of the largest logit.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

fn check_label(spec: &MlpSpec, z: &Sample) -> Result<()> {
    if z.label >= spec.num_classes {
        return Err(DrmError::ShapeMismatch(format!(
            "label {} outside {} classes",
            z.label, spec.num_classes
        )));
    }
    Ok(())
}

/// Mean NLL over the batch (in batch order).
pub fn batch_loss(spec: &MlpSpec, w: &ParamVector, batch: &[&Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(DrmError::Empty("batch"));
    }
    check_params(spec, w)?;
    let mut trace = Trace::new(spec);
    let mut total = 0.0;
    for z in batch {
        check_input(spec, &z.features)?;
        check_label(spec, z)?;
        trace.run(w, &z.features);
        total += nll_softmax(trace.logits(), z.label);
    }
    Ok(total / batch.len() as f64)
}

/// Mean NLL over the batch and its exact gradient.
pub fn loss_and_grad(spec: &MlpSpec, w: &ParamVector, batch: &[&Sample]) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(DrmError::Empty("batch"));
    }
    check_params(spec, w)?;
    let layers = w.layers();
    let n_affine = layers.len() / 2;
    let mut grad = w.zeros_like();
    let mut trace = Trace::new(spec);
    let mut delta: Vec<f64> = Vec::new();
    let mut next_delta: Vec<f64> = Vec::new();
    let mut total = 0.0;
    for z in batch {
        check_input(spec, &z.features)?;
        check_label(spec, z)?;
        trace.run(w, &z.features);
        let logits = trace.logits();
        total += nll_softmax(logits, z.label);

        // d nll / d logits = softmax - onehot
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        delta.clear();
        delta.extend(exps.iter().map(|e| e / sum));
        delta[z.label] -= 1.0;

        for k in (0..n_affine).rev() {
            let input = &trace.acts[k];
            let n_in = input.len();
            {
                let glayers = grad.layers_mut();
                let gw = glayers[2 * k].values_mut();
                for (row, d) in gw.chunks_exact_mut(n_in).zip(&delta) {
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                let gb = glayers[2 * k + 1].values_mut();
                for (g, d) in gb.iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            if k == 0 {
                break;
            }
            // Back through W^T, then the ReLU of layer k-1's output.
            let weight = layers[2 * k].values();
            next_delta.clear();
            next_delta.resize(n_in, 0.0);
            for (row, d) in weight.chunks_exact(n_in).zip(&delta) {
                for (nd, a) in next_delta.iter_mut().zip(row) {
                    *nd += a * d;
                }
            }
            for (nd, a) in next_delta.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *nd = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut next_delta);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

/// Fraction of samples whose predicted class equals their label.
pub fn accuracy(spec: &MlpSpec, w: &ParamVector, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(DrmError::Empty("dataset"));
    }
    check_params(spec, w)?;
    let mut trace = Trace::new(spec);
    let mut correct = 0usize;
    for z in data {
        check_input(spec, &z.features)?;
        trace.run(w, &z.features);
        if argmax(trace.logits()) == z.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// The network as a [`LossModel`].
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    template: ParamVector,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let template = spec.zeros();
        Ok(Mlp { spec, template })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Initial parameters drawn from the spec's own seed.
    pub fn init(&self) -> ParamVector {
        init_params(&self.spec, &mut stream_rng(self.spec.seed, STREAM_INIT))
            .expect("spec validated in constructor")
    }
}

impl LossModel for Mlp {
    fn template(&self) -> &ParamVector {
        &self.template
    }

    fn eval(&self, w: &ParamVector, z: &Sample) -> Result<f64> {
        batch_loss(&self.spec, w, &[z])
    }

    fn grad(&self, w: &ParamVector, z: &Sample) -> Result<ParamVector> {
        Ok(loss_and_grad(&self.spec, w, &[z])?.1)
    }

    fn batch_loss(&self, w: &ParamVector, batch: &[&Sample]) -> Result<f64> {
        batch_loss(&self.spec, w, batch)
    }

    fn batch_loss_and_grad(&self, w: &ParamVector, batch: &[&Sample]) -> Result<(f64, ParamVector)> {
        loss_and_grad(&self.spec, w, batch)
    }

    fn accuracy(&self, w: &ParamVector, data: &[Sample]) -> Option<Result<f64>> {
        Some(accuracy(&self.spec, w, data))
    }
}
