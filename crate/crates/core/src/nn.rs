//! Dense feed-forward network with exact manual backpropagation.
//!
//! Every layer stores an `(in + 1) × out` weight tensor whose last row is the
//! bias, i.e. the layer sees its input with a constant `1` appended. A model
//! without hidden layers is therefore the softmax linear model `o = Wᵀ[x; 1]`.
//!
//! # Parameter order
//!
//! [`GradientVector`] and checkpoints flatten parameters layer by layer; inside
//! a layer the `(in + 1) × out` tensor is laid out row-major, so entry
//! `(i, k)` (input `i`, unit `k`) sits at offset `i * out + k` and the bias
//! row comes last.
//!
//! # Representations
//!
//! The representation of a sample is the concatenation of every hidden layer
//! output followed by the logits. Biases never appear in it.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::tensor::{gemm_view, Tensor2, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    #[inline]
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }
}

/// Which layer outputs form the representation handed to auxiliary losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationTap {
    /// All hidden outputs and the logits.
    #[default]
    AllLayers,
    /// All hidden outputs, no logits.
    Hidden,
    /// Logits only.
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    activation: Activation,
    layers: Vec<Tensor2>,
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, activation)?;
        for layer in &mut model.layers {
            let fan_in = layer.rows() - 1;
            let fan_out = layer.cols();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = fan_in * fan_out;
            for w in &mut layer.data_mut()[..n] {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(model)
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "layer dims must list at least input and output widths, all non-zero: {layer_dims:?}"
            )));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| Tensor2::zeros(w[0] + 1, w[1]))
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            layers,
        })
    }

    /// Rebuilds a model from a flat parameter vector in the documented order.
    pub fn from_flat(layer_dims: &[usize], activation: Activation, flat: &[f64]) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, activation)?;
        if flat.len() != model.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                model.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for layer in &mut model.layers {
            let n = layer.data().len();
            layer.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Tensor2] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Tensor2] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_dims.last().expect("at least two dims")
    }

    pub fn n_hidden(&self) -> usize {
        self.layer_dims.len() - 2
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_dims[1..self.layer_dims.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.data().len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.data());
        }
        out
    }

    /// Width of the representation produced under `tap`.
    pub fn representation_width(&self, tap: RepresentationTap) -> Result<usize> {
        let hidden: usize = self.hidden_widths().iter().sum();
        match tap {
            RepresentationTap::AllLayers => Ok(hidden + self.n_classes()),
            RepresentationTap::Logits => Ok(self.n_classes()),
            RepresentationTap::Hidden if hidden == 0 => Err(Error::Config(
                "hidden representation tap requested on a model without hidden layers".into(),
            )),
            RepresentationTap::Hidden => Ok(hidden),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            params: self.flat_params(),
        };
        let text = serde_json::to_string(&ckpt)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported checkpoint format `{}`", ckpt.format),
            });
        }
        Self::from_flat(&ckpt.layer_dims, ckpt.activation, &ckpt.params)
    }
}

pub const CHECKPOINT_FORMAT: &str = "drlab-mlp-v1";

/// On-disk checkpoint: shape header plus the flat parameters in
/// [`GradientVector`] order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub flat: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self { flat: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Tensor2,
    /// Pre-activations of each hidden layer.
    pub pre_activations: Vec<Tensor2>,
    /// Hidden layer outputs `h_1 .. h_{L-1}`.
    pub per_layer_outputs: Vec<Tensor2>,
    pub logits: Tensor2,
    pub probabilities: Tensor2,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }

    pub fn representation(&self, tap: RepresentationTap) -> Result<Tensor2> {
        match tap {
            RepresentationTap::AllLayers => {
                let mut parts: Vec<&Tensor2> = self.per_layer_outputs.iter().collect();
                parts.push(&self.logits);
                Tensor2::hcat(&parts)
            }
            RepresentationTap::Logits => Ok(self.logits.clone()),
            RepresentationTap::Hidden => {
                if self.per_layer_outputs.is_empty() {
                    return Err(Error::Config(
                        "hidden representation tap requested on a model without hidden layers".into(),
                    ));
                }
                let parts: Vec<&Tensor2> = self.per_layer_outputs.iter().collect();
                Tensor2::hcat(&parts)
            }
        }
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits.iter_rows().map(argmax).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `out = input · W[..in] + bias`, written into a fresh tensor.
fn affine(input: &Tensor2, w: &Tensor2) -> Tensor2 {
    let in_dim = w.rows() - 1;
    let out_dim = w.cols();
    let mut out = Tensor2::zeros(input.rows(), out_dim);
    let bias = &w.data()[in_dim * out_dim..];
    for r in 0..input.rows() {
        out.row_mut(r).copy_from_slice(bias);
    }
    let wv = View {
        data: &w.data()[..in_dim * out_dim],
        rows: in_dim,
        cols: out_dim,
        trans: false,
    };
    let rows = input.rows();
    gemm_view(1.0, View::of(input), wv, 1.0, out.data_mut(), rows, out_dim);
    out
}

/// Row-wise softmax via max-shifted exponentials.
pub fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Mean softmax cross-entropy, computed with log-sum-exp.
pub fn cross_entropy(logits: &Tensor2, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub fn forward(model: &MlpModel, batch: &Tensor2) -> Result<ForwardTrace> {
    if batch.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            model.input_dim()
        )));
    }
    let n_layers = model.layers.len();
    let mut pre = Vec::with_capacity(n_layers - 1);
    let mut outs: Vec<Tensor2> = Vec::with_capacity(n_layers - 1);
    for (l, w) in model.layers.iter().enumerate().take(n_layers - 1) {
        let input = if l == 0 { batch } else { &outs[l - 1] };
        let z = affine(input, w);
        let mut h = z.clone();
        h.data_mut().iter_mut().for_each(|v| *v = model.activation.apply(*v));
        pre.push(z);
        outs.push(h);
    }
    let last_in = outs.last().unwrap_or(batch);
    let logits = affine(last_in, &model.layers[n_layers - 1]);
    let probabilities = softmax_rows(&logits);
    Ok(ForwardTrace {
        inputs: batch.clone(),
        pre_activations: pre,
        per_layer_outputs: outs,
        logits,
        probabilities,
    })
}

/// Loss values reported alongside a gradient.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValue {
    pub total: f64,
    pub cross_entropy: f64,
    /// Auxiliary loss before the λ weighting.
    pub auxiliary: f64,
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: LossValue,
    /// Gradient of the batch-mean composite loss.
    pub grad: GradientVector,
    /// Gradient for the objective's trainable scalar (R-Margin β).
    pub objective_grad: f64,
    pub per_sample: Option<Vec<GradientVector>>,
}

fn check_labels(model: &MlpModel, trace: &ForwardTrace, labels: &[usize]) -> Result<()> {
    if labels.len() != trace.batch_size() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            trace.batch_size()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.n_classes()) {
        return Err(Error::Shape(format!("label {bad} outside {} classes", model.n_classes())));
    }
    Ok(())
}

/// `P − Y` row by row. The true-class entry is `−Σ_{k≠y} p_k`, which keeps
/// full relative precision when `p_y` rounds to 1.
pub fn ce_logit_residuals(trace: &ForwardTrace, labels: &[usize]) -> Tensor2 {
    let mut eps = trace.probabilities.clone();
    for (r, &y) in labels.iter().enumerate() {
        let row = eps.row_mut(r);
        let rest: f64 = row.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, v)| v).sum();
        row[y] = -rest;
    }
    eps
}

/// Exact gradient of the composite objective on one batch.
///
/// Per-sample gradients are only defined for plain cross-entropy; asking for
/// them with an auxiliary pairwise loss is a configuration error.
pub fn backward(
    model: &MlpModel,
    trace: &ForwardTrace,
    labels: &[usize],
    objective: &mut Objective,
    per_sample: bool,
) -> Result<Backward> {
    check_labels(model, trace, labels)?;
    if per_sample && objective.has_auxiliary() {
        return Err(Error::Config(
            "per-sample gradients are only available for the cross-entropy objective".into(),
        ));
    }
    let b = labels.len().max(1) as f64;
    let ce = cross_entropy(&trace.logits, labels);
    let mut g_logits = ce_logit_residuals(trace, labels);

    let per_sample_out = if per_sample {
        Some(per_sample_from_residuals(model, trace, &g_logits))
    } else {
        None
    };
    g_logits.scale(1.0 / b);

    let aux = objective.evaluate(trace, labels)?;
    let weighted_aux = objective.spec.lambda * aux.value;
    let rep_grad = aux.rep_grad.map(|mut g| {
        g.scale(objective.spec.lambda);
        g
    });
    let grad = backprop(model, trace, g_logits, rep_grad.as_ref(), objective.spec.tap)?;
    Ok(Backward {
        loss: LossValue {
            total: ce + weighted_aux,
            cross_entropy: ce,
            auxiliary: aux.value,
        },
        grad,
        objective_grad: objective.spec.lambda * aux.beta_grad,
        per_sample: per_sample_out,
    })
}

/// Per-sample cross-entropy gradients (not divided by the batch size).
pub fn per_sample_gradients(model: &MlpModel, trace: &ForwardTrace, labels: &[usize]) -> Result<Vec<GradientVector>> {
    check_labels(model, trace, labels)?;
    let eps = ce_logit_residuals(trace, labels);
    Ok(per_sample_from_residuals(model, trace, &eps))
}

/// Backpropagates `dL/dlogits` plus an optional gradient on the representation
/// tap and returns the full parameter gradient.
pub fn backprop(
    model: &MlpModel,
    trace: &ForwardTrace,
    g_logits: Tensor2,
    rep_grad: Option<&Tensor2>,
    tap: RepresentationTap,
) -> Result<GradientVector> {
    let deltas = layer_deltas(model, trace, g_logits, rep_grad, tap)?;
    let mut grad = GradientVector::zeros(model.param_count());
    let mut off = 0;
    for (l, (w, delta)) in model.layers.iter().zip(&deltas).enumerate() {
        let in_dim = w.rows() - 1;
        let out_dim = w.cols();
        let input = if l == 0 { &trace.inputs } else { &trace.per_layer_outputs[l - 1] };
        let chunk = &mut grad.flat[off..off + (in_dim + 1) * out_dim];
        gemm_view(
            1.0,
            View::of(input).t(),
            View::of(delta),
            0.0,
            &mut chunk[..in_dim * out_dim],
            in_dim,
            out_dim,
        );
        let bias = &mut chunk[in_dim * out_dim..];
        for r in 0..delta.rows() {
            for (b, d) in bias.iter_mut().zip(delta.row(r)) {
                *b += d;
            }
        }
        off += (in_dim + 1) * out_dim;
    }
    Ok(grad)
}

/// Error signals `dL/dz_l` for every layer, input layer first.
fn layer_deltas(
    model: &MlpModel,
    trace: &ForwardTrace,
    g_logits: Tensor2,
    rep_grad: Option<&Tensor2>,
    tap: RepresentationTap,
) -> Result<Vec<Tensor2>> {
    let n_layers = model.layers.len();
    let n_hidden = n_layers - 1;
    let batch = trace.batch_size();
    // Column offsets of each tapped block inside the representation.
    let mut hidden_off = Vec::with_capacity(n_hidden);
    let mut logits_off = None;
    if let Some(rg) = rep_grad {
        let width = model.representation_width(tap)?;
        if rg.rows() != batch || rg.cols() != width {
            return Err(Error::Shape(format!(
                "representation gradient is {}x{}, expected {batch}x{width}",
                rg.rows(),
                rg.cols()
            )));
        }
        let mut off = 0;
        if matches!(tap, RepresentationTap::AllLayers | RepresentationTap::Hidden) {
            for w in model.hidden_widths() {
                hidden_off.push(Some(off));
                off += w;
            }
        }
        if matches!(tap, RepresentationTap::AllLayers | RepresentationTap::Logits) {
            logits_off = Some(off);
        }
    }
    hidden_off.resize(n_hidden, None);

    let mut g = g_logits;
    if let (Some(rg), Some(off)) = (rep_grad, logits_off) {
        add_block(&mut g, rg, off);
    }
    let mut deltas = vec![Tensor2::zeros(0, 0); n_layers];
    for l in (0..n_layers).rev() {
        if l == 0 {
            deltas[0] = g;
            break;
        }
        // Propagate to the output of hidden layer l-1 (h_l in 1-based terms).
        let w = &model.layers[l];
        let in_dim = w.rows() - 1;
        let out_dim = w.cols();
        let mut dh = Tensor2::zeros(batch, in_dim);
        let wv = View {
            data: &w.data()[..in_dim * out_dim],
            rows: in_dim,
            cols: out_dim,
            trans: true,
        };
        gemm_view(1.0, View::of(&g), wv, 0.0, dh.data_mut(), batch, in_dim);
        if let (Some(rg), Some(off)) = (rep_grad, hidden_off[l - 1]) {
            add_block(&mut dh, rg, off);
        }
        let z = &trace.pre_activations[l - 1];
        let h = &trace.per_layer_outputs[l - 1];
        for ((d, &zv), &hv) in dh.data_mut().iter_mut().zip(z.data()).zip(h.data()) {
            *d *= model.activation.derivative(zv, hv);
        }
        deltas[l] = std::mem::replace(&mut g, dh);
    }
    Ok(deltas)
}

fn add_block(dst: &mut Tensor2, src: &Tensor2, col_off: usize) {
    let w = dst.cols();
    for r in 0..dst.rows() {
        let s = &src.row(r)[col_off..col_off + w];
        for (d, v) in dst.row_mut(r).iter_mut().zip(s) {
            *d += v;
        }
    }
}

fn per_sample_from_residuals(model: &MlpModel, trace: &ForwardTrace, eps: &Tensor2) -> Vec<GradientVector> {
    let deltas = layer_deltas(model, trace, eps.clone(), None, RepresentationTap::AllLayers)
        .expect("no representation gradient, shapes fixed by forward");
    let total = model.param_count();
    (0..trace.batch_size())
        .map(|n| {
            let mut flat = Vec::with_capacity(total);
            for (l, delta) in deltas.iter().enumerate() {
                let input = if l == 0 { trace.inputs.row(n) } else { trace.per_layer_outputs[l - 1].row(n) };
                let d = delta.row(n);
                for &x in input {
                    flat.extend(d.iter().map(|v| x * v));
                }
                flat.extend_from_slice(d);
            }
            GradientVector { flat }
        })
        .collect()
}

/// `W ← W − lr · (grad + l1 · sign(W))`; the L1 term skips bias rows.
pub fn sgd_step(model: &mut MlpModel, grad: &GradientVector, lr: f64, l1_coeff: f64) -> Result<()> {
    if grad.len() != model.param_count() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, model has {} parameters",
            grad.len(),
            model.param_count()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !(l1_coeff >= 0.0) {
        return Err(Error::Config(format!("l1 coefficient must be non-negative, got {l1_coeff}")));
    }
    if !grad.is_finite() {
        return Err(Error::Divergence("non-finite gradient entries".into()));
    }
    let mut off = 0;
    for layer in &mut model.layers {
        let weights = (layer.rows() - 1) * layer.cols();
        let n = layer.data().len();
        let g = &grad.flat[off..off + n];
        for (i, (w, gv)) in layer.data_mut().iter_mut().zip(g).enumerate() {
            let l1 = if i < weights && l1_coeff > 0.0 { l1_coeff * sign(*w) } else { 0.0 };
            *w -= lr * (gv + l1);
        }
        off += n;
    }
    Ok(())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Classification accuracy of `model` on `(features, labels)`, evaluated in chunks.
pub fn accuracy(model: &MlpModel, features: &Tensor2, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let chunk = 2048;
    let mut start = 0;
    while start < labels.len() {
        let end = (start + chunk).min(labels.len());
        let idx: Vec<usize> = (start..end).collect();
        let trace = forward(model, &features.select_rows(&idx))?;
        correct += trace
            .predictions()
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, y)| p == y)
            .count();
        start = end;
    }
    Ok(correct as f64 / labels.len() as f64)
}
