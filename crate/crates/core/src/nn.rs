//! Minimal dense feed-forward network: ReLU hidden layers, softmax output,
//! mean categorical cross-entropy and plain mini-batch SGD.
//!
//! All arithmetic is `f64` and every routine is a pure function of its inputs
//! and seed, so two calls with the same arguments produce bit-identical
//! parameters.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Layer widths from input to output. Hidden layers use ReLU and the final
/// layer is a softmax over `output_dim()` classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ArchSpec {
    sizes: Vec<usize>,
}

impl ArchSpec {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "architecture needs at least an input and an output size, got {sizes:?}"
            )));
        }
        if let Some(pos) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!(
                "architecture layer {pos} has zero width in {sizes:?}"
            )));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated non-empty")
    }

    /// Number of weight layers (one fewer than the number of sizes).
    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Widest layer, input and output included.
    pub fn max_width(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

impl TryFrom<Vec<usize>> for ArchSpec {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        ArchSpec::new(sizes)
    }
}

impl From<ArchSpec> for Vec<usize> {
    fn from(arch: ArchSpec) -> Self {
        arch.sizes
    }
}

/// One dense layer. `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col]
    }

    /// Weights followed by biases.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(self.biases.iter()).copied()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for row in 0..self.out_dim {
            let w = &self.weights[row * self.in_dim..(row + 1) * self.in_dim];
            let dot: f64 = w.iter().zip(input).map(|(a, b)| a * b).sum();
            out.push(dot + self.biases[row]);
        }
    }
}

/// The parameters of a global or local model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: ArchSpec,
    layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Builds a model from explicit layers, checking them against `arch`.
    pub fn from_layers(arch: ArchSpec, layers: Vec<LayerParams>) -> Result<Self> {
        if layers.len() != arch.num_layers() {
            return Err(Error::shape(
                format!("{} layers", arch.num_layers()),
                format!("{} layers", layers.len()),
            ));
        }
        for (i, (layer, dims)) in layers.iter().zip(arch.sizes().windows(2)).enumerate() {
            if layer.in_dim != dims[0]
                || layer.out_dim != dims[1]
                || layer.weights.len() != dims[0] * dims[1]
                || layer.biases.len() != dims[1]
            {
                return Err(Error::shape(
                    format!("layer {i} of {}x{}", dims[1], dims[0]),
                    format!(
                        "{}x{} with {} weights, {} biases",
                        layer.out_dim,
                        layer.in_dim,
                        layer.weights.len(),
                        layer.biases.len()
                    ),
                ));
            }
        }
        let model = Self { arch, layers };
        if !model.is_finite() {
            return Err(Error::Domain("model contains non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn zeros(arch: &ArchSpec) -> Self {
        let layers = arch
            .sizes()
            .windows(2)
            .map(|w| LayerParams::zeros(w[0], w[1]))
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.values())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Applies `f` to every parameter in place.
    pub fn map_in_place(&mut self, mut f: impl FnMut(f64) -> f64) {
        for layer in &mut self.layers {
            for v in layer.values_mut() {
                *v = f(*v);
            }
        }
    }
}

/// Parameter-shaped gradient of the mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A labelled classification dataset with fixed feature dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        if dim == 0 || classes == 0 {
            return Err(Error::Config(format!(
                "dataset needs positive dimension and class count, got D={dim}, C={classes}"
            )));
        }
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != dim {
                return Err(Error::shape(
                    format!("record {i} with {dim} features"),
                    r.features.len(),
                ));
            }
            if r.label >= classes {
                return Err(Error::Domain(format!(
                    "record {i} has label {} but only {classes} classes",
                    r.label
                )));
            }
        }
        Ok(Self {
            dim,
            classes,
            records,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.features.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn into_records(self) -> Vec<Record> {
        self.records
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 16,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Uniform weights in `±1/sqrt(in_dim)`, zero biases.
pub fn init_model(arch: &ArchSpec, seed: u64) -> ModelParams {
    let mut rng = rng_from(seed);
    let mut model = ModelParams::zeros(arch);
    for layer in &mut model.layers {
        let bound = 1.0 / (layer.in_dim as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..bound);
        }
    }
    model
}

fn check_batch(model: &ModelParams, batch: &[Vec<f64>]) -> Result<()> {
    let d = model.arch.input_dim();
    if let Some((i, row)) = batch.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(Error::shape(
            format!("{d} input features"),
            format!("{} in row {i}", row.len()),
        ));
    }
    Ok(())
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Pre-activations of every layer for one input row; the last entry holds
/// the softmax probabilities instead of logits.
fn forward_trace(model: &ModelParams, input: &[f64]) -> Vec<Vec<f64>> {
    let n = model.layers.len();
    let mut trace: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut act = input.to_vec();
    for (l, layer) in model.layers.iter().enumerate() {
        let mut z = Vec::with_capacity(layer.out_dim);
        layer.affine(&act, &mut z);
        if l + 1 == n {
            softmax_in_place(&mut z);
            trace.push(z);
        } else {
            act = z.iter().map(|&v| v.max(0.0)).collect();
            trace.push(z);
        }
    }
    trace
}

/// Class probabilities for every row of `batch`.
pub fn forward(model: &ModelParams, batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_batch(model, batch)?;
    Ok(batch
        .iter()
        .map(|row| {
            forward_trace(model, row)
                .pop()
                .expect("model has at least one layer")
        })
        .collect())
}

/// Mean categorical cross-entropy.
pub fn loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape(
            format!("{} label(s)", probs.len()),
            labels.len(),
        ));
    }
    if probs.is_empty() {
        return Err(Error::Domain("cannot score an empty batch".into()));
    }
    let mut total = 0.0;
    for (row, &label) in probs.iter().zip(labels) {
        let p = row.get(label).copied().ok_or_else(|| {
            Error::Domain(format!("label {label} out of range for {} classes", row.len()))
        })?;
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    hits as f64 / probs.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Analytic gradient of the mean cross-entropy over `batch`.
pub fn gradient(model: &ModelParams, batch: &[Vec<f64>], labels: &[usize]) -> Result<Gradients> {
    check_batch(model, batch)?;
    if batch.len() != labels.len() {
        return Err(Error::shape(format!("{} label(s)", batch.len()), labels.len()));
    }
    if batch.is_empty() {
        return Err(Error::Domain("cannot differentiate an empty batch".into()));
    }
    let classes = model.arch.output_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let mut grads: Vec<LayerParams> = model
        .layers
        .iter()
        .map(|l| LayerParams::zeros(l.in_dim, l.out_dim))
        .collect();
    let scale = 1.0 / batch.len() as f64;

    for (input, &label) in batch.iter().zip(labels) {
        let trace = forward_trace(model, input);
        // dL/dz for the output layer: p - onehot
        let mut delta: Vec<f64> = trace.last().expect("non-empty").clone();
        delta[label] -= 1.0;
        for v in &mut delta {
            *v *= scale;
        }

        for l in (0..model.layers.len()).rev() {
            let layer = &model.layers[l];
            let prev_act: Vec<f64> = if l == 0 {
                input.clone()
            } else {
                trace[l - 1].iter().map(|&v| v.max(0.0)).collect()
            };
            let g = &mut grads[l];
            for (row, &d) in delta.iter().enumerate() {
                g.biases[row] += d;
                let gw = &mut g.weights[row * layer.in_dim..(row + 1) * layer.in_dim];
                for (w, &a) in gw.iter_mut().zip(&prev_act) {
                    *w += d * a;
                }
            }
            if l > 0 {
                let z_prev = &trace[l - 1];
                let mut next = vec![0.0; layer.in_dim];
                for (row, &d) in delta.iter().enumerate() {
                    for (col, n) in next.iter_mut().enumerate() {
                        *n += layer.weight(row, col) * d;
                    }
                }
                for (n, &z) in next.iter_mut().zip(z_prev) {
                    if z <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
    }
    Ok(Gradients { layers: grads })
}

/// Mini-batch SGD over `epochs` passes. The input model is left untouched.
pub fn train_epochs(
    model: &ModelParams,
    data: &Dataset,
    hp: &Hyperparams,
    seed: u64,
) -> Result<ModelParams> {
    hp.validate()?;
    if data.dim() != model.arch.input_dim() {
        return Err(Error::shape(
            format!("{} input features", model.arch.input_dim()),
            data.dim(),
        ));
    }
    if data.classes() > model.arch.output_dim() {
        return Err(Error::shape(
            format!("at most {} classes", model.arch.output_dim()),
            data.classes(),
        ));
    }

    let mut rng = rng_from(seed);
    let mut params = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch_size) {
            let batch: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| data.records[i].features.clone())
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.records[i].label).collect();
            let grads = gradient(&params, &batch, &labels)?;
            for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
                for (p, d) in layer.values_mut().zip(g.values()) {
                    *p -= hp.learning_rate * d;
                }
            }
            step += 1;
            if !params.is_finite() {
                return Err(Error::Diverged { step });
            }
        }
    }
    Ok(params)
}
