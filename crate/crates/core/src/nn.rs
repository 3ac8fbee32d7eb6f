//! Dense autoencoder: forward pass, backpropagation and mini-batch training
//! on a per-feature mean-squared-error loss.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHECKPOINT_HEADER: &str = "fedthresh-model v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One fully connected layer. `weights` has shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Weights and biases of an autoencoder whose output dimension equals its
/// input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

/// Gradient of the loss with respect to every layer's weights and bias.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

/// Hidden sizes used when none are configured: `ceil(d/2), ceil(d/4)`.
pub fn default_hidden_dims(input_dim: usize) -> Vec<usize> {
    vec![input_dim.div_ceil(2).max(1), input_dim.div_ceil(4).max(1)]
}

impl ModelParams {
    /// Builds a model from explicit layers, checking that dimensions chain and
    /// that the network maps its input space back onto itself.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a model needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.in_dim() == 0 || layer.out_dim() == 0 {
                return Err(Error::invalid(format!("layer {k} has a zero dimension")));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::invalid(format!(
                    "layer {k}: bias length {} does not match out_dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if k > 0 && layers[k - 1].out_dim() != layer.in_dim() {
                return Err(Error::invalid(format!(
                    "layer {k}: in_dim {} does not chain with previous out_dim {}",
                    layer.in_dim(),
                    layers[k - 1].out_dim()
                )));
            }
        }
        let first = layers[0].in_dim();
        let last = layers[layers.len() - 1].out_dim();
        if first != last {
            return Err(Error::invalid(format!(
                "autoencoder must reconstruct its input: in_dim {first} != out_dim {last}"
            )));
        }
        Ok(Self { layers })
    }

    /// Symmetric encoder/decoder `input -> hidden... -> mirrored hidden -> input`
    /// with Glorot-uniform weights and zero biases.
    pub fn init(input_dim: usize, hidden_dims: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be at least 1"));
        }
        if hidden_dims.is_empty() {
            return Err(Error::invalid("hidden_dims must not be empty"));
        }
        if hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden dimensions must be at least 1"));
        }

        let mut dims = Vec::with_capacity(hidden_dims.len() * 2 + 1);
        dims.push(input_dim);
        dims.extend_from_slice(hidden_dims);
        dims.extend(hidden_dims[..hidden_dims.len() - 1].iter().rev());
        dims.push(input_dim);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation: if k + 1 == n_layers {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Layer widths from input to output, e.g. `[9, 4, 2, 4, 9]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    /// True when both models have the same layer shapes and activations.
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.dim() == b.weights.dim() && a.activation == b.activation
            })
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch has {} columns, model expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Pre-activations and activations of every layer; `acts[0]` is the input.
    fn forward_trace(&self, batch: ArrayView2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(batch.to_owned());
        for layer in &self.layers {
            let z = acts.last().unwrap().dot(&layer.weights.t()) + &layer.bias;
            let a = match layer.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }

    /// Reconstruction of every row of `batch`.
    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let mut a = batch.to_owned();
        for layer in &self.layers {
            a = a.dot(&layer.weights.t()) + &layer.bias;
            if layer.activation == Activation::Relu {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(a)
    }

    /// Per-row reconstruction error: mean over features of the squared residual.
    pub fn mse_per_sample(&self, data: ArrayView2<f64>) -> Result<Vec<f64>> {
        if data.nrows() == 0 {
            return Ok(Vec::new());
        }
        let recon = self.forward(data)?;
        let dim = data.ncols() as f64;
        Ok(Zip::from(data.rows())
            .and(recon.rows())
            .map_collect(|x, r| {
                x.iter()
                    .zip(r.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / dim
            })
            .to_vec())
    }

    /// Mean reconstruction loss over the batch and its analytic gradient.
    pub fn loss_and_gradients(&self, batch: ArrayView2<f64>) -> Result<(f64, Gradients)> {
        self.check_input(&batch)?;
        if batch.nrows() == 0 {
            return Err(Error::invalid("cannot compute a loss on an empty batch"));
        }
        let (pre, acts) = self.forward_trace(batch);
        let output = acts.last().unwrap();
        let residual = output - &batch;
        let scale = 1.0 / (batch.nrows() * batch.ncols()) as f64;
        let loss = residual.iter().map(|r| r * r).sum::<f64>() * scale;

        let mut delta = residual * (2.0 * scale);
        let mut grads = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                Zip::from(&mut delta)
                    .and(&pre[k])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let grad_w = delta.t().dot(&acts[k]);
            let grad_b = delta.sum_axis(Axis(0));
            if k > 0 {
                delta = delta.dot(&layer.weights);
            }
            grads.push((grad_w, grad_b));
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    /// Mutable access for optimizers and hand-built test fixtures.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Text checkpoint: header line, layer count, then per layer a
    /// `layer <in> <out> <activation>` line, the weight rows and the bias row.
    /// Values are written with 17 significant digits so they read back exactly.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
        writeln!(out, "layers {}", self.layers.len()).unwrap();
        let fmt_row = |out: &mut String, row: &mut dyn Iterator<Item = &f64>| {
            let cells: Vec<String> = row.map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", cells.join(" ")).unwrap();
        };
        for layer in &self.layers {
            writeln!(
                out,
                "layer {} {} {}",
                layer.in_dim(),
                layer.out_dim(),
                layer.activation.name()
            )
            .unwrap();
            for row in layer.weights.rows() {
                fmt_row(&mut out, &mut row.iter());
            }
            fmt_row(&mut out, &mut layer.bias.iter());
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::invalid(format!("checkpoint truncated: expected {what}")))
        };
        let bad = |line: usize, msg: &str| Error::Parse {
            row: line + 1,
            col: 0,
            msg: msg.to_string(),
        };

        let (n, header) = next("header")?;
        if header.trim() != CHECKPOINT_HEADER {
            return Err(bad(n, "unrecognized checkpoint header"));
        }
        let (n, count_line) = next("layer count")?;
        let count: usize = count_line
            .strip_prefix("layers ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(n, "expected `layers <count>`"))?;

        let parse_row = |n: usize, line: &str, width: usize| -> Result<Vec<f64>> {
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(n, &e.to_string()))?;
            if vals.len() != width {
                return Err(bad(n, &format!("expected {width} values, found {}", vals.len())));
            }
            Ok(vals)
        };

        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, spec) = next("layer line")?;
            let parts: Vec<&str> = spec.split_whitespace().collect();
            let (in_dim, out_dim, act) = match parts.as_slice() {
                ["layer", i, o, a] => (
                    i.parse::<usize>().map_err(|e| bad(n, &e.to_string()))?,
                    o.parse::<usize>().map_err(|e| bad(n, &e.to_string()))?,
                    Activation::parse(a).ok_or_else(|| bad(n, "unknown activation"))?,
                ),
                _ => return Err(bad(n, "expected `layer <in> <out> <activation>`")),
            };
            let mut flat = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..out_dim {
                let (n, row) = next("weight row")?;
                flat.extend(parse_row(n, row, in_dim)?);
            }
            let (n, row) = next("bias row")?;
            let bias = parse_row(n, row, out_dim)?;
            layers.push(Layer {
                weights: Array2::from_shape_vec((out_dim, in_dim), flat)
                    .map_err(|e| Error::invalid(e.to_string()))?,
                bias: Array1::from(bias),
                activation: act,
            });
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 2,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be a finite non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Result of a local training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    /// Mean per-sample loss over each epoch, measured before each batch update.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

struct AdamState {
    step: i32,
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
}

impl AdamState {
    fn new(model: &ModelParams) -> Self {
        let zeros: Vec<_> = model
            .layers
            .iter()
            .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.bias.len())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

fn apply_update(
    model: &mut ModelParams,
    grads: &Gradients,
    cfg: &TrainConfig,
    adam: &mut Option<AdamState>,
) {
    let lr = cfg.learning_rate;
    match (cfg.optimizer, adam) {
        (Optimizer::Adam { beta1, beta2, epsilon }, Some(state)) => {
            state.step += 1;
            let bc1 = 1.0 - beta1.powi(state.step);
            let bc2 = 1.0 - beta2.powi(state.step);
            for (k, layer) in model.layers.iter_mut().enumerate() {
                let (gw, gb) = &grads.layers[k];
                let (mw, mb) = &mut state.m[k];
                let (vw, vb) = &mut state.v[k];
                Zip::from(&mut layer.weights)
                    .and(gw)
                    .and(mw)
                    .and(vw)
                    .for_each(|w, &g, m, v| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + epsilon);
                    });
                Zip::from(&mut layer.bias)
                    .and(gb)
                    .and(mb)
                    .and(vb)
                    .for_each(|b, &g, m, v| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *b -= lr * (*m / bc1) / ((*v / bc2).sqrt() + epsilon);
                    });
            }
        }
        _ => {
            for (layer, (gw, gb)) in model.layers.iter_mut().zip(&grads.layers) {
                layer.weights.scaled_add(-lr, gw);
                layer.bias.scaled_add(-lr, gb);
            }
        }
    }
}

/// Runs `cfg.local_epochs` epochs of mini-batch gradient descent on the
/// reconstruction loss. Row order is reshuffled every epoch from `cfg.seed`.
pub fn train_local(
    model: &ModelParams,
    data: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.nrows() == 0 {
        return Err(Error::invalid("training data is empty"));
    }
    model.check_input(&data)?;

    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut adam = matches!(cfg.optimizer, Optimizer::Adam { .. }).then(|| AdamState::new(&model));
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);

    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut weighted_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(Axis(0), chunk);
            let (loss, grads) = model.loss_and_gradients(batch.view())?;
            if !loss.is_finite() {
                return Err(Error::DivergedTraining { epoch });
            }
            weighted_loss += loss * chunk.len() as f64;
            apply_update(&mut model, &grads, cfg, &mut adam);
        }
        if !model.is_finite() {
            return Err(Error::DivergedTraining { epoch });
        }
        epoch_losses.push(weighted_loss / data.nrows() as f64);
    }

    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}
