//! Softmax classifier heads over feature vectors.
//!
//! Two architectures are supported: a single linear layer (`Arch::Linear`) and
//! a one-hidden-layer ReLU network (`Arch::Mlp`). Parameters are stored as a
//! list of dense layers, so aggregation and optimisation treat both the same
//! way.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Linear,
    Mlp { hidden: usize },
}

impl FromStr for Arch {
    type Err = Error;

    /// `linear`, or `mlp:<hidden units>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "linear" {
            return Ok(Arch::Linear);
        }
        if let Some(h) = s.strip_prefix("mlp:") {
            let hidden: usize = h
                .parse()
                .map_err(|_| Error::invalid(format!("invalid hidden width {h:?}")))?;
            if hidden == 0 {
                return Err(Error::invalid("hidden width must be positive"));
            }
            return Ok(Arch::Mlp { hidden });
        }
        Err(Error::invalid(format!(
            "unknown architecture {s:?} (expected linear or mlp:<hidden>)"
        )))
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Linear => f.write_str("linear"),
            Arch::Mlp { hidden } => write!(f, "mlp:{hidden}"),
        }
    }
}

/// Dense layer computing `x W^T + b`; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Input to output order; the last layer produces logits.
    pub layers: Vec<Layer>,
}

impl ModelParams {
    pub fn zeros(arch: Arch, input_dim: usize, num_classes: usize) -> Self {
        let layers = match arch {
            Arch::Linear => vec![Layer::zeros(num_classes, input_dim)],
            Arch::Mlp { hidden } => vec![
                Layer::zeros(hidden, input_dim),
                Layer::zeros(num_classes, hidden),
            ],
        };
        Self {
            arch,
            input_dim,
            num_classes,
            layers,
        }
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self.input_dim == other.input_dim
            && self.num_classes == other.num_classes
    }

    pub fn output_layer(&self) -> &Layer {
        self.layers.last().expect("at least one layer")
    }

    /// Width of the penultimate representation.
    pub fn embedding_dim(&self) -> usize {
        match self.arch {
            Arch::Linear => self.input_dim,
            Arch::Mlp { hidden } => hidden,
        }
    }

    /// All scalars in a fixed order: per layer, weights row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Mutable views over every tensor, in [`flatten`](Self::flatten) order.
    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = ndarray::ArrayViewMutD<'_, f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.view_mut().into_dyn(), l.bias.view_mut().into_dyn()])
    }

    pub(crate) fn tensors(&self) -> impl Iterator<Item = ndarray::ArrayViewD<'_, f64>> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.view().into_dyn(), l.bias.view().into_dyn()])
    }

    fn weights_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    fn check_input(&self, features: ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: features.ncols(),
            });
        }
        Ok(())
    }
}

/// Hyperparameters of local SGD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub local_epochs: usize,
    /// `None`: the whole labelled set when it has at most 64 samples, else 64.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0001,
            local_epochs: 10,
            batch_size: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }

    fn effective_batch(&self, n: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(n),
            None if n <= 64 => n,
            None => 64,
        }
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params(arch: Arch, input_dim: usize, num_classes: usize, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(arch, input_dim, num_classes);
    let mut rng = seed::rng(seed);
    for layer in &mut params.layers {
        let bound = 1.0 / (layer.weight.ncols().max(1) as f64).sqrt();
        layer
            .weight
            .mapv_inplace(|_| rng.random_range(-bound..=bound));
    }
    params
}

struct Forward {
    /// Post-activation hidden layer (MLP only).
    hidden: Option<Array2<f64>>,
    logits: Array2<f64>,
}

fn forward(params: &ModelParams, x: ArrayView2<f64>) -> Forward {
    match params.arch {
        Arch::Linear => Forward {
            hidden: None,
            logits: params.layers[0].forward(x),
        },
        Arch::Mlp { .. } => {
            let h = params.layers[0].forward(x).mapv_into(|v| v.max(0.0));
            let logits = params.layers[1].forward(h.view());
            Forward {
                hidden: Some(h),
                logits,
            }
        }
    }
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}

pub fn logits(params: &ModelParams, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    params.check_input(features)?;
    Ok(forward(params, features).logits)
}

/// Row-wise softmax of the logits.
pub fn predict_proba(params: &ModelParams, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    logits(params, features).map(softmax_rows)
}

pub fn predict(params: &ModelParams, features: ArrayView2<f64>) -> Result<Vec<usize>> {
    Ok(logits(params, features)?
        .outer_iter()
        .map(|row| argmax(row))
        .collect())
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_at(row: ArrayView1<f64>, target: usize) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

fn check_batch(params: &ModelParams, features: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    params.check_input(features)?;
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != features.nrows() {
        return Err(Error::DimensionMismatch {
            expected: features.nrows(),
            actual: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= params.num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: params.num_classes,
        });
    }
    Ok(())
}

/// Mean cross-entropy plus `weight_decay / 2 * ||W||^2` (biases excluded).
pub fn loss(
    params: &ModelParams,
    features: ArrayView2<f64>,
    labels: &[usize],
    weight_decay: f64,
) -> Result<f64> {
    check_batch(params, features, labels)?;
    let logits = forward(params, features).logits;
    let nll: f64 = logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| -log_softmax_at(row, y))
        .sum();
    Ok(nll / labels.len() as f64 + 0.5 * weight_decay * params.weights_sq_norm())
}

/// Analytic gradient of [`loss`] with the same layout as the parameters.
pub fn loss_gradient(
    params: &ModelParams,
    features: ArrayView2<f64>,
    labels: &[usize],
    weight_decay: f64,
) -> Result<ModelParams> {
    check_batch(params, features, labels)?;
    let n = labels.len() as f64;
    let fwd = forward(params, features);
    let mut delta = softmax_rows(fwd.logits);
    for (mut row, &y) in delta.outer_iter_mut().zip(labels) {
        row[y] -= 1.0;
    }
    delta /= n;

    let mut grad = ModelParams::zeros(params.arch, params.input_dim, params.num_classes);
    match params.arch {
        Arch::Linear => {
            grad.layers[0].weight = delta.t().dot(&features);
            grad.layers[0].bias = delta.sum_axis(Axis(0));
        }
        Arch::Mlp { .. } => {
            let hidden = fwd.hidden.expect("mlp forward keeps the hidden layer");
            grad.layers[1].weight = delta.t().dot(&hidden);
            grad.layers[1].bias = delta.sum_axis(Axis(0));
            let mut back = delta.dot(&params.layers[1].weight);
            Zip::from(&mut back).and(&hidden).for_each(|g, &h| {
                if h <= 0.0 {
                    *g = 0.0;
                }
            });
            grad.layers[0].weight = back.t().dot(&features);
            grad.layers[0].bias = back.sum_axis(Axis(0));
        }
    }
    if weight_decay != 0.0 {
        for (g, p) in grad.layers.iter_mut().zip(&params.layers) {
            g.weight.scaled_add(weight_decay, &p.weight);
        }
    }
    Ok(grad)
}

/// Mini-batch SGD with momentum (`v = mu v + g; w -= lr v`) and L2 weight
/// decay. Momentum buffers start at zero; batches are drawn from a per-epoch
/// shuffle seeded by `cfg.seed`.
pub fn sgd_train(
    params: &ModelParams,
    features: ArrayView2<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    check_batch(params, features, labels)?;

    let n = labels.len();
    let batch = cfg.effective_batch(n);
    let mut rng = seed::rng(cfg.seed);
    let mut out = params.clone();
    let mut velocity = ModelParams::zeros(params.arch, params.input_dim, params.num_classes);
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.local_epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let (xb, yb);
            let (xv, yv): (ArrayView2<f64>, &[usize]) = if chunk.len() == n {
                (features, labels)
            } else {
                xb = features.select(Axis(0), chunk);
                yb = chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>();
                (xb.view(), &yb)
            };
            let grad = loss_gradient(&out, xv, yv, cfg.weight_decay)?;
            for ((mut w, mut v), g) in out
                .tensors_mut()
                .zip(velocity.tensors_mut())
                .zip(grad.tensors())
            {
                Zip::from(&mut w).and(&mut v).and(&g).for_each(|w, v, &g| {
                    *v = cfg.momentum * *v + g;
                    *w -= cfg.learning_rate * *v;
                });
            }
        }
    }
    Ok(out)
}

/// Input to the output layer: the features for a linear head, the ReLU
/// hidden layer for an MLP.
pub fn penultimate_embedding(
    params: &ModelParams,
    features: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    params.check_input(features)?;
    Ok(match params.arch {
        Arch::Linear => features.to_owned(),
        Arch::Mlp { .. } => forward(params, features)
            .hidden
            .expect("mlp forward keeps the hidden layer"),
    })
}

/// Last-layer cross-entropy gradient under the argmax pseudo-label:
/// `(p - onehot(argmax p)) ⊗ h`, flattened class-major (`c * d' + j`).
pub fn gradient_embedding(params: &ModelParams, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    params.check_input(features)?;
    let fwd = forward(params, features);
    let hidden = match fwd.hidden {
        Some(h) => h,
        None => features.to_owned(),
    };
    let proba = softmax_rows(fwd.logits);
    let (n, c, e) = (features.nrows(), params.num_classes, hidden.ncols());
    let mut out = Array2::zeros((n, c * e));
    for i in 0..n {
        let p = proba.row(i);
        let pseudo = argmax(p);
        for k in 0..c {
            let coef = p[k] - if k == pseudo { 1.0 } else { 0.0 };
            for j in 0..e {
                out[[i, k * e + j]] = coef * hidden[[i, j]];
            }
        }
    }
    Ok(out)
}

const CHECKPOINT_MAGIC: &str = "falsim-params v1";

/// Text checkpoint. Values are written in shortest round-trip form, so
/// [`load_params`] restores them bit for bit.
pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "arch {}", params.arch)?;
        writeln!(w, "input_dim {}", params.input_dim)?;
        writeln!(w, "num_classes {}", params.num_classes)?;
        for v in params.flatten() {
            writeln!(w, "{v}")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let err = |line: u64, m: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: m.to_string(),
    };
    let mut lines = BufReader::new(file).lines();
    let mut next = |n: u64| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| err(n, "unexpected end of file"))?
            .map_err(|e| Error::io(path, e))
    };
    if next(1)? != CHECKPOINT_MAGIC {
        return Err(err(1, "not a parameter checkpoint"));
    }
    let field = |line: String, key: &str, n: u64| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| err(n, &format!("expected {key}")))
    };
    let arch: Arch = field(next(2)?, "arch", 2)?.parse()?;
    let input_dim: usize = field(next(3)?, "input_dim", 3)?
        .parse()
        .map_err(|_| err(3, "bad input_dim"))?;
    let num_classes: usize = field(next(4)?, "num_classes", 4)?
        .parse()
        .map_err(|_| err(4, "bad num_classes"))?;
    let mut params = ModelParams::zeros(arch, input_dim, num_classes);
    let mut line_no = 5;
    for mut t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = next(line_no)?
                .trim()
                .parse()
                .map_err(|_| err(line_no, "bad value"))?;
            line_no += 1;
        }
    }
    Ok(params)
}
