//! Feed-forward ReLU network trained by plain minibatch SGD.
//!
//! The network is the feature extractor: its last hidden layer's
//! post-activation is what [`extract_features`] hands to the last-layer
//! retraining. Gradients are hand-written backprop and can be checked against
//! central differences with [`grad_check`].

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{DfrError, LoadError, Result};
use crate::io::ByteReader;
use crate::preprocess::Scaler;
use crate::rng::{derive_seed, rng_from_seed, streams};
use crate::solver::LinearHead;

pub const MODEL_MAGIC: &[u8; 4] = b"DFRM";
pub const MODEL_VERSION: u32 = 1;

/// One affine map `z = W a + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }
}

/// ReLU on every hidden layer, identity on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

impl MlpModel {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DfrError::InvalidArgument("a model needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.n_out() {
                return Err(DfrError::DimensionMismatch {
                    context: "layer bias length",
                    expected: layer.n_out(),
                    found: layer.bias.len(),
                });
            }
            if let Some(next) = layers.get(i + 1) {
                if next.n_in() != layer.n_out() {
                    return Err(DfrError::DimensionMismatch {
                        context: "consecutive layer widths",
                        expected: layer.n_out(),
                        found: next.n_in(),
                    });
                }
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(DfrError::InvalidArgument(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(DfrError::InvalidArgument(format!(
                "layer sizes must hold at least two positive widths, got {sizes:?}"
            )));
        }
        let mut rng = rng_from_seed(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-limit..=limit)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// `[d_in, h_1, ..., h_L, C]`.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].n_in())
            .chain(self.layers.iter().map(Layer::n_out))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(DfrError::DimensionMismatch {
                context: "model input width",
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// Post-activation of every layer, the input first and the logits last.
    fn forward(&self, x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights.t());
            z += &layer.bias;
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.forward(x).pop().expect("at least one layer"))
    }

    pub fn predict_labels(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(crate::solver::argmax_rows(&self.logits(x)?))
    }

    /// Last hidden post-activation.
    pub fn features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        if self.n_hidden_layers() == 0 {
            return Err(DfrError::InvalidArgument("model has no hidden layer to extract".into()));
        }
        let mut acts = self.forward(x);
        acts.pop();
        Ok(acts.pop().expect("hidden layer"))
    }

    /// The output layer as a [`LinearHead`] over unscaled features.
    pub fn output_head(&self) -> LinearHead {
        let last = &self.layers[self.layers.len() - 1];
        LinearHead {
            weights: last.weights.clone(),
            bias: last.bias.clone(),
            scaler: Scaler::identity(last.n_in()),
        }
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Vec<Layer>)> {
        self.check_input(&x)?;
        check_labels(labels, x.nrows(), self.n_classes())?;
        Ok(self.loss_grad_unchecked(x, labels))
    }

    fn loss_grad_unchecked(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Vec<Layer>) {
        let n = x.nrows() as f64;
        let acts = self.forward(x);
        let logits = &acts[acts.len() - 1];
        let (loss, mut delta) = softmax_ce(logits, labels);
        delta /= n;
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let a_prev = &acts[i];
            let grad_w = delta.t().dot(a_prev);
            let grad_b = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut next = delta.dot(&self.layers[i].weights);
                // ReLU derivative, taken as 0 at exactly 0
                next.zip_mut_with(a_prev, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = next;
            }
            grads.push(Layer {
                weights: grad_w,
                bias: grad_b,
            });
        }
        grads.reverse();
        (loss / n, grads)
    }

    fn mean_loss(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
        let logits = self.forward(x).pop().expect("at least one layer");
        softmax_ce(&logits, labels).0 / x.nrows() as f64
    }

    fn param(&self, flat: usize) -> f64 {
        let (l, k) = self.locate(flat);
        let layer = &self.layers[l];
        if k < layer.weights.len() {
            layer.weights.as_slice().expect("standard layout")[k]
        } else {
            layer.bias[k - layer.weights.len()]
        }
    }

    fn set_param(&mut self, flat: usize, value: f64) {
        let (l, k) = self.locate(flat);
        let layer = &mut self.layers[l];
        let nw = layer.weights.len();
        if k < nw {
            layer.weights.as_slice_mut().expect("standard layout")[k] = value;
        } else {
            layer.bias[k - nw] = value;
        }
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (l, layer) in self.layers.iter().enumerate() {
            let size = layer.weights.len() + layer.bias.len();
            if flat < size {
                return (l, flat);
            }
            flat -= size;
        }
        panic!("parameter index out of range");
    }

    /// Magic, version, layer count, widths, then every layer's `W` (row-major)
    /// and `b` as little-endian f64.
    pub fn encode(&self) -> Vec<u8> {
        let sizes = self.sizes();
        let mut buf = Vec::with_capacity(12 + 8 * sizes.len() + 8 * self.n_params());
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for s in &sizes {
            buf.extend_from_slice(&(*s as u64).to_le_bytes());
        }
        for layer in &self.layers {
            for v in layer.weights.iter().chain(&layer.bias) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MODEL_MAGIC, "DFRM")?;
        r.expect_version(MODEL_VERSION)?;
        let n_sizes = r.u32()? as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(LoadError::MalformedHeader {
                position: r.position(),
                message: format!("implausible layer count {n_sizes}"),
            }
            .into());
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            let s = r.u64()?;
            if s == 0 || s > (r.remaining() as u64) {
                return Err(LoadError::MalformedHeader {
                    position: r.position(),
                    message: format!("implausible layer width {s}"),
                }
                .into());
            }
            sizes.push(s as usize);
        }
        let mut layers = Vec::with_capacity(n_sizes - 1);
        for w in sizes.windows(2) {
            let weights = Array2::from_shape_vec((w[1], w[0]), r.finite_f64s(w[0] * w[1])?).expect("sized");
            let bias = Array1::from(r.finite_f64s(w[1])?);
            layers.push(Layer { weights, bias });
        }
        r.expect_end()?;
        Self::from_layers(layers)
    }
}

fn check_labels(labels: &[usize], n: usize, n_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(DfrError::DimensionMismatch {
            context: "labels vs rows",
            expected: n,
            found: labels.len(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(DfrError::InvalidArgument(format!("label {y} out of range (C = {n_classes})")));
    }
    Ok(())
}

/// Summed cross-entropy and `softmax − onehot`.
fn softmax_ce(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in probs.outer_iter_mut().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        row.mapv_inplace(|v| (v - lse).exp());
        row[y] -= 1.0;
    }
    (loss, probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Hidden layer widths; the input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-2,
            weight_decay: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DfrError::InvalidArgument("batch_size and learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(DfrError::InvalidArgument("weight_decay must be non-negative".into()));
        }
        if self.hidden.contains(&0) {
            return Err(DfrError::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ErmOutcome {
    pub model: MlpModel,
    /// Mean minibatch loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
}

impl ErmOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Unweighted cross-entropy training on every row of `train`.
///
/// Weight decay applies to weight matrices only. Deterministic given the
/// data and `config.seed`.
pub fn train_erm(train: &EmbeddingDataset, config: &TrainConfig) -> Result<ErmOutcome> {
    config.check()?;
    if train.n_classes() < 2 {
        return Err(DfrError::InvalidArgument("need at least 2 classes".into()));
    }
    if train.n_rows() == 0 {
        return Err(DfrError::InvalidDataset("empty training set".into()));
    }
    let mut sizes = vec![train.dim()];
    sizes.extend(&config.hidden);
    sizes.push(train.n_classes());
    let mut model = MlpModel::init(&sizes, derive_seed(config.seed, streams::ERM_INIT))?;

    let x = train.features_f64();
    let labels = train.labels();
    let mut order: Vec<usize> = (0..train.n_rows()).collect();
    let mut rng = rng_from_seed(derive_seed(config.seed, streams::ERM_SHUFFLE));
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut batch_y = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch_x = x.select(Axis(0), chunk);
            batch_y.clear();
            batch_y.extend(chunk.iter().map(|&i| labels[i]));
            let (loss, grads) = model.loss_grad_unchecked(batch_x.view(), &batch_y);
            if !loss.is_finite() {
                return Err(DfrError::Diverged { epoch });
            }
            total += loss;
            batches += 1;
            for (layer, grad) in model.layers.iter_mut().zip(grads) {
                let decay = 1.0 - lr * config.weight_decay;
                layer.weights.zip_mut_with(&grad.weights, |w, &g| *w = decay * *w - lr * g);
                layer.bias.zip_mut_with(&grad.bias, |b, &g| *b -= lr * g);
            }
        }
        let mean = total / batches as f64;
        let finite = model
            .layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()));
        if !mean.is_finite() || !finite {
            return Err(DfrError::Diverged { epoch });
        }
        epoch_losses.push(mean);
    }
    Ok(ErmOutcome { model, epoch_losses })
}

/// Last-hidden-layer activations with labels and groups copied through.
pub fn extract_features(model: &MlpModel, data: &EmbeddingDataset) -> Result<EmbeddingDataset> {
    let feats = model.features(data.features_f64().view())?;
    EmbeddingDataset::new(
        feats.mapv(|v| v as f32),
        data.labels().to_vec(),
        data.groups().to_vec(),
        data.n_classes(),
        data.n_groups(),
    )
}

/// Gradients smaller than this in both estimates are not compared.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;
pub const MIN_CHECKED_PARAMS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    /// `max |g_a − g_fd| / max(|g_a|, |g_fd|, 1e-8)` over compared coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares backprop with central differences of the mean cross-entropy on a
/// seeded sample of at least [`MIN_CHECKED_PARAMS`] coordinates (all of them
/// when the model is smaller).
pub fn grad_check(
    model: &MlpModel,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    epsilon: f64,
    seed: u64,
) -> Result<GradCheck> {
    if x.nrows() == 0 {
        return Err(DfrError::InvalidArgument("gradient check needs a nonempty batch".into()));
    }
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(DfrError::InvalidArgument(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let (_, grads) = model.loss_and_gradient(x, labels)?;
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.weights.iter().chain(&g.bias).copied().collect::<Vec<_>>())
        .collect();
    let total = analytic.len();
    let mut coords: Vec<usize> = (0..total).collect();
    if total > MIN_CHECKED_PARAMS {
        coords.shuffle(&mut rng_from_seed(seed));
        coords.truncate(MIN_CHECKED_PARAMS.max(total / 10));
        coords.sort_unstable();
    }
    let mut probe = model.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for k in coords {
        let base = probe.param(k);
        probe.set_param(k, base + epsilon);
        let up = probe.mean_loss(x, labels);
        probe.set_param(k, base - epsilon);
        let down = probe.mean_loss(x, labels);
        probe.set_param(k, base);
        let fd = (up - down) / (2.0 * epsilon);
        let ga = analytic[k];
        if ga.abs() < GRAD_CHECK_FLOOR && fd.abs() < GRAD_CHECK_FLOOR {
            report.skipped += 1;
            continue;
        }
        let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
