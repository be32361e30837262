//! Regularized multinomial logistic regression.
//!
//! The objective over a head `(W, b)` on standardized features is
//!
//! ```text
//! F(W, b) = (1/n) Σ_i w_i · CE(softmax(W x_i + b), y_i) + λ · penalty(W)
//! ```
//!
//! with `penalty` one of `‖W‖₁`, `½‖W‖²_F` or nothing, and the bias never
//! penalized. `w_i` is the class weight of `y_i` times an optional per-row
//! weight. λ is derived from the inverse strength `C`: by default
//! `λ = 1/(C·n)`, which makes `n·F` equal to the `C·Σ loss + penalty` form used
//! by liblinear-style solvers, so a given `C` means the same thing at any
//! dataset size.
//!
//! Minimization is full-batch proximal gradient with monotone FISTA
//! (Beck & Teboulle), backtracking on the Lipschitz estimate and
//! function-value restarts. Convergence is declared on the first-order
//! optimality residual, see [`kkt_violation`].

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{DfrError, LoadError, Result};
use crate::io::ByteReader;
use crate::preprocess::Scaler;

pub const HEAD_MAGIC: &[u8; 4] = b"DFRH";
pub const HEAD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    L1,
    L2,
    None,
}

/// How the inverse regularization strength `C` maps to λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaScaling {
    /// `λ = 1/(C·n)`, with `n` the number of training rows.
    #[default]
    PerSample,
    /// `λ = 1/C`.
    Absolute,
}

impl LambdaScaling {
    pub fn lambda(self, inverse_strength: f64, n_rows: usize) -> f64 {
        match self {
            Self::PerSample => 1.0 / (inverse_strength * n_rows as f64),
            Self::Absolute => 1.0 / inverse_strength,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Self::PerSample => "lambda = 1/(C*n)",
            Self::Absolute => "lambda = 1/C",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub penalty: Penalty,
    /// Inverse regularization strength `C`.
    #[serde(rename = "C")]
    pub inverse_strength: f64,
    /// Per-class loss weights; `None` means all ones.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    pub max_iters: usize,
    /// Stop once the optimality residual (max-norm) drops below this.
    pub tolerance: f64,
    #[serde(default)]
    pub lambda_scaling: LambdaScaling,
    /// The solver is deterministic; the seed is carried for provenance only.
    #[serde(default)]
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            penalty: Penalty::L1,
            inverse_strength: 1.0,
            class_weights: None,
            max_iters: 5000,
            tolerance: 1e-6,
            lambda_scaling: LambdaScaling::PerSample,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn with_c(mut self, c: f64) -> Self {
        self.inverse_strength = c;
        self
    }

    pub fn with_penalty(mut self, penalty: Penalty) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn with_class_weights(mut self, weights: Option<Vec<f64>>) -> Self {
        self.class_weights = weights;
        self
    }

    fn check(&self, n_classes: usize) -> Result<()> {
        if !(self.inverse_strength > 0.0 && self.inverse_strength.is_finite()) {
            return Err(DfrError::InvalidArgument(format!(
                "C must be positive, got {}",
                self.inverse_strength
            )));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(DfrError::InvalidArgument("tolerance must be positive".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != n_classes {
                return Err(DfrError::DimensionMismatch {
                    context: "class weights",
                    expected: n_classes,
                    found: w.len(),
                });
            }
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(DfrError::InvalidArgument("class weights must be positive".into()));
            }
        }
        Ok(())
    }
}

/// The retrained last layer together with the scaling it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `C × d`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub scaler: Scaler,
}

impl LinearHead {
    pub fn zeros(n_classes: usize, scaler: Scaler) -> Self {
        let d = scaler.dim();
        Self {
            weights: Array2::zeros((n_classes, d)),
            bias: Array1::zeros(n_classes),
            scaler,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Logits on inputs that are already scaled.
    pub fn scaled_logits(&self, x_scaled: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x_scaled.dot(&self.weights.t());
        z += &self.bias;
        z
    }

    pub fn encode(&self) -> Vec<u8> {
        let (c, d) = self.weights.dim();
        let mut buf = Vec::with_capacity(16 + 8 * (c * d + c + 2 * d));
        buf.extend_from_slice(HEAD_MAGIC);
        buf.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        buf.extend_from_slice(&(c as u32).to_le_bytes());
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        let values = self
            .weights
            .iter()
            .chain(&self.bias)
            .chain(&self.scaler.mean)
            .chain(&self.scaler.std);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(HEAD_MAGIC, "DFRH")?;
        r.expect_version(HEAD_VERSION)?;
        let c = r.u32()? as usize;
        let d = r.u32()? as usize;
        if c == 0 {
            return Err(LoadError::MalformedHeader {
                position: r.position(),
                message: "head has zero classes".into(),
            }
            .into());
        }
        let weights = Array2::from_shape_vec((c, d), r.finite_f64s(c * d)?).expect("sized");
        let bias = Array1::from(r.finite_f64s(c)?);
        let mean = Array1::from(r.finite_f64s(d)?);
        let std = Array1::from(r.finite_f64s(d)?);
        r.expect_end()?;
        if std.iter().any(|&s| s <= 0.0) {
            return Err(DfrError::InvalidArgument("scaler std must be positive".into()));
        }
        Ok(Self {
            weights,
            bias,
            scaler: Scaler { mean, std },
        })
    }
}

/// Result of [`fit_logreg`]. Non-convergence is reported, not raised.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub head: LinearHead,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub kkt_violation: f64,
    /// Objective after each iteration; non-increasing.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions<'a> {
    /// Extra per-row loss weights, multiplied with the class weights.
    pub sample_weights: Option<&'a [f64]>,
    pub warm_start: Option<&'a LinearHead>,
}

/// Prox of `t·|·|`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// The smooth data term and penalty of one problem instance.
struct Problem<'a> {
    x: ArrayView2<'a, f64>,
    /// One-hot targets scaled by `w_i / n`.
    targets: Array2<f64>,
    /// `w_i / n`.
    row_scale: Array1<f64>,
    labels: &'a [usize],
    lambda: f64,
    penalty: Penalty,
}

impl<'a> Problem<'a> {
    fn new(
        x: ArrayView2<'a, f64>,
        labels: &'a [usize],
        n_classes: usize,
        config: &SolverConfig,
        sample_weights: Option<&[f64]>,
    ) -> Result<Self> {
        let n = x.nrows();
        if labels.len() != n {
            return Err(DfrError::DimensionMismatch {
                context: "labels vs feature rows",
                expected: n,
                found: labels.len(),
            });
        }
        if n == 0 {
            return Err(DfrError::InvalidArgument("no training rows".into()));
        }
        config.check(n_classes)?;
        if let Some(sw) = sample_weights {
            if sw.len() != n {
                return Err(DfrError::DimensionMismatch {
                    context: "sample weights",
                    expected: n,
                    found: sw.len(),
                });
            }
            if sw.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(DfrError::InvalidArgument("sample weights must be finite and non-negative".into()));
            }
        }
        let mut row_scale = Array1::zeros(n);
        let mut targets = Array2::zeros((n, n_classes));
        for (i, &y) in labels.iter().enumerate() {
            if y >= n_classes {
                return Err(DfrError::InvalidArgument(format!(
                    "label {y} at row {i} out of range (n_classes = {n_classes})"
                )));
            }
            let cw = config.class_weights.as_ref().map_or(1.0, |w| w[y]);
            let sw = sample_weights.map_or(1.0, |w| w[i]);
            row_scale[i] = cw * sw / n as f64;
            targets[[i, y]] = row_scale[i];
        }
        Ok(Self {
            x,
            targets,
            row_scale,
            labels,
            lambda: config.lambda_scaling.lambda(config.inverse_strength, n),
            penalty: config.penalty,
        })
    }

    fn logits(&self, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
        affine_rows(self.x, w, b)
    }

    /// Smooth part only.
    fn loss(&self, w: &Array2<f64>, b: &Array1<f64>) -> f64 {
        let z = self.logits(w, b);
        z.outer_iter()
            .zip(self.labels)
            .zip(&self.row_scale)
            .map(|((row, &y), &s)| s * (log_sum_exp(row) - row[y]))
            .sum()
    }

    /// Smooth part and its gradient.
    fn loss_grad(&self, w: &Array2<f64>, b: &Array1<f64>) -> (f64, Array2<f64>, Array1<f64>) {
        let mut z = self.logits(w, b);
        let mut loss = 0.0;
        for ((mut row, &y), &s) in z.outer_iter_mut().zip(self.labels).zip(&self.row_scale) {
            let lse = log_sum_exp(row.view());
            loss += s * (lse - row[y]);
            // row <- s · softmax(row)
            row.mapv_inplace(|v| s * (v - lse).exp());
        }
        // residual = s·(p - onehot)
        z -= &self.targets;
        let grad_w = z.t().dot(&self.x);
        let grad_b = z.sum_axis(Axis(0));
        (loss, grad_w, grad_b)
    }

    fn penalty_value(&self, w: &Array2<f64>) -> f64 {
        match self.penalty {
            Penalty::L1 => self.lambda * w.iter().map(|v| v.abs()).sum::<f64>(),
            Penalty::L2 => 0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>(),
            Penalty::None => 0.0,
        }
    }

    fn prox(&self, w: &mut Array2<f64>, step: f64) {
        match self.penalty {
            Penalty::L1 => {
                let t = step * self.lambda;
                w.mapv_inplace(|v| soft_threshold(v, t));
            }
            Penalty::L2 => {
                let shrink = 1.0 / (1.0 + step * self.lambda);
                w.mapv_inplace(|v| v * shrink);
            }
            Penalty::None => {}
        }
    }

    fn kkt(&self, w: &Array2<f64>, grad_w: &Array2<f64>, grad_b: &Array1<f64>) -> f64 {
        let lambda = self.lambda;
        let weight_part = Zip::from(w).and(grad_w).fold(0.0f64, |acc, &wj, &gj| {
            let r = match self.penalty {
                Penalty::L1 if wj == 0.0 => (gj.abs() - lambda).max(0.0),
                Penalty::L1 => (gj + lambda * wj.signum()).abs(),
                Penalty::L2 => (gj + lambda * wj).abs(),
                Penalty::None => gj.abs(),
            };
            acc.max(r)
        });
        grad_b.iter().fold(weight_part, |acc, g| acc.max(g.abs()))
    }
}

/// `x Wᵀ + b`. With few output columns a row-by-row dot product beats a
/// general matrix product.
fn affine_rows(x: ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (Some(ws), true) = (w.as_slice(), x.is_standard_layout()) else {
        let mut z = x.dot(&w.t());
        z += b;
        return z;
    };
    let (c, d) = w.dim();
    let mut z = Array2::zeros((x.nrows(), c));
    for (xi, mut zi) in x.outer_iter().zip(z.outer_iter_mut()) {
        let xs = xi.to_slice().expect("standard layout rows are contiguous");
        for k in 0..c {
            zi[k] = dot(xs, &ws[k * d..(k + 1) * d]) + b[k];
        }
    }
    z
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_classes(labels: &[usize], n_classes: usize) -> Result<()> {
    let mut seen = vec![false; n_classes];
    for &y in labels {
        if y < n_classes {
            seen[y] = true;
        }
    }
    match seen.iter().position(|s| !s) {
        Some(class) => Err(DfrError::MissingClass { class }),
        None => Ok(()),
    }
}

/// Objective value of `head` on already-scaled features.
pub fn objective(
    head: &LinearHead,
    x_scaled: ArrayView2<'_, f64>,
    labels: &[usize],
    config: &SolverConfig,
) -> Result<f64> {
    check_head_width(head, x_scaled.ncols())?;
    let p = Problem::new(x_scaled, labels, head.n_classes(), config, None)?;
    Ok(p.loss(&head.weights, &head.bias) + p.penalty_value(&head.weights))
}

/// Max-norm of the first-order optimality residual at `head`: zero exactly at
/// the minimizer. For ℓ1, a zero weight contributes `max(|∂_j| − λ, 0)` and a
/// nonzero one `|∂_j + λ·sign(W_j)|`; bias coordinates contribute `|∂_b|`.
pub fn kkt_violation(
    head: &LinearHead,
    x_scaled: ArrayView2<'_, f64>,
    labels: &[usize],
    config: &SolverConfig,
    sample_weights: Option<&[f64]>,
) -> Result<f64> {
    check_head_width(head, x_scaled.ncols())?;
    let p = Problem::new(x_scaled, labels, head.n_classes(), config, sample_weights)?;
    let (_, gw, gb) = p.loss_grad(&head.weights, &head.bias);
    Ok(p.kkt(&head.weights, &gw, &gb))
}

fn check_head_width(head: &LinearHead, width: usize) -> Result<()> {
    if width != head.dim() {
        return Err(DfrError::DimensionMismatch {
            context: "head input width",
            expected: head.dim(),
            found: width,
        });
    }
    Ok(())
}

/// Fits a head on already-scaled features; `scaler` is stored in the result.
pub fn fit_logreg(
    x_scaled: ArrayView2<'_, f64>,
    labels: &[usize],
    n_classes: usize,
    config: &SolverConfig,
    scaler: Scaler,
) -> Result<FitOutcome> {
    fit_logreg_with(x_scaled, labels, n_classes, config, scaler, FitOptions::default())
}

pub fn fit_logreg_with(
    x_scaled: ArrayView2<'_, f64>,
    labels: &[usize],
    n_classes: usize,
    config: &SolverConfig,
    scaler: Scaler,
    options: FitOptions<'_>,
) -> Result<FitOutcome> {
    if scaler.dim() != x_scaled.ncols() {
        return Err(DfrError::DimensionMismatch {
            context: "scaler width vs features",
            expected: scaler.dim(),
            found: x_scaled.ncols(),
        });
    }
    if x_scaled.nrows() < n_classes {
        return Err(DfrError::InvalidArgument(format!(
            "need at least {n_classes} rows, got {}",
            x_scaled.nrows()
        )));
    }
    check_classes(labels, n_classes)?;
    let problem = Problem::new(x_scaled, labels, n_classes, config, options.sample_weights)?;
    let d = x_scaled.ncols();

    let (mut w, mut b) = match options.warm_start {
        Some(h) if h.weights.dim() == (n_classes, d) => (h.weights.clone(), h.bias.clone()),
        Some(h) => {
            return Err(DfrError::DimensionMismatch {
                context: "warm start head",
                expected: n_classes * d,
                found: h.weights.len(),
            })
        }
        None => (Array2::zeros((n_classes, d)), Array1::zeros(n_classes)),
    };
    let mut f_x = problem.loss(&w, &b) + problem.penalty_value(&w);
    let mut w_y = w.clone();
    let mut b_y = b.clone();
    let mut momentum = 1.0f64;
    let mut at_x = true;
    let mut lipschitz = 1.0f64;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut kkt = f64::INFINITY;
    let mut iterations = 0;

    for iter in 0..config.max_iters {
        iterations = iter + 1;
        let (f_y, gw_y, gb_y) = problem.loss_grad(&w_y, &b_y);
        // let the estimate shrink again so one conservative step does not stick
        lipschitz = (lipschitz * 0.9).max(1e-12);
        // backtracking on the quadratic upper bound
        let (w_z, b_z, f_z) = loop {
            let step = 1.0 / lipschitz;
            let mut w_z = &w_y - &(&gw_y * step);
            problem.prox(&mut w_z, step);
            let b_z = &b_y - &(&gb_y * step);
            let f_z = problem.loss(&w_z, &b_z);
            let dw = &w_z - &w_y;
            let db = &b_z - &b_y;
            let linear = (&dw * &gw_y).sum() + (&db * &gb_y).sum();
            let sq = dw.iter().map(|v| v * v).sum::<f64>() + db.iter().map(|v| v * v).sum::<f64>();
            let bound = f_y + linear + 0.5 * lipschitz * sq;
            if f_z <= bound + 1e-14 * f_y.abs().max(1.0) || lipschitz > 1e30 {
                break (w_z, b_z, f_z);
            }
            lipschitz *= 2.0;
        };
        // gradient-mapping residual at y, a cheap proxy for optimality
        let mapping = lipschitz
            * w_y
                .iter()
                .zip(&w_z)
                .chain(b_y.iter().zip(&b_z))
                .fold(0.0f64, |acc, (a, c)| acc.max((a - c).abs()));

        let obj_z = f_z + problem.penalty_value(&w_z);
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        // gradient restart test: the step points against the momentum direction
        let against = Zip::from(&w_y)
            .and(&w_z)
            .and(&w)
            .fold(0.0, |acc, &yv, &zv, &xv| acc + (yv - zv) * (zv - xv))
            + Zip::from(&b_y)
                .and(&b_z)
                .and(&b)
                .fold(0.0, |acc, &yv, &zv, &xv| acc + (yv - zv) * (zv - xv));
        // a plain proximal step from x is a descent step in exact arithmetic; it is
        // always taken so rounding in F near the optimum cannot stall progress
        let improved = obj_z <= f_x || at_x;
        let (w_prev, b_prev) = (w.clone(), b.clone());
        if improved {
            w = w_z.clone();
            b = b_z.clone();
            f_x = obj_z;
        }
        trace.push(f_x);

        if improved && against <= 0.0 {
            let beta = (momentum - 1.0) / next_momentum;
            w_y = &w + &((&w - &w_prev) * beta);
            b_y = &b + &((&b - &b_prev) * beta);
            momentum = next_momentum;
            at_x = false;
        } else {
            // monotone safeguard and gradient restart
            w_y = w.clone();
            b_y = b.clone();
            momentum = 1.0;
            at_x = true;
        }

        if mapping <= config.tolerance {
            let (_, gw, gb) = problem.loss_grad(&w, &b);
            kkt = problem.kkt(&w, &gw, &gb);
            if kkt <= config.tolerance {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        let (_, gw, gb) = problem.loss_grad(&w, &b);
        kkt = problem.kkt(&w, &gw, &gb);
        converged = kkt <= config.tolerance;
    }
    Ok(FitOutcome {
        head: LinearHead {
            weights: w,
            bias: b,
            scaler,
        },
        converged,
        iterations,
        objective: f_x,
        kkt_violation: kkt,
        objective_trace: trace,
    })
}

/// Logits on raw (unscaled) features.
pub fn predict_logits(head: &LinearHead, x_raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let scaled = head.scaler.apply(x_raw)?;
    check_head_width(head, scaled.ncols())?;
    Ok(head.scaled_logits(scaled.view()))
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.outer_iter_mut() {
        let lse = log_sum_exp(row.view());
        row.mapv_inplace(|v| (v - lse).exp());
    }
    p
}

pub fn predict_proba(head: &LinearHead, x_raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(softmax_rows(&predict_logits(head, x_raw)?))
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict_labels(head: &LinearHead, x_raw: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_logits(head, x_raw)?))
}

/// Elementwise mean of weights and biases. All heads must have the same shape
/// and bit-identical scaler statistics.
pub fn average_weights(heads: &[LinearHead]) -> Result<LinearHead> {
    let first = heads
        .first()
        .ok_or_else(|| DfrError::HeadMismatch("no heads to average".into()))?;
    for (k, h) in heads.iter().enumerate().skip(1) {
        if h.weights.dim() != first.weights.dim() || h.bias.len() != first.bias.len() {
            return Err(DfrError::HeadMismatch(format!("head {k} has a different shape")));
        }
        if h.scaler != first.scaler {
            return Err(DfrError::HeadMismatch(format!(
                "head {k} was fit under different scaler statistics"
            )));
        }
    }
    // running mean: exact for identical inputs and for cancelling pairs
    let mut w = first.weights.clone();
    let mut b = first.bias.clone();
    for (k, h) in heads.iter().enumerate().skip(1) {
        let count = (k + 1) as f64;
        Zip::from(&mut w).and(&h.weights).for_each(|m, &x| *m += (x - *m) / count);
        Zip::from(&mut b).and(&h.bias).for_each(|m, &x| *m += (x - *m) / count);
    }
    Ok(LinearHead {
        weights: w,
        bias: b,
        scaler: first.scaler.clone(),
    })
}

/// Euclidean norm of the weight columns in `range`, summed over classes.
pub fn block_norm(head: &LinearHead, range: std::ops::Range<usize>) -> f64 {
    head.weights
        .slice(s![.., range])
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_problem(seed: u64, n: usize, d: usize, c: usize) -> (Array2<f64>, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let x = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        for (k, label) in labels.iter_mut().take(c).enumerate() {
            *label = k;
        }
        (x, labels)
    }

    fn tight(penalty: Penalty, c: f64) -> SolverConfig {
        SolverConfig {
            penalty,
            inverse_strength: c,
            max_iters: 200_000,
            tolerance: 1e-9,
            ..SolverConfig::default()
        }
    }

    /// Straightforward evaluation of the objective formula, written without
    /// any of the solver's vectorized machinery.
    fn naive_objective(head: &LinearHead, x: &Array2<f64>, y: &[usize], cfg: &SolverConfig) -> f64 {
        let n = x.nrows();
        let lambda = cfg.lambda_scaling.lambda(cfg.inverse_strength, n);
        let mut total = 0.0;
        for i in 0..n {
            let logits: Vec<f64> = (0..head.n_classes())
                .map(|k| head.bias[k] + (0..x.ncols()).map(|j| head.weights[[k, j]] * x[[i, j]]).sum::<f64>())
                .collect();
            let denom: f64 = logits.iter().map(|z| z.exp()).sum();
            let weight = cfg.class_weights.as_ref().map_or(1.0, |w| w[y[i]]);
            total += weight * -(logits[y[i]].exp() / denom).ln();
        }
        let pen = match cfg.penalty {
            Penalty::L1 => head.weights.iter().map(|v| v.abs()).sum::<f64>(),
            Penalty::L2 => 0.5 * head.weights.iter().map(|v| v * v).sum::<f64>(),
            Penalty::None => 0.0,
        };
        total / n as f64 + lambda * pen
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(5.0, 2.0), 3.0);
        assert_eq!(soft_threshold(-1.0, 2.0), 0.0);
        assert_eq!(soft_threshold(-5.0, 2.0), -3.0);
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            let x: f64 = rng.sample(StandardNormal);
            assert_eq!(soft_threshold(x, 0.0), x);
        }
    }

    #[test]
    fn zero_head_objective_is_log_c() {
        let (x, y) = random_problem(2, 30, 4, 3);
        let head = LinearHead::zeros(3, Scaler::identity(4));
        let cfg = SolverConfig::default().with_penalty(Penalty::None);
        let f = objective(&head, x.view(), &y, &cfg).unwrap();
        assert!((f - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn huge_correct_logit_leaves_only_penalty() {
        let x = array![[1.0, 0.0]];
        let head = LinearHead {
            weights: array![[0.0, 0.0], [800.0, 0.0]],
            bias: array![0.0, 0.0],
            scaler: Scaler::identity(2),
        };
        let cfg = SolverConfig::default().with_c(0.5);
        let f = objective(&head, x.view(), &[1], &cfg).unwrap();
        let lambda = 1.0 / 0.5;
        assert!((f - lambda * 800.0).abs() < 1e-9);
    }

    #[test]
    fn objective_matches_naive_formula() {
        let mut rng = rng_from_seed(3);
        for penalty in [Penalty::L1, Penalty::L2, Penalty::None] {
            let (x, y) = random_problem(4, 25, 5, 3);
            let head = LinearHead {
                weights: Array2::from_shape_simple_fn((3, 5), || rng.sample(StandardNormal)),
                bias: Array1::from_shape_simple_fn(3, || rng.sample(StandardNormal)),
                scaler: Scaler::identity(5),
            };
            let cfg = SolverConfig::default()
                .with_penalty(penalty)
                .with_c(0.3)
                .with_class_weights(Some(vec![1.0, 2.5, 0.5]));
            let fast = objective(&head, x.view(), &y, &cfg).unwrap();
            let slow = naive_objective(&head, &x, &y, &cfg);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    /// Golden-section search on a unimodal scalar function.
    fn golden(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - r * (hi - lo);
            let b = lo + r * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn two_point_l2_matches_golden_section() {
        // {(-1, class 0), (+1, class 1)} with two weight rows. By symmetry the
        // optimum has W = (-v, v) and b = 0, so the objective reduces to
        // ln(1 + e^{-2v}) + λ v² in the single unknown v.
        let x = array![[-1.0], [1.0]];
        let y = [0, 1];
        let cfg = tight(Penalty::L2, 1.0);
        let lambda = 1.0 / 2.0;
        let v = golden(0.0, 10.0, |v| (1.0 + (-2.0 * v).exp()).ln() + lambda * v * v);
        let fit = fit_logreg(x.view(), &y, 2, &cfg, Scaler::identity(1)).unwrap();
        assert!(fit.converged, "{} {} {:?}", fit.kkt_violation, fit.iterations, &fit.objective_trace[fit.objective_trace.len().saturating_sub(5)..]);
        assert!((fit.head.weights[[1, 0]] - v).abs() < 1e-6);
        assert!((fit.head.weights[[0, 0]] + v).abs() < 1e-6);
        assert!(fit.head.bias.iter().all(|b| b.abs() < 1e-6));
    }

    #[test]
    fn strong_l1_zeroes_weights_and_bias_tracks_prior() {
        let (x, mut y) = random_problem(5, 40, 6, 2);
        for label in y.iter_mut().skip(10) {
            *label = 1;
        }
        let cfg = tight(Penalty::L1, 1e-6);
        let fit = fit_logreg(x.view(), &y, 2, &cfg, Scaler::identity(6)).unwrap();
        assert!(fit.head.weights.iter().all(|&w| w == 0.0));
        let p = softmax_rows(&fit.head.scaled_logits(x.view()));
        let prior1 = y.iter().filter(|&&v| v == 1).count() as f64 / y.len() as f64;
        assert!((p[[0, 1]] - prior1).abs() < 1e-6);
    }

    #[test]
    fn kkt_and_trace_properties() {
        for (seed, penalty) in [(10, Penalty::L1), (11, Penalty::L2), (12, Penalty::L1)] {
            let (x, y) = random_problem(seed, 60, 8, 3);
            let cfg = tight(penalty, 0.2);
            let fit = fit_logreg(x.view(), &y, 3, &cfg, Scaler::identity(8)).unwrap();
            assert!(fit.converged, "{penalty:?} kkt {}", fit.kkt_violation);
            // monotone up to the rounding slack the acceptance test allows
            assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-13));
            let zero = LinearHead::zeros(3, Scaler::identity(8));
            assert!(fit.objective <= objective(&zero, x.view(), &y, &cfg).unwrap());
            let kkt = kkt_violation(&fit.head, x.view(), &y, &cfg, None).unwrap();
            assert!(kkt <= 1e-6, "{kkt}");
        }
    }

    #[test]
    fn class_weight_scaling_equals_lambda_scaling() {
        let (x, y) = random_problem(20, 50, 5, 2);
        let k = 3.0;
        let base = tight(Penalty::L1, 0.5).with_class_weights(Some(vec![1.0, 2.0]));
        let scaled = tight(Penalty::L1, 0.5 / k).with_class_weights(Some(vec![k, 2.0 * k]));
        // scaling every weight by k and λ by k leaves the minimizer unchanged
        let a = fit_logreg(x.view(), &y, 2, &base, Scaler::identity(5)).unwrap();
        let b = fit_logreg(x.view(), &y, 2, &scaled, Scaler::identity(5)).unwrap();
        let diff = (&a.head.weights - &b.head.weights).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn missing_class_is_an_error() {
        let x = array![[0.0], [1.0], [2.0]];
        let err = fit_logreg(x.view(), &[0, 0, 2], 3, &SolverConfig::default(), Scaler::identity(1));
        assert!(matches!(err, Err(DfrError::MissingClass { class: 1 })));
    }

    #[test]
    fn probabilities_and_argmax() {
        let mut rng = rng_from_seed(30);
        let head = LinearHead {
            weights: Array2::from_shape_simple_fn((4, 3), || rng.sample(StandardNormal)),
            bias: Array1::from_shape_simple_fn(4, || rng.sample(StandardNormal)),
            scaler: Scaler::identity(3),
        };
        let x = Array2::from_shape_simple_fn((20, 3), || 3.0 * rng.sample::<f64, _>(StandardNormal));
        let p = predict_proba(&head, x.view()).unwrap();
        let z = predict_logits(&head, x.view()).unwrap();
        for (prow, zrow) in p.outer_iter().zip(z.outer_iter()) {
            assert!((prow.sum() - 1.0).abs() < 1e-12);
            let denom: f64 = zrow.iter().map(|v| v.exp()).sum();
            for (pk, zk) in prow.iter().zip(zrow) {
                assert!((pk - zk.exp() / denom).abs() < 1e-12);
            }
        }
        let labels = predict_labels(&head, x.view()).unwrap();
        assert_eq!(argmax_rows(&(&z * 2.0)), labels);

        let zero = LinearHead::zeros(4, Scaler::identity(3));
        let uniform = predict_proba(&zero, x.view()).unwrap();
        assert!(uniform.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(argmax_rows(&array![[1.0, 1.0, 0.0]]), vec![0]);
    }

    #[test]
    fn averaging_rules() {
        let mut rng = rng_from_seed(40);
        let head = LinearHead {
            weights: Array2::from_shape_simple_fn((2, 3), || rng.sample(StandardNormal)),
            bias: Array1::from_shape_simple_fn(2, || rng.sample(StandardNormal)),
            scaler: Scaler::identity(3),
        };
        assert_eq!(average_weights(std::slice::from_ref(&head)).unwrap(), head);
        assert_eq!(average_weights(&vec![head.clone(); 7]).unwrap(), head);
        let neg = LinearHead {
            weights: -&head.weights,
            bias: -&head.bias,
            scaler: head.scaler.clone(),
        };
        let avg = average_weights(&[head.clone(), neg]).unwrap();
        assert!(avg.weights.iter().chain(&avg.bias).all(|&v| v == 0.0));

        let mut other_scaler = head.clone();
        other_scaler.scaler.mean[0] = 0.5;
        assert!(matches!(
            average_weights(&[head.clone(), other_scaler]),
            Err(DfrError::HeadMismatch(_))
        ));
        let wider = LinearHead::zeros(2, Scaler::identity(4));
        assert!(average_weights(&[head, wider]).is_err());
    }

    #[test]
    fn head_checkpoint_round_trip() {
        let head = LinearHead {
            weights: array![[1.0, -2.0], [0.5, 0.25], [3.0, 1e-300]],
            bias: array![0.1, 0.2, 0.3],
            scaler: Scaler {
                mean: array![1.0, 2.0],
                std: array![0.5, 4.0],
            },
        };
        let bytes = head.encode();
        assert_eq!(LinearHead::decode(&bytes).unwrap(), head);
        let mut bad = bytes.clone();
        bad[3] = b'E';
        assert!(matches!(
            LinearHead::decode(&bad),
            Err(DfrError::Load(LoadError::BadMagic(..)))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn row_permutation_does_not_change_solution(seed in 0u64..1000, shift in 1usize..30) {
            let (x, y) = random_problem(seed, 40, 4, 2);
            let cfg = tight(Penalty::L1, 0.5);
            let a = fit_logreg(x.view(), &y, 2, &cfg, Scaler::identity(4)).unwrap();
            let order: Vec<usize> = (0..40).map(|i| (i + shift) % 40).collect();
            let xp = x.select(Axis(0), &order);
            let yp: Vec<usize> = order.iter().map(|&i| y[i]).collect();
            let b = fit_logreg(xp.view(), &yp, 2, &cfg, Scaler::identity(4)).unwrap();
            let diff = (&a.head.weights - &b.head.weights)
                .iter()
                .chain((&a.head.bias - &b.head.bias).iter())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(diff < 1e-8, "diff {}", diff);
        }
    }
}
