//! Last-layer retraining on group-balanced data.
//!
//! [`run_dfr`] fits a scaler on the reweighting set, draws `n_retrains`
//! group-balanced subsamples, fits an ℓ1 logistic regression head on each and
//! averages the heads. Hyperparameters come from [`tune`], which fits once per
//! grid point and scores worst-group accuracy on held-out rows.
//!
//! The baselines ([`crt_baseline`], [`lws_baseline`],
//! [`group_balanced_sampling_retrain`]) replace their samplers by per-row
//! loss weights equal to the inverse sampling frequency, so each is trained on
//! the expectation of its sampled objective.

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, GroupSchema};
use crate::error::{DfrError, Result};
use crate::metrics::{evaluate, group_accuracies, worst_group_accuracy, GroupMetrics};
use crate::preprocess::{apply_scaler, fit_scaler, Scaler};
use crate::rng::{derive_seed, rng_from_seed, streams};
use crate::solver::{
    average_weights, fit_logreg, fit_logreg_with, predict_labels, FitOptions, LambdaScaling, LinearHead, Penalty,
    SolverConfig,
};

pub const DEFAULT_C_GRID: [f64; 7] = [1.0, 0.7, 0.3, 0.1, 0.07, 0.03, 0.01];
pub const DEFAULT_CLASS_WEIGHT_GRID: [f64; 7] = [1.0, 2.0, 3.0, 10.0, 100.0, 300.0, 1000.0];

/// Which data trains the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Held-out reweighting data; tuning splits it in half.
    #[default]
    ValTr,
    /// Balanced subsets of the training data; the reweighting set only scores
    /// tuning candidates, and class weights are tuned as well.
    TrTr,
    /// As `TrTr`, for an extractor trained without the minority groups. The
    /// head-side procedure is identical; the difference lives upstream.
    TrNm,
}

impl Variant {
    pub fn head_data_is_train(self) -> bool {
        !matches!(self, Variant::ValTr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DfrConfig {
    pub variant: Variant,
    pub n_retrains: usize,
    pub c_grid: Vec<f64>,
    /// Swept only for the train-data variants.
    pub class_weight_grid: Vec<f64>,
    pub tuning_split_fraction: f64,
    pub penalty: Penalty,
    pub seed: u64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub lambda_scaling: LambdaScaling,
}

impl Default for DfrConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ValTr,
            n_retrains: 10,
            c_grid: DEFAULT_C_GRID.to_vec(),
            class_weight_grid: DEFAULT_CLASS_WEIGHT_GRID.to_vec(),
            tuning_split_fraction: 0.5,
            penalty: Penalty::L1,
            seed: 0,
            max_iters: 5000,
            tolerance: 1e-5,
            lambda_scaling: LambdaScaling::PerSample,
        }
    }
}

impl DfrConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(DfrError::InvalidArgument(m.into()));
        if self.n_retrains == 0 {
            return bad("n_retrains must be at least 1");
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return bad("c_grid must be a nonempty list of positive values");
        }
        if self.variant.head_data_is_train()
            && (self.class_weight_grid.is_empty() || self.class_weight_grid.iter().any(|&w| !(w > 0.0 && w.is_finite())))
        {
            return bad("class_weight_grid must be a nonempty list of positive values");
        }
        if !(self.tuning_split_fraction > 0.0 && self.tuning_split_fraction < 1.0) {
            return bad("tuning_split_fraction must lie strictly between 0 and 1");
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 || self.max_iters == 0 {
            return bad("solver tolerance and max_iters must be positive");
        }
        Ok(())
    }

    pub fn solver(&self, c: f64, class_weights: Option<Vec<f64>>) -> SolverConfig {
        SolverConfig {
            penalty: self.penalty,
            inverse_strength: c,
            class_weights,
            max_iters: self.max_iters,
            tolerance: self.tolerance,
            lambda_scaling: self.lambda_scaling,
            seed: self.seed,
        }
    }

    /// Seed of retrain `k` (0-based).
    pub fn retrain_seed(&self, k: usize) -> u64 {
        derive_seed(derive_seed(self.seed, streams::RETRAIN), k as u64)
    }

    /// Class-weight candidates: all ones, then for each class in turn that class
    /// weighted by every grid value above 1 with the others at 1. For two
    /// classes this is the fix-one, sweep-the-other, then swap procedure; for
    /// more it is a one-vs-rest generalization.
    pub fn class_weight_candidates(&self, n_classes: usize) -> Vec<Option<Vec<f64>>> {
        if !self.variant.head_data_is_train() {
            return vec![None];
        }
        let mut out = vec![None];
        for class in 0..n_classes {
            for &w in &self.class_weight_grid {
                if w == 1.0 {
                    continue;
                }
                let mut weights = vec![1.0; n_classes];
                weights[class] = w;
                let candidate = Some(weights);
                if !out.contains(&candidate) {
                    out.push(candidate);
                }
            }
        }
        out
    }
}

/// Keeps every row of the smallest groups and a uniform draw of the same size
/// from every other group. Returns the selected source rows in ascending order.
pub fn group_balanced_indices(dataset: &EmbeddingDataset, seed: u64) -> Result<Vec<usize>> {
    let by_group = dataset.group_indices();
    if let Some(group) = by_group.iter().position(Vec::is_empty) {
        return Err(DfrError::EmptyGroup { group });
    }
    let m = by_group.iter().map(Vec::len).min().unwrap_or(0);
    let mut rng = rng_from_seed(seed);
    let mut picked = Vec::with_capacity(m * by_group.len());
    for rows in &by_group {
        if rows.len() == m {
            picked.extend_from_slice(rows);
        } else {
            picked.extend(index::sample(&mut rng, rows.len(), m).into_iter().map(|i| rows[i]));
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

pub fn group_balanced_subsample(dataset: &EmbeddingDataset, seed: u64) -> Result<EmbeddingDataset> {
    Ok(dataset.select(&group_balanced_indices(dataset, seed)?))
}

/// Splits each group into a `fraction` part and the rest; every group must
/// land in both parts.
pub fn stratified_halves(
    dataset: &EmbeddingDataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = rng_from_seed(seed);
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (group, mut rows) in dataset.group_indices().into_iter().enumerate() {
        let count = rows.len();
        let take = (count as f64 * fraction).round() as usize;
        if take == 0 || take == count {
            return Err(DfrError::GroupTooSmall { group, count, parts: 2 });
        }
        rows.shuffle(&mut rng);
        first.extend_from_slice(&rows[..take]);
        second.extend_from_slice(&rows[take..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningEntry {
    #[serde(rename = "C")]
    pub c: f64,
    pub class_weights: Option<Vec<f64>>,
    /// `None` when the grid had a single point and nothing was fit.
    pub worst_group_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    #[serde(rename = "C")]
    pub c: f64,
    pub class_weights: Option<Vec<f64>>,
    pub table: Vec<TuningEntry>,
}

/// Worst-group accuracy of `head` on `data`, over the groups present there.
pub fn head_wga(head: &LinearHead, data: &EmbeddingDataset) -> Result<f64> {
    let preds = predict_labels(head, data.features_f64().view())?;
    worst_group_accuracy(&group_accuracies(&preds, data.labels(), data.groups(), data.n_groups())?)
}

/// Picks `C` (and class weights for the train-data variants).
///
/// With `holdout = None` the `head_data` rows are split per group into a
/// fitting part and a scoring part. Otherwise candidates are fit on
/// `head_data` and scored on `holdout`. Each candidate is one fit on one
/// balanced subsample (the same subsample for every candidate). Ties go to the
/// smaller `C`, then to the earlier class-weight candidate.
pub fn tune(head_data: &EmbeddingDataset, holdout: Option<&EmbeddingDataset>, config: &DfrConfig) -> Result<Tuning> {
    config.check()?;
    let weights = config.class_weight_candidates(head_data.n_classes());
    let candidates: Vec<(f64, Option<Vec<f64>>)> = config
        .c_grid
        .iter()
        .flat_map(|&c| weights.iter().map(move |w| (c, w.clone())))
        .collect();
    if candidates.len() == 1 {
        let (c, class_weights) = candidates.into_iter().next().expect("one candidate");
        return Ok(Tuning {
            c,
            class_weights: class_weights.clone(),
            table: vec![TuningEntry {
                c,
                class_weights,
                worst_group_accuracy: None,
            }],
        });
    }

    let (fit_part, score_part) = match holdout {
        Some(h) => {
            head_data.ensure_compatible(h)?;
            (head_data.clone(), h.clone())
        }
        None => {
            let (a, b) = stratified_halves(
                head_data,
                config.tuning_split_fraction,
                derive_seed(config.seed, streams::TUNE_SPLIT),
            )?;
            (head_data.select(&a), head_data.select(&b))
        }
    };
    let subset = group_balanced_subsample(&fit_part, derive_seed(config.seed, streams::TUNE_FIT))?;
    let raw = subset.features_f64();
    let scaler = fit_scaler(raw.view())?;
    let x = apply_scaler(&scaler, raw.view())?;

    let scores = candidates
        .par_iter()
        .map(|(c, w)| {
            let fit = fit_logreg(
                x.view(),
                subset.labels(),
                subset.n_classes(),
                &config.solver(*c, w.clone()),
                scaler.clone(),
            )?;
            head_wga(&fit.head, &score_part)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut best = 0;
    for (i, (&score, (c, _))) in scores.iter().zip(&candidates).enumerate() {
        let (best_score, best_c) = (scores[best], candidates[best].0);
        if score > best_score || (score == best_score && *c < best_c) {
            best = i;
        }
    }
    let table = candidates
        .iter()
        .zip(&scores)
        .map(|((c, w), &s)| TuningEntry {
            c: *c,
            class_weights: w.clone(),
            worst_group_accuracy: Some(s),
        })
        .collect();
    Ok(Tuning {
        c: candidates[best].0,
        class_weights: candidates[best].1.clone(),
        table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainRecord {
    pub seed: u64,
    pub subset_size: usize,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DfrResult {
    pub variant: Variant,
    #[serde(skip)]
    pub head: LinearHead,
    #[serde(rename = "chosen_C")]
    pub chosen_c: f64,
    pub chosen_class_weights: Option<Vec<f64>>,
    pub penalty: Penalty,
    pub lambda_scaling: String,
    pub scaler_fit: &'static str,
    pub tuning_fits: &'static str,
    pub retrains: Vec<RetrainRecord>,
    pub tuning: Vec<TuningEntry>,
    pub test_metrics: GroupMetrics,
}

/// Fits one head per seed on balanced subsamples of `head_data`, all under
/// `scaler`, and averages them. Retrains run in parallel; the result does not
/// depend on scheduling.
pub fn retrain_and_average(
    head_data: &EmbeddingDataset,
    scaler: &Scaler,
    solver: &SolverConfig,
    seeds: &[u64],
) -> Result<(LinearHead, Vec<RetrainRecord>)> {
    let subsets = seeds
        .iter()
        .map(|&seed| group_balanced_indices(head_data, seed))
        .collect::<Result<Vec<_>>>()?;
    // seeds that draw the same rows (always, when the data is already
    // balanced) share one fit; the fit is deterministic, so this is exact
    let mut unique: Vec<&Vec<usize>> = Vec::new();
    let slot: Vec<usize> = subsets
        .iter()
        .map(|s| match unique.iter().position(|u| *u == s) {
            Some(i) => i,
            None => {
                unique.push(s);
                unique.len() - 1
            }
        })
        .collect();
    let fits = unique
        .par_iter()
        .map(|rows| {
            let subset = head_data.select(rows);
            let x = apply_scaler(scaler, subset.features_f64().view())?;
            fit_logreg(x.view(), subset.labels(), subset.n_classes(), solver, scaler.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let heads: Vec<LinearHead> = slot.iter().map(|&i| fits[i].head.clone()).collect();
    let records = seeds
        .iter()
        .zip(&subsets)
        .zip(&slot)
        .map(|((&seed, rows), &i)| RetrainRecord {
            seed,
            subset_size: rows.len(),
            converged: fits[i].converged,
            iterations: fits[i].iterations,
        })
        .collect();
    Ok((average_weights(&heads)?, records))
}

fn check_inputs(
    train: &EmbeddingDataset,
    reweight: &EmbeddingDataset,
    test: &EmbeddingDataset,
    schema: &GroupSchema,
) -> Result<()> {
    train.ensure_compatible(reweight)?;
    train.ensure_compatible(test)?;
    if schema.n_groups() != train.n_groups() {
        return Err(DfrError::DimensionMismatch {
            context: "schema groups",
            expected: train.n_groups(),
            found: schema.n_groups(),
        });
    }
    Ok(())
}

/// The full pipeline: tune, fit the scaler on the whole reweighting data,
/// retrain and average, evaluate on `test`.
///
/// For [`Variant::ValTr`] the head is trained on `reweight`. For the
/// train-data variants it is trained on balanced subsets of `train`, and
/// `reweight` is used only to score tuning candidates.
pub fn run_dfr(
    train: &EmbeddingDataset,
    reweight: &EmbeddingDataset,
    test: &EmbeddingDataset,
    schema: &GroupSchema,
    config: &DfrConfig,
) -> Result<DfrResult> {
    config.check()?;
    check_inputs(train, reweight, test, schema)?;
    let (head_data, holdout) = if config.variant.head_data_is_train() {
        (train, Some(reweight))
    } else {
        (reweight, None)
    };
    let tuning = tune(head_data, holdout, config)?;
    let seeds: Vec<u64> = (0..config.n_retrains).map(|k| config.retrain_seed(k)).collect();
    finish(head_data, test, schema, config, tuning, &seeds)
}

fn finish(
    head_data: &EmbeddingDataset,
    test: &EmbeddingDataset,
    schema: &GroupSchema,
    config: &DfrConfig,
    tuning: Tuning,
    seeds: &[u64],
) -> Result<DfrResult> {
    if let Some(group) = head_data.group_counts().iter().position(|&c| c == 0) {
        return Err(DfrError::EmptyGroup { group });
    }
    let scaler = fit_scaler(head_data.features_f64().view())?;
    let solver = config.solver(tuning.c, tuning.class_weights.clone());
    let (head, retrains) = retrain_and_average(head_data, &scaler, &solver, seeds)?;
    let test_metrics = evaluate_head(&head, test, schema)?;
    Ok(DfrResult {
        variant: config.variant,
        head,
        chosen_c: tuning.c,
        chosen_class_weights: tuning.class_weights,
        penalty: config.penalty,
        lambda_scaling: config.lambda_scaling.describe().to_string(),
        scaler_fit: "once on the full reweighting data, shared by all retrains",
        tuning_fits: "one fit per grid point on a single balanced subsample",
        retrains,
        tuning: tuning.table,
        test_metrics,
    })
}

/// Rebuilds the averaged head from a recorded result without re-tuning.
pub fn replay(
    train: &EmbeddingDataset,
    reweight: &EmbeddingDataset,
    test: &EmbeddingDataset,
    schema: &GroupSchema,
    config: &DfrConfig,
    recorded: &DfrResult,
) -> Result<DfrResult> {
    check_inputs(train, reweight, test, schema)?;
    let head_data = if recorded.variant.head_data_is_train() { train } else { reweight };
    let tuning = Tuning {
        c: recorded.chosen_c,
        class_weights: recorded.chosen_class_weights.clone(),
        table: recorded.tuning.clone(),
    };
    let seeds: Vec<u64> = recorded.retrains.iter().map(|r| r.seed).collect();
    let config = DfrConfig {
        variant: recorded.variant,
        ..config.clone()
    };
    finish(head_data, test, schema, &config, tuning, &seeds)
}

pub fn evaluate_head(head: &LinearHead, data: &EmbeddingDataset, schema: &GroupSchema) -> Result<GroupMetrics> {
    let preds = predict_labels(head, data.features_f64().view())?;
    evaluate(&preds, data.labels(), data.groups(), data.n_groups(), &schema.train_counts())
}

/// Per-row weights `n / (K · count(key_i))` over the `K` keys present, so
/// every key carries the same total weight and the mean weight is 1.
fn inverse_frequency_weights(keys: &[usize], n_keys: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_keys];
    for &k in keys {
        counts[k] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = keys.len() as f64;
    keys.iter().map(|&k| n / (present * counts[k] as f64)).collect()
}

fn weighted_fit(data: &EmbeddingDataset, solver: &SolverConfig, weights: &[f64]) -> Result<LinearHead> {
    let raw = data.features_f64();
    let scaler = fit_scaler(raw.view())?;
    let x = apply_scaler(&scaler, raw.view())?;
    let options = FitOptions {
        sample_weights: Some(weights),
        warm_start: None,
    };
    Ok(fit_logreg_with(x.view(), data.labels(), data.n_classes(), solver, scaler, options)?.head)
}

/// Classifier retraining with class-balanced sampling, in expectation.
pub fn crt_baseline(train: &EmbeddingDataset, solver: &SolverConfig) -> Result<LinearHead> {
    weighted_fit(train, solver, &inverse_frequency_weights(train.labels(), train.n_classes()))
}

/// Retraining with a sampler that draws a group uniformly, then a row of that
/// group, in expectation.
pub fn group_balanced_sampling_retrain(data: &EmbeddingDataset, solver: &SolverConfig) -> Result<LinearHead> {
    if let Some(group) = data.group_counts().iter().position(|&c| c == 0) {
        return Err(DfrError::EmptyGroup { group });
    }
    weighted_fit(data, solver, &inverse_frequency_weights(data.groups(), data.n_groups()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LwsConfig {
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for LwsConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LwsOutcome {
    pub scales: Vec<f64>,
    pub head: LinearHead,
    pub iterations: usize,
}

/// Learnable weight scaling: with the head frozen, learns one positive factor
/// per class that multiplies that class's logit (weights and bias), under a
/// class-balanced cross-entropy. The loss is convex in the factors; plain
/// gradient descent with backtracking from all-ones.
pub fn lws_baseline(frozen: &LinearHead, data: &EmbeddingDataset, config: &LwsConfig) -> Result<LwsOutcome> {
    let x = frozen.scaler.apply(data.features_f64().view())?;
    if frozen.dim() != x.ncols() {
        return Err(DfrError::DimensionMismatch {
            context: "frozen head width",
            expected: frozen.dim(),
            found: x.ncols(),
        });
    }
    let logits = frozen.scaled_logits(x.view());
    let weights = inverse_frequency_weights(data.labels(), data.n_classes());
    let labels = data.labels();
    let c = frozen.n_classes();
    let n = labels.len() as f64;

    let loss_grad = |f: &Array1<f64>| -> (f64, Array1<f64>) {
        let mut loss = 0.0;
        let mut grad = Array1::zeros(c);
        for ((row, &y), &w) in logits.outer_iter().zip(labels).zip(&weights) {
            let z: Vec<f64> = row.iter().zip(f).map(|(l, s)| l * s).collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += w * (lse - z[y]);
            for k in 0..c {
                let p = (z[k] - lse).exp();
                grad[k] += w * (p - if k == y { 1.0 } else { 0.0 }) * row[k];
            }
        }
        (loss / n, grad / n)
    };

    let mut f = Array1::<f64>::ones(c);
    let (mut value, mut grad) = loss_grad(&f);
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < config.max_iters && grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) > config.tolerance {
        iterations += 1;
        let sq: f64 = grad.iter().map(|g| g * g).sum();
        loop {
            let trial = &f - &(&grad * step);
            let (v, g) = loss_grad(&trial);
            if v <= value - 0.5 * step * sq {
                f = trial;
                value = v;
                grad = g;
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                break;
            }
        }
        if step < 1e-20 {
            break;
        }
    }
    Ok(LwsOutcome {
        scales: f.to_vec(),
        head: scale_head(frozen, f.as_slice().expect("contiguous")),
        iterations,
    })
}

/// Multiplies row `k` of the weights and bias `k` by `scales[k]`.
pub fn scale_head(head: &LinearHead, scales: &[f64]) -> LinearHead {
    let mut weights: Array2<f64> = head.weights.clone();
    let mut bias = head.bias.clone();
    for (k, &s) in scales.iter().enumerate() {
        weights.row_mut(k).mapv_inplace(|v| v * s);
        bias[k] *= s;
    }
    LinearHead {
        weights,
        bias,
        scaler: head.scaler.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::solver::predict_labels;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::collections::BTreeSet;

    /// Two classes, two attributes; group `2y + a`. Feature 0 carries the label,
    /// feature 1 the attribute.
    fn grouped(seed: u64, counts: &[usize]) -> EmbeddingDataset {
        let mut rng = rng_from_seed(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for (g, &count) in counts.iter().enumerate() {
            let (y, a) = (g / 2, g % 2);
            for _ in 0..count {
                let n0: f64 = rng.sample(StandardNormal);
                let n1: f64 = rng.sample(StandardNormal);
                let n2: f64 = rng.sample(StandardNormal);
                rows.extend([
                    (2.0 * y as f64 - 1.0 + 0.8 * n0) as f32,
                    (2.0 * a as f64 - 1.0 + 0.3 * n1) as f32,
                    n2 as f32,
                ]);
                labels.push(y);
                groups.push(g);
            }
        }
        let n = labels.len();
        EmbeddingDataset::new(Array2::from_shape_vec((n, 3), rows).unwrap(), labels, groups, 2, 4).unwrap()
    }

    fn fake_groups(counts: &[usize]) -> EmbeddingDataset {
        let groups: Vec<usize> = counts.iter().enumerate().flat_map(|(g, &c)| std::iter::repeat_n(g, c)).collect();
        let n = groups.len();
        let labels = groups.iter().map(|g| g / 2).collect();
        EmbeddingDataset::new_unchecked(Array2::zeros((n, 1)), labels, groups, 2, counts.len())
    }

    #[test]
    fn waterbirds_counts_subsample_to_the_smallest_group() {
        let data = fake_groups(&[3498, 184, 56, 1057]);
        let sub = group_balanced_subsample(&data, 0).unwrap();
        assert_eq!(sub.group_counts(), vec![56, 56, 56, 56]);
        assert_eq!(sub.n_rows(), 224);
    }

    #[test]
    fn balanced_input_is_copied_whole() {
        let data = fake_groups(&[7, 7, 7, 7]);
        let idx = group_balanced_indices(&data, 3).unwrap();
        assert_eq!(idx, (0..28).collect::<Vec<_>>());
    }

    #[test]
    fn seeds_share_the_smallest_group_only() {
        let data = fake_groups(&[300, 20, 300, 300]);
        let a: BTreeSet<usize> = group_balanced_indices(&data, 1).unwrap().into_iter().collect();
        let b: BTreeSet<usize> = group_balanced_indices(&data, 2).unwrap().into_iter().collect();
        let smallest: BTreeSet<usize> = (300..320).collect();
        assert!(smallest.is_subset(&a) && smallest.is_subset(&b));
        assert_ne!(a, b);
    }

    #[test]
    fn empty_group_is_named() {
        let data = fake_groups(&[5, 0, 5, 5]);
        assert!(matches!(
            group_balanced_subsample(&data, 0),
            Err(DfrError::EmptyGroup { group: 1 })
        ));
    }

    proptest! {
        #[test]
        fn subsample_counts_equal_the_minimum(counts in proptest::collection::vec(1usize..60, 2..7), seed: u64) {
            let data = fake_groups(&counts);
            let idx = group_balanced_indices(&data, seed).unwrap();
            let m = *counts.iter().min().unwrap();
            let sub = data.select(&idx);
            prop_assert!(sub.group_counts().iter().all(|&c| c == m));
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn halves_keep_every_group() {
        let data = fake_groups(&[10, 3, 7, 2]);
        let (a, b) = stratified_halves(&data, 0.5, 0).unwrap();
        assert_eq!(a.len() + b.len(), 22);
        for part in [&a, &b] {
            assert!(data.select(part).group_counts().iter().all(|&c| c > 0));
        }
        let single = fake_groups(&[10, 1, 7, 2]);
        assert!(matches!(
            stratified_halves(&single, 0.5, 0),
            Err(DfrError::GroupTooSmall { group: 1, .. })
        ));
    }

    #[test]
    fn single_point_grid_needs_no_fits() {
        // one class only in half the groups would make any fit fail
        let data = fake_groups(&[1, 1, 1, 1]);
        let config = DfrConfig {
            c_grid: vec![0.3],
            ..DfrConfig::default()
        };
        let t = tune(&data, None, &config).unwrap();
        assert_eq!(t.c, 0.3);
        assert_eq!(t.table.len(), 1);
        assert_eq!(t.table[0].worst_group_accuracy, None);
    }

    #[test]
    fn ties_prefer_the_smaller_c() {
        // large, clean data: both candidates classify perfectly
        let data = grouped(1, &[60, 60, 60, 60]);
        let holdout = grouped(2, &[40, 40, 40, 40]);
        let clean = |d: &EmbeddingDataset| {
            let mut x = d.features().to_owned();
            for (mut row, &y) in x.outer_iter_mut().zip(d.labels()) {
                row[0] = if y == 1 { 5.0 } else { -5.0 };
            }
            d.with_features(x).unwrap()
        };
        let config = DfrConfig {
            variant: Variant::TrTr,
            c_grid: vec![1.0, 0.3],
            class_weight_grid: vec![1.0],
            ..DfrConfig::default()
        };
        let t = tune(&clean(&data), Some(&clean(&holdout)), &config).unwrap();
        assert_eq!(t.table.len(), 2);
        assert_eq!(t.table[0].worst_group_accuracy, t.table[1].worst_group_accuracy);
        assert_eq!(t.c, 0.3);
    }

    #[test]
    fn class_weight_candidates_sweep_then_swap() {
        let config = DfrConfig {
            variant: Variant::TrTr,
            class_weight_grid: vec![1.0, 2.0, 10.0],
            ..DfrConfig::default()
        };
        let cands = config.class_weight_candidates(2);
        assert_eq!(
            cands,
            vec![
                None,
                Some(vec![2.0, 1.0]),
                Some(vec![10.0, 1.0]),
                Some(vec![1.0, 2.0]),
                Some(vec![1.0, 10.0])
            ]
        );
        let val = DfrConfig::default();
        assert_eq!(val.class_weight_candidates(2), vec![None]);
    }

    #[test]
    fn run_records_one_seed_per_retrain_and_replays_exactly() {
        let train = grouped(3, &[200, 20, 20, 200]);
        let val = grouped(4, &[40, 40, 40, 40]);
        let test = grouped(5, &[100, 100, 100, 100]);
        let schema = GroupSchema::infer(&train, &[&val, &test]).unwrap();
        let config = DfrConfig {
            n_retrains: 3,
            c_grid: vec![1.0, 0.1],
            seed: 8,
            ..DfrConfig::default()
        };
        let result = run_dfr(&train, &val, &test, &schema, &config).unwrap();
        assert_eq!(result.retrains.len(), 3);
        assert!(result.retrains.iter().all(|r| r.subset_size == 160));
        let again = replay(&train, &val, &test, &schema, &config, &result).unwrap();
        assert_eq!(again.head, result.head);
        // the spurious feature is useless on balanced data; the probe should be good
        assert!(result.test_metrics.worst > 0.8, "{:?}", result.test_metrics);
    }

    #[test]
    fn crt_on_balanced_classes_equals_plain_fit() {
        let data = grouped(6, &[30, 10, 10, 30]);
        let solver = SolverConfig::default().with_c(0.5);
        let crt = crt_baseline(&data, &solver).unwrap();
        let raw = data.features_f64();
        let scaler = fit_scaler(raw.view()).unwrap();
        let x = apply_scaler(&scaler, raw.view()).unwrap();
        let plain = fit_logreg(x.view(), data.labels(), 2, &solver, scaler).unwrap().head;
        assert_eq!(crt, plain);
    }

    #[test]
    fn crt_needs_both_classes() {
        let data = fake_groups(&[5, 5]);
        let one_class = EmbeddingDataset::new_unchecked(Array2::zeros((10, 1)), vec![0; 10], data.groups().to_vec(), 2, 2);
        assert!(matches!(
            crt_baseline(&one_class, &SolverConfig::default()),
            Err(DfrError::MissingClass { class: 1 })
        ));
    }

    #[test]
    fn balanced_groups_make_group_sampling_a_plain_fit() {
        let data = grouped(7, &[25, 25, 25, 25]);
        let solver = SolverConfig::default();
        let a = group_balanced_sampling_retrain(&data, &solver).unwrap();
        let b = crt_baseline(&data, &solver).unwrap();
        assert_eq!(a, b);
        assert_eq!(group_balanced_sampling_retrain(&data, &solver).unwrap(), a);
    }

    #[test]
    fn lws_without_steps_is_the_identity() {
        let data = grouped(8, &[50, 5, 5, 50]);
        let head = crt_baseline(&data, &SolverConfig::default()).unwrap();
        let out = lws_baseline(&head, &data, &LwsConfig { max_iters: 0, ..LwsConfig::default() }).unwrap();
        assert_eq!(out.scales, vec![1.0, 1.0]);
        assert_eq!(out.head, head);
        let fitted = lws_baseline(&head, &data, &LwsConfig::default()).unwrap();
        assert!(fitted.scales.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn common_scaling_keeps_predictions() {
        let data = grouped(9, &[20, 20, 20, 20]);
        let head = crt_baseline(&data, &SolverConfig::default()).unwrap();
        let x = data.features_f64();
        let base = predict_labels(&head, x.view()).unwrap();
        let scaled = scale_head(&head, &[3.5, 3.5]);
        assert_eq!(predict_labels(&scaled, x.view()).unwrap(), base);
    }

    #[test]
    fn inverse_frequency_weights_balance_keys() {
        let w = inverse_frequency_weights(&[0, 0, 0, 1], 3);
        // two keys present, n = 4: 4/(2·3) and 4/(2·1)
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[3] - 2.0).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 4.0).abs() < 1e-12);
    }
}
