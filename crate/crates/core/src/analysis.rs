//! Diagnostics: decoded accuracy, Core-Only evaluation, logit additivity, and
//! the retrain-count, ℓ1 and correlation-strength sweeps.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, GroupSchema};
use crate::dfr::{evaluate_head, run_dfr, DfrConfig, DfrResult};
use crate::error::{DfrError, Result};
use crate::metrics::{evaluate, GroupMetrics};
use crate::mlp::{extract_features, train_erm, MlpModel, TrainConfig};
use crate::rng::derive_seed;
use crate::solver::{predict_logits, LinearHead, Penalty};
use crate::synth::{ablate_spurious_block, generate, AblationMode, RawDataset, SpuriousSpec};

pub const DEFAULT_P_CORR: [f64; 6] = [0.8, 0.9, 0.95, 0.99, 0.995, 1.0];
pub const DEFAULT_RETRAIN_GRID: [usize; 5] = [1, 3, 5, 10, 20];

/// Stream tags for the seeds of one pipeline run.
mod streams {
    pub const DATA: u64 = 0x4441_5441;
    pub const ERM: u64 = 0x45_524d;
    pub const DFR: u64 = 0x0044_4652;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentGrid {
    pub p_corr: Vec<f64>,
    pub n_outer_seeds: usize,
    /// Outer seeds are `first_seed..first_seed + n_outer_seeds`.
    pub first_seed: u64,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            p_corr: DEFAULT_P_CORR.to_vec(),
            n_outer_seeds: 5,
            first_seed: 0,
        }
    }
}

impl ExperimentGrid {
    pub fn check(&self) -> Result<()> {
        if self.p_corr.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DfrError::InvalidArgument("p_corr values must lie in [0, 1]".into()));
        }
        if self.n_outer_seeds == 0 {
            return Err(DfrError::InvalidArgument("n_outer_seeds must be positive".into()));
        }
        Ok(())
    }
}

/// Mean, sample standard deviation and median of a list of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            median: median(values),
            values: values.to_vec(),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// ERM-trained model plus the datasets it came from.
#[derive(Debug, Clone)]
pub struct ErmRun {
    pub train: RawDataset,
    pub val: RawDataset,
    pub test: RawDataset,
    pub schema: GroupSchema,
    pub model: MlpModel,
}

/// Seeds used by one outer run of `seed`.
pub fn run_seeds(seed: u64) -> (u64, u64, u64) {
    (
        derive_seed(seed, streams::DATA),
        derive_seed(seed, streams::ERM),
        derive_seed(seed, streams::DFR),
    )
}

/// Generates data and trains the extractor on the full training split.
pub fn erm_run(spec: &SpuriousSpec, train_config: &TrainConfig, seed: u64) -> Result<ErmRun> {
    let (data_seed, erm_seed, _) = run_seeds(seed);
    let (train, val, test) = generate(spec, data_seed)?;
    let schema = GroupSchema::infer(&train.data, &[&val.data, &test.data])?;
    let config = TrainConfig {
        seed: erm_seed,
        ..train_config.clone()
    };
    let model = train_erm(&train.data, &config)?.model;
    Ok(ErmRun {
        train,
        val,
        test,
        schema,
        model,
    })
}

/// Metrics of the model's own head.
pub fn model_metrics(model: &MlpModel, data: &EmbeddingDataset, schema: &GroupSchema) -> Result<GroupMetrics> {
    let preds = model.predict_labels(data.features_f64().view())?;
    evaluate(&preds, data.labels(), data.groups(), data.n_groups(), &schema.train_counts())
}

/// The model's own head on test inputs with the spurious block zeroed.
pub fn core_only_accuracy(model: &MlpModel, raw_test: &RawDataset, schema: &GroupSchema) -> Result<GroupMetrics> {
    let ablated = ablate_spurious_block(raw_test, AblationMode::ZeroSpurious)?;
    model_metrics(model, &ablated.data, schema)
}

/// Upper reference for decoding: an extractor trained and evaluated with the
/// spurious block zeroed, on the same data and seeds as [`erm_run`].
pub fn core_only_oracle(spec: &SpuriousSpec, train_config: &TrainConfig, seed: u64) -> Result<GroupMetrics> {
    let (data_seed, erm_seed, _) = run_seeds(seed);
    let (train, val, test) = generate(spec, data_seed)?;
    let schema = GroupSchema::infer(&train.data, &[&val.data, &test.data])?;
    let ablated = ablate_spurious_block(&train, AblationMode::ZeroSpurious)?;
    let config = TrainConfig {
        seed: erm_seed,
        ..train_config.clone()
    };
    let model = train_erm(&ablated.data, &config)?.model;
    core_only_accuracy(&model, &test, &schema)
}

/// A last-layer probe on frozen features, trained on the (balanced)
/// validation split and scored on test.
pub fn decoded_accuracy(
    model: &MlpModel,
    raw_val: &EmbeddingDataset,
    raw_test: &EmbeddingDataset,
    schema: &GroupSchema,
    config: &DfrConfig,
) -> Result<DfrResult> {
    let val = extract_features(model, raw_val)?;
    let test = extract_features(model, raw_test)?;
    let config = DfrConfig {
        variant: crate::dfr::Variant::ValTr,
        ..config.clone()
    };
    run_dfr(&val, &val, &test, schema, &config)
}

/// Anything that maps raw block inputs to logits.
pub trait LogitModel {
    fn raw_logits(&self, x: &Array2<f64>) -> Result<Array2<f64>>;
}

impl LogitModel for LinearHead {
    fn raw_logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        predict_logits(self, x.view())
    }
}

impl LogitModel for MlpModel {
    fn raw_logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.logits(x.view())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditivityReport {
    /// `max |L_full − (L_core + L_sp − L_zero)|` over all entries.
    pub max_abs_deviation: f64,
    /// Per class, R² of `L_full` regressed on `L_core + L_sp − L_zero`.
    pub r_squared: Vec<f64>,
}

/// Compares logits on full inputs with the sum of logits on each block alone.
///
/// `L_zero` is the logit at the all-zero input: the constant part of the map,
/// which the two single-block evaluations each contain once. For a linear head
/// (even behind a scaler) the map is affine and the deviation is zero up to
/// rounding.
pub fn logit_additivity(model: &impl LogitModel, raw: &RawDataset) -> Result<AdditivityReport> {
    let x = raw.inputs_f64();
    let full = model.raw_logits(&x)?;
    let core = model.raw_logits(&ablate_spurious_block(raw, AblationMode::ZeroSpurious)?.inputs_f64())?;
    let spurious = model.raw_logits(&ablate_spurious_block(raw, AblationMode::ZeroCore)?.inputs_f64())?;
    let zero = model.raw_logits(&Array2::zeros((1, x.ncols())))?;
    let mut sum = &core + &spurious;
    sum -= &zero.row(0);
    let max_abs_deviation = full
        .iter()
        .zip(&sum)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let r_squared = (0..full.ncols())
        .map(|k| r_squared(&sum.column(k).to_vec(), &full.column(k).to_vec()))
        .collect();
    Ok(AdditivityReport {
        max_abs_deviation,
        r_squared,
    })
}

/// R² of the least-squares line of `y` on `x`; 1 when `y` is constant and fit.
fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Test worst-group accuracy for each retrain count, over outer seeds that
/// vary only the reweighting draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainsRow {
    pub n_retrains: usize,
    pub worst_group: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainsTable {
    pub rows: Vec<RetrainsRow>,
}

impl RetrainsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_retrains,wga_mean,wga_std,wga_median\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.n_retrains, r.worst_group.mean, r.worst_group.std, r.worst_group.median
            ));
        }
        out
    }
}

/// Runs the head pipeline on fixed embeddings for every `k` in `grid` and
/// every outer seed. The DFR seed of outer seed `s` is the same for every `k`.
pub fn ablation_retrains(
    train: &EmbeddingDataset,
    reweight: &EmbeddingDataset,
    test: &EmbeddingDataset,
    schema: &GroupSchema,
    config: &DfrConfig,
    grid: &[usize],
    outer_seeds: &[u64],
) -> Result<RetrainsTable> {
    let rows = grid
        .iter()
        .map(|&k| {
            let wgas = outer_seeds
                .iter()
                .map(|&s| {
                    let cfg = DfrConfig {
                        n_retrains: k,
                        seed: s,
                        ..config.clone()
                    };
                    Ok(run_dfr(train, reweight, test, schema, &cfg)?.test_metrics.worst)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(RetrainsRow {
                n_retrains: k,
                worst_group: Summary::of(&wgas),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrainsTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Pair {
    pub seed: u64,
    pub with_l1: f64,
    pub without_penalty: f64,
    #[serde(rename = "chosen_C")]
    pub chosen_c: f64,
}

/// One DFR run with the tuned ℓ1 penalty and one without any penalty, on the
/// same data and the same retrain seeds. The unpenalized arm has nothing to
/// tune, so its grid collapses to one point.
pub fn ablation_l1(
    train: &EmbeddingDataset,
    reweight: &EmbeddingDataset,
    test: &EmbeddingDataset,
    schema: &GroupSchema,
    config: &DfrConfig,
) -> Result<L1Pair> {
    let l1 = run_dfr(
        train,
        reweight,
        test,
        schema,
        &DfrConfig {
            penalty: Penalty::L1,
            ..config.clone()
        },
    )?;
    let none = run_dfr(
        train,
        reweight,
        test,
        schema,
        &DfrConfig {
            penalty: Penalty::None,
            c_grid: vec![1.0],
            ..config.clone()
        },
    )?;
    debug_assert_eq!(
        l1.retrains.iter().map(|r| r.seed).collect::<Vec<_>>(),
        none.retrains.iter().map(|r| r.seed).collect::<Vec<_>>()
    );
    Ok(L1Pair {
        seed: config.seed,
        with_l1: l1.test_metrics.worst,
        without_penalty: none.test_metrics.worst,
        chosen_c: l1.chosen_c,
    })
}

/// One outer run of the correlation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub p_corr: f64,
    pub seed: u64,
    pub erm: GroupMetrics,
    pub core_only: GroupMetrics,
    pub dfr: GroupMetrics,
    #[serde(rename = "chosen_C")]
    pub chosen_c: f64,
}

/// Generate, train ERM, evaluate it (original and Core-Only), then retrain the
/// last layer on the validation split's features.
pub fn pipeline_cell(
    spec: &SpuriousSpec,
    train_config: &TrainConfig,
    dfr_config: &DfrConfig,
    seed: u64,
) -> Result<SweepCell> {
    let run = erm_run(spec, train_config, seed)?;
    let (_, _, dfr_seed) = run_seeds(seed);
    let erm = model_metrics(&run.model, &run.test.data, &run.schema)?;
    let core_only = core_only_accuracy(&run.model, &run.test, &run.schema)?;
    let dfr = decoded_accuracy(
        &run.model,
        &run.val.data,
        &run.test.data,
        &run.schema,
        &DfrConfig {
            seed: dfr_seed,
            ..dfr_config.clone()
        },
    )?;
    Ok(SweepCell {
        p_corr: spec.p_corr,
        seed,
        erm,
        core_only,
        dfr: dfr.test_metrics,
        chosen_c: dfr.chosen_c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p_corr: f64,
    pub erm_wga: Summary,
    pub core_only_wga: Summary,
    pub dfr_wga: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// ERM trained without any label-attribute correlation.
    pub no_correlation_erm_wga: Summary,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p_corr,seed,erm_wga,core_only_wga,dfr_wga,chosen_C\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.p_corr, c.seed, c.erm.worst, c.core_only.worst, c.dfr.worst, c.chosen_c
            ));
        }
        out
    }
}

/// For every `p_corr` and outer seed `0..n_outer_seeds`: one [`pipeline_cell`].
/// `family(p)` builds the dataset spec for a correlation level; the
/// no-correlation reference uses `p = 1/C`, where the attribute is
/// independent of the label.
pub fn pcorr_sweep(
    grid: &ExperimentGrid,
    family: impl Fn(f64) -> SpuriousSpec + Sync,
    train_config: &TrainConfig,
    dfr_config: &DfrConfig,
) -> Result<SweepReport> {
    grid.check()?;
    let seeds: Vec<u64> = (grid.first_seed..grid.first_seed + grid.n_outer_seeds as u64).collect();
    let n_classes = family(0.5).n_classes;
    let mut jobs: Vec<(f64, u64)> = Vec::new();
    for &p in std::iter::once(&(1.0 / n_classes as f64)).chain(&grid.p_corr) {
        for &s in &seeds {
            jobs.push((p, s));
        }
    }
    let cells = jobs
        .par_iter()
        .map(|&(p, s)| pipeline_cell(&family(p), train_config, dfr_config, s))
        .collect::<Result<Vec<_>>>()?;
    let (reference, cells): (Vec<_>, Vec<_>) = cells.into_iter().enumerate().partition(|(i, _)| *i < seeds.len());
    let reference: Vec<f64> = reference.iter().map(|(_, c)| c.erm.worst).collect();
    let cells: Vec<SweepCell> = cells.into_iter().map(|(_, c)| c).collect();
    let rows = grid
        .p_corr
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let block = &cells[i * seeds.len()..(i + 1) * seeds.len()];
            let pick = |f: fn(&SweepCell) -> f64| block.iter().map(f).collect::<Vec<_>>();
            SweepRow {
                p_corr: p,
                erm_wga: Summary::of(&pick(|c| c.erm.worst)),
                core_only_wga: Summary::of(&pick(|c| c.core_only.worst)),
                dfr_wga: Summary::of(&pick(|c| c.dfr.worst)),
            }
        })
        .collect();
    Ok(SweepReport {
        no_correlation_erm_wga: Summary::of(&reference),
        rows,
        cells,
    })
}

/// Test worst-group accuracy of each last-layer method on one outer seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub seed: u64,
    /// Balanced subsamples of held-out data.
    pub dfr_val: f64,
    /// Balanced subsamples of the training data.
    pub dfr_train: f64,
    pub group_sampling_train: f64,
    pub group_sampling_val: f64,
    pub crt_train: f64,
    pub lws_train: f64,
}

impl MethodComparison {
    pub const CSV_HEADER: &'static str =
        "seed,dfr_val,dfr_train,group_sampling_train,group_sampling_val,crt_train,lws_train";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.seed,
            self.dfr_val,
            self.dfr_train,
            self.group_sampling_train,
            self.group_sampling_val,
            self.crt_train,
            self.lws_train
        )
    }
}

/// Fits `fit` for every `C` in the grid and keeps the head with the best
/// worst-group accuracy on `val` (ties to the smaller `C`).
fn tuned_baseline(
    c_grid: &[f64],
    config: &DfrConfig,
    val: &EmbeddingDataset,
    fit: impl Fn(&crate::solver::SolverConfig) -> Result<LinearHead>,
) -> Result<LinearHead> {
    let mut best: Option<(f64, f64, LinearHead)> = None;
    for &c in c_grid {
        let head = fit(&config.solver(c, None))?;
        let score = crate::dfr::head_wga(&head, val)?;
        let better = match &best {
            None => true,
            Some((s, bc, _)) => score > *s || (score == *s && c < *bc),
        };
        if better {
            best = Some((score, c, head));
        }
    }
    Ok(best.expect("nonempty grid").2)
}

/// One ERM extractor, then every last-layer method on its features. Baseline
/// regularization is picked on the validation split like DFR's.
pub fn compare_methods(
    spec: &SpuriousSpec,
    train_config: &TrainConfig,
    dfr_config: &DfrConfig,
    seed: u64,
) -> Result<MethodComparison> {
    use crate::dfr::{crt_baseline, group_balanced_sampling_retrain, lws_baseline, LwsConfig, Variant};
    let run = erm_run(spec, train_config, seed)?;
    let (_, _, dfr_seed) = run_seeds(seed);
    let train = extract_features(&run.model, &run.train.data)?;
    let val = extract_features(&run.model, &run.val.data)?;
    let test = extract_features(&run.model, &run.test.data)?;
    let schema = &run.schema;
    let wga = |head: &LinearHead| -> Result<f64> { Ok(evaluate_head(head, &test, schema)?.worst) };
    let dfr = |variant| -> Result<f64> {
        let cfg = DfrConfig {
            variant,
            seed: dfr_seed,
            ..dfr_config.clone()
        };
        Ok(run_dfr(&train, &val, &test, schema, &cfg)?.test_metrics.worst)
    };
    let grid = &dfr_config.c_grid;
    let gs_train = tuned_baseline(grid, dfr_config, &val, |s| group_balanced_sampling_retrain(&train, s))?;
    let gs_val = tuned_baseline(grid, dfr_config, &val, |s| group_balanced_sampling_retrain(&val, s))?;
    let crt = tuned_baseline(grid, dfr_config, &val, |s| crt_baseline(&train, s))?;
    let lws = lws_baseline(&run.model.output_head(), &train, &LwsConfig::default())?;
    Ok(MethodComparison {
        seed,
        dfr_val: dfr(Variant::ValTr)?,
        dfr_train: dfr(Variant::TrTr)?,
        group_sampling_train: wga(&gs_train)?,
        group_sampling_val: wga(&gs_val)?,
        crt_train: wga(&crt)?,
        lws_train: wga(&lws.head)?,
    })
}

/// Test metrics of `head` on features of `data`; convenience for harnesses.
pub fn head_metrics(head: &LinearHead, data: &EmbeddingDataset, schema: &GroupSchema) -> Result<GroupMetrics> {
    evaluate_head(head, data, schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Layer;
    use crate::preprocess::Scaler;
    use crate::rng::rng_from_seed;
    use ndarray::Array1;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small_spec(p: f64) -> SpuriousSpec {
        SpuriousSpec {
            n_train: 200,
            n_val: 80,
            n_test: 200,
            ..SpuriousSpec::dominoes(p)
        }
    }

    #[test]
    fn linear_heads_are_exactly_additive() {
        let (_, _, test) = generate(&small_spec(0.9), 1).unwrap();
        let mut rng = rng_from_seed(2);
        let d = test.data.dim();
        let head = LinearHead {
            weights: Array2::from_shape_simple_fn((2, d), || rng.sample(StandardNormal)),
            bias: Array1::from_shape_simple_fn(2, || rng.sample(StandardNormal)),
            scaler: Scaler {
                mean: Array1::from_shape_simple_fn(d, || rng.sample(StandardNormal)),
                std: Array1::from_shape_simple_fn(d, || 0.5 + rng.random::<f64>()),
            },
        };
        let report = logit_additivity(&head, &test).unwrap();
        assert!(report.max_abs_deviation < 1e-9, "{report:?}");
    }

    #[test]
    fn relu_identity_region_is_additive() {
        // positive inputs stay in the linear region of an identity hidden layer
        let (_, _, mut test) = generate(&small_spec(0.9), 3).unwrap();
        let shifted = test.data.features().mapv(|v| v.abs() + 0.1);
        test.data = test.data.with_features(shifted).unwrap();
        let d = test.data.dim();
        let model = MlpModel::from_layers(vec![
            Layer {
                weights: Array2::eye(d),
                bias: Array1::zeros(d),
            },
            Layer {
                weights: Array2::from_shape_fn((2, d), |(k, j)| (k + j) as f64 * 0.1 - 0.3),
                bias: Array1::from(vec![0.2, -0.1]),
            },
        ])
        .unwrap();
        let report = logit_additivity(&model, &test).unwrap();
        assert!(report.max_abs_deviation < 1e-9);
    }

    #[test]
    fn spurious_reader_is_at_chance_on_core_only_data() {
        let spec = small_spec(1.0);
        let (train, _, test) = generate(&spec, 4).unwrap();
        let schema = GroupSchema::infer(&train.data, &[&test.data]).unwrap();
        let d = spec.input_dim();
        // hidden layer copies the spurious block; output reads it
        let mut w1 = Array2::zeros((d, d));
        for j in spec.d_core..d {
            w1[[j, j]] = 1.0;
        }
        let model = MlpModel::from_layers(vec![
            Layer {
                weights: w1,
                bias: Array1::zeros(d),
            },
            Layer {
                weights: Array2::from_shape_fn((2, d), |(k, j)| if j >= spec.d_core { k as f64 } else { 0.0 }),
                bias: Array1::zeros(2),
            },
        ])
        .unwrap();
        let metrics = core_only_accuracy(&model, &test, &schema).unwrap();
        // constant logits: ties go to class 0, so class 1 groups get nothing right
        assert!((metrics.mean_over_examples - 0.5).abs() < 0.05);
    }

    #[test]
    fn noise_features_decode_to_chance() {
        let spec = small_spec(0.9);
        let (train, val, test) = generate(&spec, 5).unwrap();
        let schema = GroupSchema::infer(&train.data, &[&val.data, &test.data]).unwrap();
        let mut rng = rng_from_seed(6);
        let noise = |ds: &EmbeddingDataset, rng: &mut crate::rng::DfrRng| {
            let x = Array2::from_shape_simple_fn((ds.n_rows(), 8), || rng.sample::<f32, _>(StandardNormal));
            EmbeddingDataset::new(x, ds.labels().to_vec(), ds.groups().to_vec(), 2, 4).unwrap()
        };
        let (v, t) = (noise(&val.data, &mut rng), noise(&test.data, &mut rng));
        let result = run_dfr(&v, &v, &t, &schema, &DfrConfig::default()).unwrap();
        assert!(result.test_metrics.mean_over_examples < 0.62, "{:?}", result.test_metrics);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 10.0]);
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 2.5);
        assert!((s.std - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[5.0]).std, 0.0);
    }

    #[test]
    fn retrain_table_shape_and_determinism() {
        let spec = small_spec(0.9);
        let (train, val, test) = generate(&spec, 7).unwrap();
        let schema = GroupSchema::infer(&train.data, &[&val.data, &test.data]).unwrap();
        let config = DfrConfig {
            c_grid: vec![0.3],
            ..DfrConfig::default()
        };
        let run = || ablation_retrains(&train.data, &val.data, &test.data, &schema, &config, &[1, 3], &[0, 1, 2]).unwrap();
        let table = run();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.to_csv().lines().count(), 3);
        assert_eq!(table, run());
    }

    #[test]
    fn l1_arms_share_subsample_seeds() {
        let spec = small_spec(0.9);
        let (train, val, test) = generate(&spec, 8).unwrap();
        let schema = GroupSchema::infer(&train.data, &[&val.data, &test.data]).unwrap();
        let config = DfrConfig {
            n_retrains: 2,
            ..DfrConfig::default()
        };
        let pair = ablation_l1(&train.data, &val.data, &test.data, &schema, &config).unwrap();
        assert!(pair.with_l1 > 0.5 && pair.without_penalty > 0.5, "{pair:?}");
    }

    #[test]
    fn r_squared_of_a_line_is_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        assert!((r_squared(&x, &y) - 1.0).abs() < 1e-12);
    }
}
