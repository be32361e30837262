//! The acceptance suite. Each criterion returns a list of checks; hard checks
//! fail, soft ones warn. Timings go to the console only, so `verify.json`
//! stays reproducible.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use dfr_core::analysis::{
    ablation_retrains, compare_methods, core_only_oracle, erm_run, median, pcorr_sweep, pipeline_cell, run_seeds,
    ExperimentGrid, MethodComparison,
};
use dfr_core::data::EmbeddingDataset;
use dfr_core::dfr::{group_balanced_indices, DfrConfig};
use dfr_core::mlp::{extract_features, MlpModel, TrainConfig};
use dfr_core::preprocess::Scaler;
use dfr_core::rng::{derive_seed, rng_from_seed};
use dfr_core::solver::{fit_logreg, predict_logits, LinearHead, Penalty, SolverConfig};
use dfr_core::synth::{SpuriousSpec, ValDistribution};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::commands::{execute, l1_pair, Command, Invocation, Source};
use crate::manifest::{Manifest, MANIFEST_FILE};
use crate::oracle::{coordinate_descent, finite_difference_gradient, two_parameter_minimum, Instance};

/// Set while the reproducibility check reruns `verify`, so the nested run
/// does not print criterion lines of its own.
static NESTED: AtomicBool = AtomicBool::new(false);

pub fn nested() -> bool {
    NESTED.load(Ordering::Relaxed)
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Warn,
    Fail,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Self::Pass => "PASS",
            Self::Warn => "WARN",
            Self::Fail => "FAIL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl Check {
    fn hard(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status: if ok { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        }
    }

    fn soft(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status: if ok { Status::Pass } else { Status::Warn },
            detail: detail.into(),
        }
    }

    fn runtime(elapsed: Duration, budget_secs: u64) -> Self {
        Self::hard(
            format!("runtime under {budget_secs} s"),
            elapsed <= Duration::from_secs(budget_secs),
            format!("budget {budget_secs} s"),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionReport {
    pub id: u32,
    pub name: &'static str,
    pub status: Status,
    pub checks: Vec<Check>,
}

impl CriterionReport {
    fn new(id: u32, checks: Vec<Check>) -> Self {
        Self {
            id,
            name: NAMES[id as usize - 1],
            status: checks.iter().map(|c| c.status).max().unwrap_or(Status::Pass),
            checks,
        }
    }

    /// The one-line console summary.
    pub fn line(&self, elapsed: Duration) -> String {
        let failing: Vec<&str> = self
            .checks
            .iter()
            .filter(|c| c.status != Status::Pass)
            .map(|c| c.name.as_str())
            .collect();
        let mut line = format!(
            "criterion {:>2} {:<32} {} ({:.1} s)",
            self.id,
            self.name,
            self.status.label(),
            elapsed.as_secs_f64()
        );
        if !failing.is_empty() {
            line.push_str(&format!(" [{}]", failing.join("; ")));
        }
        line
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub criteria: Vec<CriterionReport>,
}

impl VerifyReport {
    /// No hard check failed.
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.status != Status::Fail)
    }
}

pub const NAMES: [&str; 10] = [
    "solver correctness",
    "gradient correctness",
    "subsampling exactness",
    "logit additivity identity",
    "correlation sweep pattern",
    "decoding against core-only oracle",
    "last-layer method ordering",
    "retrain-count variance",
    "l1 effect with d >> n",
    "reproducibility",
];

/// Runs the selected criteria (all by default), reporting each as it ends.
pub fn run(selected: Option<&[u32]>, seed: u64, sink: &mut dyn FnMut(String)) -> Result<VerifyReport> {
    let ids: Vec<u32> = match selected {
        Some(ids) => ids.to_vec(),
        None => (1..=10).collect(),
    };
    let mut criteria = Vec::with_capacity(ids.len());
    for id in ids {
        let start = Instant::now();
        let report = criterion(id, seed)?;
        sink(report.line(start.elapsed()));
        criteria.push(report);
    }
    Ok(VerifyReport { seed, criteria })
}

pub fn criterion(id: u32, seed: u64) -> Result<CriterionReport> {
    let seed = derive_seed(seed, u64::from(id));
    let checks = match id {
        1 => solver_correctness(seed)?,
        2 => gradient_correctness(seed)?,
        3 => subsampling_exactness(seed)?,
        4 => logit_additivity(seed)?,
        5 => correlation_sweep()?,
        6 => decoding_vs_oracle()?,
        7 => method_ordering()?,
        8 => retrain_variance()?,
        9 => l1_effect()?,
        10 => reproducibility(seed)?,
        _ => anyhow::bail!("no criterion {id}; criteria are numbered 1 to 10"),
    };
    Ok(CriterionReport::new(id, checks))
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, Duration)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed()))
}

fn pts(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Labels drawn from a softmax of a random linear map, redrawn until every
/// class appears.
fn random_instance(rng: &mut impl Rng, n: usize, d: usize, c: usize, lambda: f64, weighted: bool) -> Instance {
    loop {
        let x = Array2::from_shape_fn((n, d), |_| normal(rng));
        let truth = Array2::from_shape_fn((c, d), |_| 1.5 * normal(rng));
        let labels: Vec<usize> = x
            .outer_iter()
            .map(|row| {
                let z: Vec<f64> = (0..c).map(|k| truth.row(k).dot(&row)).collect();
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
                for (k, wk) in w.iter().enumerate() {
                    if u < *wk {
                        return k;
                    }
                    u -= wk;
                }
                c - 1
            })
            .collect();
        if (0..c).all(|k| labels.contains(&k)) {
            let class_weights = (0..c)
                .map(|_| if weighted { rng.random_range(0.5..3.0) } else { 1.0 })
                .collect();
            return Instance {
                x,
                labels,
                n_classes: c,
                class_weights,
                lambda,
            };
        }
    }
}

const C_CHOICES: [f64; 5] = [0.01, 0.03, 0.1, 0.3, 1.0];

fn solver_correctness(seed: u64) -> Result<Vec<Check>> {
    let ((worst_kkt, worst_gap, failures), elapsed) = timed(|| {
        let mut rng = rng_from_seed(seed);
        let (mut worst_kkt, mut worst_gap, mut failures) = (0.0f64, 0.0f64, Vec::new());
        for case in 0..50 {
            let two_param = case < 10;
            let (n, d, c) = if two_param {
                (rng.random_range(10..=200), 1, 2)
            } else {
                (rng.random_range(10..=200), rng.random_range(2..=20), rng.random_range(2..=3))
            };
            let inverse_strength = C_CHOICES[rng.random_range(0..C_CHOICES.len())];
            let lambda = 1.0 / (inverse_strength * n as f64);
            let inst = random_instance(&mut rng, n, d, c, lambda, case % 2 == 1);
            let config = SolverConfig {
                penalty: Penalty::L1,
                inverse_strength,
                class_weights: Some(inst.class_weights.clone()),
                max_iters: 200_000,
                tolerance: 1e-9,
                ..SolverConfig::default()
            };
            let fit = fit_logreg(inst.x.view(), &inst.labels, c, &config, Scaler::identity(d))?;
            let kkt = inst.kkt(&fit.head.weights, &fit.head.bias);
            let solver_obj = inst.objective(&fit.head.weights, &fit.head.bias);
            let oracle_obj = if two_param {
                two_parameter_minimum(&inst, 60.0, 1e-10).2
            } else {
                coordinate_descent(&inst, 50_000, 1e-15).objective
            };
            let gap = (solver_obj - oracle_obj).abs() / oracle_obj.abs().max(1e-12);
            worst_kkt = worst_kkt.max(kkt);
            worst_gap = worst_gap.max(gap);
            if kkt > 1e-4 || gap > 1e-6 {
                failures.push(format!("case {case} (n={n}, d={d}, C={c}): kkt {kkt:.2e}, gap {gap:.2e}"));
            }
        }
        Ok((worst_kkt, worst_gap, failures))
    })?;
    Ok(vec![
        Check::hard("kkt within 1e-4", worst_kkt <= 1e-4, format!("worst {worst_kkt:.2e} over 50 instances")),
        Check::hard(
            "objective matches oracle within 1e-6",
            worst_gap <= 1e-6,
            if failures.is_empty() {
                format!("worst relative gap {worst_gap:.2e}")
            } else {
                format!("worst relative gap {worst_gap:.2e}; {}", failures.join("; "))
            },
        ),
        Check::runtime(elapsed, 30),
    ])
}

fn gradient_correctness(seed: u64) -> Result<Vec<Check>> {
    let (worst, elapsed) = timed(|| {
        let mut rng = rng_from_seed(seed);
        let mut worst = 0.0f64;
        for case in 0..20u64 {
            let n_hidden = rng.random_range(1..=2);
            let mut sizes = vec![rng.random_range(2..=6)];
            for _ in 0..n_hidden {
                sizes.push(rng.random_range(3..=8));
            }
            sizes.push(rng.random_range(2..=4));
            let model = MlpModel::init(&sizes, derive_seed(seed, case))?;
            let batch = rng.random_range(3..=10);
            let x = Array2::from_shape_fn((batch, sizes[0]), |_| normal(&mut rng));
            let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..sizes[sizes.len() - 1])).collect();
            let (_, analytic) = model.loss_and_gradient(x.view(), &labels)?;
            let numeric = finite_difference_gradient(model.layers(), x.view(), &labels, 1e-6);
            for (a, f) in analytic.iter().zip(&numeric) {
                let pairs = a.weights.iter().zip(f.weights.iter()).chain(a.bias.iter().zip(f.bias.iter()));
                for (&ga, &gf) in pairs {
                    let rel = (ga - gf).abs() / ga.abs().max(gf.abs()).max(1e-8);
                    worst = worst.max(rel);
                }
            }
        }
        Ok(worst)
    })?;
    Ok(vec![
        Check::hard(
            "max relative error below 1e-4",
            worst < 1e-4,
            format!("worst {worst:.2e} over 20 model/batch pairs, every parameter"),
        ),
        Check::runtime(elapsed, 10),
    ])
}

fn dataset_with_counts(counts: &[usize], n_classes: usize) -> Result<EmbeddingDataset> {
    let n: usize = counts.iter().sum();
    let per_class = counts.len() / n_classes;
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for (g, &k) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(g / per_class, k));
        groups.extend(std::iter::repeat_n(g, k));
    }
    let features = Array2::from_shape_fn((n, 1), |(i, _)| i as f32);
    Ok(EmbeddingDataset::new(features, labels, groups, n_classes, counts.len())?)
}

/// Exactly `min(counts)` distinct rows from each group.
fn balanced_ok(data: &EmbeddingDataset, picked: &[usize]) -> bool {
    let counts = data.group_counts();
    let m = counts.iter().copied().min().unwrap_or(0);
    let mut per_group = vec![0usize; counts.len()];
    let mut seen = vec![false; data.n_rows()];
    for &i in picked {
        if i >= data.n_rows() || seen[i] {
            return false;
        }
        seen[i] = true;
        per_group[data.groups()[i]] += 1;
    }
    per_group.iter().all(|&c| c == m)
}

fn subsampling_exactness(seed: u64) -> Result<Vec<Check>> {
    let data = dataset_with_counts(&[3498, 184, 56, 1057], 2)?;
    let mut exact = true;
    let mut observed = Vec::new();
    for k in 0..10 {
        let picked = group_balanced_indices(&data, derive_seed(seed, k))?;
        let mut counts = [0usize; 4];
        for &i in &picked {
            counts[data.groups()[i]] += 1;
        }
        exact &= counts == [56; 4] && balanced_ok(&data, &picked);
        observed = counts.to_vec();
    }
    let mut rng = rng_from_seed(derive_seed(seed, 0x5052_4f50));
    let mut property_failures = 0;
    for case in 0..300u64 {
        let n_classes = rng.random_range(2..=4);
        let per_class = rng.random_range(1..=3);
        let counts: Vec<usize> = (0..n_classes * per_class).map(|_| rng.random_range(1..=400)).collect();
        let data = dataset_with_counts(&counts, n_classes)?;
        let picked = group_balanced_indices(&data, derive_seed(seed, case))?;
        if !balanced_ok(&data, &picked) {
            property_failures += 1;
        }
    }
    Ok(vec![
        Check::hard(
            "counts (3498,184,56,1057) give 56 per group",
            exact,
            format!("observed {observed:?} over 10 seeds"),
        ),
        Check::hard(
            "random count vectors give min count per group",
            property_failures == 0,
            format!("{property_failures} failures over 300 random count vectors"),
        ),
    ])
}

fn logit_additivity(seed: u64) -> Result<Vec<Check>> {
    let (worst, elapsed) = timed(|| {
        let mut rng = rng_from_seed(seed);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let d_core = rng.random_range(1..=10);
            let d_sp = rng.random_range(1..=10);
            let d = d_core + d_sp;
            let c = rng.random_range(2..=5);
            let head = LinearHead {
                weights: Array2::from_shape_fn((c, d), |_| normal(&mut rng)),
                bias: Array1::from_shape_fn(c, |_| normal(&mut rng)),
                scaler: Scaler {
                    mean: Array1::from_shape_fn(d, |_| normal(&mut rng)),
                    std: Array1::from_shape_fn(d, |_| rng.random_range(0.1..5.0)),
                },
            };
            let n = rng.random_range(1..=50);
            let x = Array2::from_shape_fn((n, d), |_| 3.0 * normal(&mut rng));
            let mut core = x.clone();
            core.slice_mut(ndarray::s![.., d_core..]).fill(0.0);
            let mut sp = x.clone();
            sp.slice_mut(ndarray::s![.., ..d_core]).fill(0.0);
            let full = predict_logits(&head, x.view())?;
            let l_core = predict_logits(&head, core.view())?;
            let l_sp = predict_logits(&head, sp.view())?;
            let l_zero = predict_logits(&head, Array2::zeros((1, d)).view())?;
            for i in 0..n {
                for k in 0..c {
                    let dev = (full[[i, k]] - (l_core[[i, k]] + l_sp[[i, k]] - l_zero[[0, k]])).abs();
                    worst = worst.max(dev);
                }
            }
        }
        Ok(worst)
    })?;
    Ok(vec![
        Check::hard(
            "deviation below 1e-9",
            worst < 1e-9,
            format!("worst {worst:.2e} over 100 random heads"),
        ),
        Check::runtime(elapsed, 1),
    ])
}

fn correlation_sweep() -> Result<Vec<Check>> {
    let grid = ExperimentGrid {
        p_corr: vec![0.8, 0.9, 0.95, 0.995, 1.0],
        n_outer_seeds: 5,
        first_seed: 0,
    };
    let (report, elapsed) = timed(|| {
        Ok(pcorr_sweep(
            &grid,
            SpuriousSpec::color_mnist,
            &TrainConfig::default(),
            &DfrConfig::default(),
        )?)
    })?;
    let row = |p: f64| report.rows.iter().find(|r| r.p_corr == p).expect("grid value");
    let oracle = report.no_correlation_erm_wga.mean;
    let (r08, r0995, r1) = (row(0.8), row(0.995), row(1.0));
    let gaps: Vec<f64> = report
        .rows
        .iter()
        .map(|r| r.dfr_wga.median - r.erm_wga.median)
        .collect();
    let monotone = gaps.windows(2).all(|w| w[1] >= w[0]);
    Ok(vec![
        Check::hard(
            "ERM WGA at p=1.0 at most 5",
            r1.erm_wga.mean <= 0.05,
            format!("ERM {}", pts(r1.erm_wga.mean)),
        ),
        Check::hard(
            "DFR at p=0.8 within 5 of no-correlation oracle",
            (r08.dfr_wga.mean - oracle).abs() <= 0.05,
            format!("DFR {} vs oracle {}", pts(r08.dfr_wga.mean), pts(oracle)),
        ),
        Check::hard(
            "DFR at p=0.995 at least ERM + 30",
            r0995.dfr_wga.mean >= r0995.erm_wga.mean + 0.30,
            format!("DFR {} vs ERM {}", pts(r0995.dfr_wga.mean), pts(r0995.erm_wga.mean)),
        ),
        Check::soft(
            "DFR - ERM gap monotone in p",
            monotone,
            format!("median gaps {:?}", gaps.iter().map(|g| pts(*g)).collect::<Vec<_>>()),
        ),
        Check::runtime(elapsed, 180),
    ])
}

fn decoding_vs_oracle() -> Result<Vec<Check>> {
    let tc = TrainConfig::default();
    let dc = DfrConfig::default();
    let seeds: Vec<u64> = (0..5).collect();
    let (checks, elapsed) = timed(|| {
        let mut checks = Vec::new();
        for p in [0.95, 0.99] {
            let spec = SpuriousSpec::dominoes(p);
            let mut decoded = Vec::new();
            let mut oracle = Vec::new();
            for &s in &seeds {
                decoded.push(pipeline_cell(&spec, &tc, &dc, s)?.dfr.worst);
                oracle.push(core_only_oracle(&spec, &tc, s)?.worst);
            }
            let (d, o) = (median(&decoded), median(&oracle));
            checks.push(Check::hard(
                format!("moderate family p={p}: decoded within 5 of core-only oracle"),
                (d - o).abs() <= 0.05,
                format!("decoded {} vs oracle {} (medians over 5 seeds)", pts(d), pts(o)),
            ));
        }
        let easy = SpuriousSpec {
            core_margin: 3.0,
            ..SpuriousSpec::dominoes(1.0)
        };
        let mut decoded = Vec::new();
        let mut original = Vec::new();
        for &s in &seeds {
            let cell = pipeline_cell(&easy, &tc, &dc, s)?;
            decoded.push(cell.dfr.worst);
            original.push(cell.erm.worst);
        }
        let (d, e) = (median(&decoded), median(&original));
        checks.push(Check::hard(
            "easy family p=1.0: decoded above original",
            d > e,
            format!("decoded {} vs original {} (medians over 5 seeds)", pts(d), pts(e)),
        ));
        Ok(checks)
    })?;
    let mut checks = checks;
    checks.push(Check::runtime(elapsed, 120));
    Ok(checks)
}

fn method_ordering() -> Result<Vec<Check>> {
    let spec = SpuriousSpec::waterbirds_like();
    let runs = (0..20u64)
        .map(|s| compare_methods(&spec, &TrainConfig::default(), &DfrConfig::default(), s))
        .collect::<dfr_core::Result<Vec<_>>>()?;
    let m = |f: fn(&MethodComparison) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    let (dfr_val, dfr_train) = (m(|r| r.dfr_val), m(|r| r.dfr_train));
    let (gs, crt, lws) = (m(|r| r.group_sampling_train), m(|r| r.crt_train), m(|r| r.lws_train));
    Ok(vec![
        Check::hard(
            "DFR > group-balanced sampling > cRT > LWS",
            dfr_val > gs && gs > crt && crt > lws,
            format!(
                "medians over 20 seeds: DFR {} > GB {} > cRT {} > LWS {}",
                pts(dfr_val),
                pts(gs),
                pts(crt),
                pts(lws)
            ),
        ),
        Check::soft(
            "held-out reweighting at least train reweighting - 1",
            dfr_val >= dfr_train - 0.01,
            format!("held-out {} vs train {}", pts(dfr_val), pts(dfr_train)),
        ),
    ])
}

fn retrain_variance() -> Result<Vec<Check>> {
    let spec = SpuriousSpec {
        n_val: 1000,
        val_distribution: ValDistribution::TrainLike,
        ..SpuriousSpec::waterbirds_like()
    };
    let run = erm_run(&spec, &TrainConfig::default(), 0)?;
    let feats = |d: &EmbeddingDataset| extract_features(&run.model, d);
    let (train, val, test) = (feats(&run.train.data)?, feats(&run.val.data)?, feats(&run.test.data)?);
    let config = DfrConfig {
        c_grid: vec![0.3],
        ..DfrConfig::default()
    };
    let seeds: Vec<u64> = (0..20).map(|s| run_seeds(s).2).collect();
    let table = ablation_retrains(&train, &val, &test, &run.schema, &config, &[1, 3, 5, 10, 20], &seeds)?;
    let std = |k: usize| {
        table
            .rows
            .iter()
            .find(|r| r.n_retrains == k)
            .expect("grid value")
            .worst_group
            .std
    };
    let stds: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("k={}: {}", r.n_retrains, pts(r.worst_group.std)))
        .collect();
    Ok(vec![Check::soft(
        "std at k=10 and k=20 at most std at k=1",
        std(10) <= std(1) && std(20) <= std(1),
        format!("WGA std over 20 seeds, {}", stds.join(", ")),
    )])
}

/// Two informative directions buried in 300 noise dimensions, with 100
/// reweighting rows.
pub fn high_dimensional_spec() -> SpuriousSpec {
    SpuriousSpec {
        d_core: 4,
        d_spurious: 300,
        n_val: 100,
        spurious_noise_sigma: 1.0,
        ..SpuriousSpec::dominoes(0.95)
    }
}

fn l1_effect() -> Result<Vec<Check>> {
    let spec = high_dimensional_spec();
    let pairs = (0..20u64)
        .map(|s| l1_pair(&spec, &DfrConfig::default(), s))
        .collect::<Result<Vec<_>>>()?;
    let with = median(&pairs.iter().map(|p| p.with_l1).collect::<Vec<_>>());
    let without = median(&pairs.iter().map(|p| p.without_penalty).collect::<Vec<_>>());
    Ok(vec![Check::hard(
        "tuned l1 beats no penalty by 2",
        with >= without + 0.02,
        format!(
            "medians over 20 seeds: l1 {} vs none {} (d = {}, reweighting rows = {})",
            pts(with),
            pts(without),
            spec.d_core + spec.d_spurious,
            spec.n_val
        ),
    )])
}

/// A scratch directory removed on drop.
struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: u64) -> Result<Self> {
        let dir = std::env::temp_dir().join(format!("dfr-verify-{}-{tag:016x}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(Self(dir))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

/// Files of `a` and `b` are byte-identical and the manifests agree apart
/// from the creation time.
fn same_outputs(a: &Path, b: &Path) -> Result<Option<String>> {
    let ma = Manifest::load(&a.join(MANIFEST_FILE))?;
    let mb = Manifest::load(&b.join(MANIFEST_FILE))?;
    let strip = |m: Manifest| Manifest { created_unix: 0, ..m };
    if strip(ma.clone()) != strip(mb) {
        return Ok(Some("manifests differ".into()));
    }
    for out in &ma.outputs {
        let x = std::fs::read(a.join(&out.path))?;
        let y = std::fs::read(b.join(&out.path))?;
        if x != y {
            return Ok(Some(format!("{} differs", out.path.display())));
        }
    }
    Ok(None)
}

fn write_config(dir: &Path, name: &str, value: serde_json::Value) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&value)?)?;
    Ok(path)
}

fn reproducibility(seed: u64) -> Result<Vec<Check>> {
    let scratch = Scratch::new(seed)?;
    let root = &scratch.0;
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let small = serde_json::json!({
        "custom": {
            "n_classes": 2, "d_core": 4, "d_spurious": 4,
            "core_noise_sigma": 1.0, "spurious_noise_sigma": 0.25, "p_corr": 0.95,
            "n_train": 300, "n_val": 120, "n_test": 200,
            "core_margin": 2.0, "spurious_margin": 2.0
        }
    });
    let steps: Vec<(Command, &str, serde_json::Value)> = vec![
        (Command::Generate, "gen", serde_json::json!({ "dataset": small, "seed": 11 })),
        (
            Command::TrainErm,
            "erm",
            serde_json::json!({ "train": p("gen/train.dfre"), "training": { "hidden": [16], "epochs": 5 } }),
        ),
        (
            Command::Extract,
            "feat",
            serde_json::json!({ "model": p("erm/model.dfrm"), "inputs": [p("gen/train.dfre"), p("gen/val.dfre"), p("gen/test.dfre")] }),
        ),
        (
            Command::Dfr,
            "dfr",
            serde_json::json!({
                "train": p("feat/train.features.dfre"), "reweight": p("feat/val.features.dfre"),
                "test": p("feat/test.features.dfre"), "dfr": { "n_retrains": 3, "c_grid": [1.0, 0.1] }
            }),
        ),
        (
            Command::Evaluate,
            "eval",
            serde_json::json!({ "predictor": { "head": p("dfr/head.dfrh") }, "data": p("feat/test.features.dfre"), "train": p("feat/train.features.dfre") }),
        ),
        (
            Command::Sweep,
            "sweep",
            serde_json::json!({ "suite": { "l1": { "dataset": small, "n_outer_seeds": 2 } }, "dfr": { "n_retrains": 2, "c_grid": [1.0, 0.1] } }),
        ),
        (Command::Verify, "verify", serde_json::json!({ "criteria": [3] })),
    ];
    let mut checks = Vec::new();
    for (command, dir, config) in steps {
        let first = root.join(dir);
        let again = root.join(format!("{dir}-again"));
        let config_path = write_config(root, &format!("{dir}.json"), config)?;
        let run = |source: Source, out: &Path| {
            execute(&Invocation {
                command,
                source,
                seed: None,
                output_dir: out.to_path_buf(),
            })
            .with_context(|| format!("{} run", command.name()))
        };
        NESTED.store(true, Ordering::Relaxed);
        let runs = run(Source::Config(config_path), &first)
            .and_then(|_| run(Source::Manifest(first.join(MANIFEST_FILE)), &again));
        NESTED.store(false, Ordering::Relaxed);
        runs?;
        let diff = same_outputs(&first, &again)?;
        checks.push(Check::hard(
            format!("{} rerun from manifest is byte-identical", command.name()),
            diff.is_none(),
            diff.unwrap_or_else(|| "all artifacts identical".into()),
        ));
    }
    Ok(checks)
}
