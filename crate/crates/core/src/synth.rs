//! Block-Gaussian spurious-correlation datasets.
//!
//! Each input is `[core block | spurious block]`. The class determines the
//! mean of the core block and a spurious attribute (taking as many values as
//! there are classes) determines the mean of the spurious block. On the
//! training split the attribute agrees with the label with probability
//! `p_corr`; validation and test splits are group-balanced, so the attribute
//! carries no information there. A large `spurious_margin /
//! spurious_noise_sigma` ratio makes the shortcut easy to learn; the core
//! signal-to-noise ratio controls how hard the true feature is.
//!
//! Means sit at `margin · e_j` for distinct, seeded coordinates `j` (with a
//! seeded sign), so the remaining coordinates of each block are pure noise and
//! the Bayes accuracy has a closed form ([`bayes_core_accuracy`]).

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{EmbeddingDataset, GroupEntry, GroupSchema};
use crate::error::{DfrError, Result};
use crate::rng::{derive_seed, rng_from_seed, streams, DfrRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreKind {
    /// Class means along one seeded axis each.
    #[default]
    Gaussian,
    /// Two classes; the label is the sign product of two core coordinates, which
    /// no linear probe on the raw input can read.
    Xor,
}

/// Group mix of the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValDistribution {
    #[default]
    Balanced,
    /// Same group mixture as the training split.
    TrainLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousSpec {
    pub n_classes: usize,
    pub d_core: usize,
    pub d_spurious: usize,
    pub core_noise_sigma: f64,
    pub spurious_noise_sigma: f64,
    pub p_corr: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub core_margin: f64,
    pub spurious_margin: f64,
    #[serde(default)]
    pub core_kind: CoreKind,
    /// Explicit training mixture over the `C²` groups (`group = label·C +
    /// attribute`), overriding `p_corr`. Need not be normalized.
    #[serde(default)]
    pub train_group_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub val_distribution: ValDistribution,
}

impl SpuriousSpec {
    /// Two-class analog of a Dominoes dataset.
    pub fn dominoes(p_corr: f64) -> Self {
        Self {
            n_classes: 2,
            d_core: 8,
            d_spurious: 8,
            core_noise_sigma: 1.0,
            spurious_noise_sigma: 0.25,
            p_corr,
            n_train: 2000,
            n_val: 400,
            n_test: 2000,
            core_margin: 1.5,
            spurious_margin: 2.0,
            core_kind: CoreKind::Gaussian,
            train_group_weights: None,
            val_distribution: ValDistribution::Balanced,
        }
    }

    /// Five-class analog of ColorMNIST.
    pub fn color_mnist(p_corr: f64) -> Self {
        Self {
            n_classes: 5,
            d_core: 10,
            d_spurious: 5,
            core_noise_sigma: 1.0,
            spurious_noise_sigma: 0.1,
            p_corr,
            n_train: 3000,
            n_val: 2500,
            n_test: 2500,
            core_margin: 3.0,
            spurious_margin: 6.0,
            core_kind: CoreKind::Gaussian,
            train_group_weights: None,
            val_distribution: ValDistribution::Balanced,
        }
    }

    /// Two classes with the training group mix 73/4/1/22 % of the Waterbirds
    /// benchmark (3498, 184, 56 and 1057 images); balanced validation and test.
    pub fn waterbirds_like() -> Self {
        Self {
            train_group_weights: Some(vec![3498.0, 184.0, 56.0, 1057.0]),
            n_train: 2000,
            n_val: 400,
            n_test: 2000,
            ..Self::dominoes(0.95)
        }
    }

    pub fn n_attributes(&self) -> usize {
        self.n_classes
    }

    pub fn n_groups(&self) -> usize {
        self.n_classes * self.n_attributes()
    }

    pub fn input_dim(&self) -> usize {
        self.d_core + self.d_spurious
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(DfrError::InvalidArgument(msg));
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if !(0.0..=1.0).contains(&self.p_corr) {
            return bad(format!("p_corr must lie in [0, 1], got {}", self.p_corr));
        }
        if self.d_core < self.n_classes.max(2) || self.d_spurious < self.n_attributes() {
            return bad(format!(
                "blocks need at least one axis per class/attribute (d_core = {}, d_spurious = {}, C = {})",
                self.d_core, self.d_spurious, self.n_classes
            ));
        }
        if self.core_kind == CoreKind::Xor && self.n_classes != 2 {
            return bad("the XOR core is defined for two classes".into());
        }
        let min_count = self.n_groups();
        for (name, n) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if n < min_count {
                return bad(format!("{name} = {n} is below C·A = {min_count}"));
            }
        }
        for (name, v) in [
            ("core_noise_sigma", self.core_noise_sigma),
            ("spurious_noise_sigma", self.spurious_noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        for (name, v) in [("core_margin", self.core_margin), ("spurious_margin", self.spurious_margin)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if let Some(w) = &self.train_group_weights {
            if w.len() != self.n_groups() || w.iter().any(|&v| v.is_nan() || v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return bad(format!(
                    "train_group_weights must hold {} non-negative values with a positive sum",
                    self.n_groups()
                ));
            }
        }
        Ok(())
    }
}

/// Synthetic inputs with labels, spurious attributes and derived groups.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub data: EmbeddingDataset,
    pub attributes: Vec<usize>,
    pub n_attributes: usize,
    /// Columns `..core_dim` form the core block, the rest the spurious block.
    pub core_dim: usize,
}

impl RawDataset {
    pub fn n_rows(&self) -> usize {
        self.data.n_rows()
    }

    pub fn labels(&self) -> &[usize] {
        self.data.labels()
    }

    pub fn groups(&self) -> &[usize] {
        self.data.groups()
    }

    pub fn inputs_f64(&self) -> Array2<f64> {
        self.data.features_f64()
    }

    /// Fraction of rows whose attribute equals the label.
    pub fn agreement_rate(&self) -> f64 {
        let agree = self
            .labels()
            .iter()
            .zip(&self.attributes)
            .filter(|(y, a)| y == a)
            .count();
        agree as f64 / self.n_rows() as f64
    }

    /// The same rows with inputs restricted to one block (the other dropped,
    /// not zeroed).
    pub fn block_only(&self, block: Block) -> Result<EmbeddingDataset> {
        let cols = match block {
            Block::Core => s![.., ..self.core_dim],
            Block::Spurious => s![.., self.core_dim..],
        };
        self.data.with_features(self.data.features().slice(cols).to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Core,
    Spurious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    ZeroCore,
    ZeroSpurious,
}

/// Seeded axis layout shared by all three splits of one generated dataset.
#[derive(Debug, Clone)]
struct Layout {
    core_axes: Vec<(usize, f64)>,
    spurious_axes: Vec<(usize, f64)>,
}

impl Layout {
    fn new(spec: &SpuriousSpec, rng: &mut DfrRng) -> Self {
        let mut pick = |dim: usize, count: usize| -> Vec<(usize, f64)> {
            let mut axes: Vec<usize> = (0..dim).collect();
            axes.shuffle(rng);
            axes.truncate(count);
            axes.into_iter()
                .map(|a| (a, if rng.random::<bool>() { 1.0 } else { -1.0 }))
                .collect()
        };
        let n_core_axes = match spec.core_kind {
            CoreKind::Gaussian => spec.n_classes,
            CoreKind::Xor => 2,
        };
        Self {
            core_axes: pick(spec.d_core, n_core_axes),
            spurious_axes: pick(spec.d_spurious, spec.n_attributes()),
        }
    }
}

/// Generates `(train, val, test)`; bit-reproducible for a given seed.
pub fn generate(spec: &SpuriousSpec, seed: u64) -> Result<(RawDataset, RawDataset, RawDataset)> {
    spec.check()?;
    let layout = Layout::new(spec, &mut rng_from_seed(derive_seed(seed, streams::SYNTH_DIRECTIONS)));

    let mut rng = rng_from_seed(derive_seed(seed, streams::SYNTH_TRAIN));
    let train_pairs = draw_train_pairs(spec, spec.n_train, &mut rng);
    let train = render(spec, &layout, &train_pairs, &mut rng)?;

    let mut rng = rng_from_seed(derive_seed(seed, streams::SYNTH_VAL));
    let val_pairs = match spec.val_distribution {
        ValDistribution::Balanced => balanced_pairs(spec, spec.n_val, &mut rng),
        ValDistribution::TrainLike => draw_train_pairs(spec, spec.n_val, &mut rng),
    };
    let val = render(spec, &layout, &val_pairs, &mut rng)?;

    let mut rng = rng_from_seed(derive_seed(seed, streams::SYNTH_TEST));
    let test_pairs = balanced_pairs(spec, spec.n_test, &mut rng);
    let test = render(spec, &layout, &test_pairs, &mut rng)?;
    Ok((train, val, test))
}

fn draw_train_pairs(spec: &SpuriousSpec, n: usize, rng: &mut DfrRng) -> Vec<(usize, usize)> {
    let c = spec.n_classes;
    if let Some(weights) = &spec.train_group_weights {
        let dist = WeightedIndex::new(weights).expect("checked in SpuriousSpec::check");
        return (0..n)
            .map(|_| {
                let g = dist.sample(rng);
                (g / c, g % c)
            })
            .collect();
    }
    (0..n)
        .map(|_| {
            let y = rng.random_range(0..c);
            let a = if rng.random::<f64>() < spec.p_corr {
                y
            } else {
                // uniform over the other attribute values
                let k = rng.random_range(0..c - 1);
                if k >= y {
                    k + 1
                } else {
                    k
                }
            };
            (y, a)
        })
        .collect()
}

/// Group counts differ by at most one; which groups get the extra row is seeded.
fn balanced_pairs(spec: &SpuriousSpec, n: usize, rng: &mut DfrRng) -> Vec<(usize, usize)> {
    let g = spec.n_groups();
    let mut extra: Vec<usize> = (0..g).collect();
    extra.shuffle(rng);
    let mut groups: Vec<usize> = (0..n / g * g).map(|i| i % g).collect();
    groups.extend(extra.into_iter().take(n % g));
    groups.shuffle(rng);
    groups
        .into_iter()
        .map(|grp| (grp / spec.n_attributes(), grp % spec.n_attributes()))
        .collect()
}

fn render(
    spec: &SpuriousSpec,
    layout: &Layout,
    pairs: &[(usize, usize)],
    rng: &mut DfrRng,
) -> Result<RawDataset> {
    let n = pairs.len();
    let d = spec.input_dim();
    let mut x = Array2::<f32>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut attributes = Vec::with_capacity(n);
    for (mut row, &(y, a)) in x.outer_iter_mut().zip(pairs) {
        let mut values = vec![0.0f64; d];
        for v in values[..spec.d_core].iter_mut() {
            *v = spec.core_noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        for v in values[spec.d_core..].iter_mut() {
            *v = spec.spurious_noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        match spec.core_kind {
            CoreKind::Gaussian => {
                let (axis, sign) = layout.core_axes[y];
                values[axis] += sign * spec.core_margin;
            }
            CoreKind::Xor => {
                let first: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let second = if y == 0 { first } else { -first };
                for ((axis, sign), q) in layout.core_axes.iter().zip([first, second]) {
                    values[*axis] += sign * q * spec.core_margin;
                }
            }
        }
        let (axis, sign) = layout.spurious_axes[a];
        values[spec.d_core + axis] += sign * spec.spurious_margin;
        for (dst, v) in row.iter_mut().zip(values) {
            *dst = v as f32;
        }
        labels.push(y);
        attributes.push(a);
    }
    let (groups, _) = assign_groups(&labels, &attributes, spec.n_attributes(), spec.n_classes)?;
    Ok(RawDataset {
        data: EmbeddingDataset::new(x, labels, groups, spec.n_classes, spec.n_groups())?,
        attributes,
        n_attributes: spec.n_attributes(),
        core_dim: spec.d_core,
    })
}

/// `group = label·A + attribute`; the schema records per-group counts of the
/// given rows as training counts.
pub fn assign_groups(
    labels: &[usize],
    attributes: &[usize],
    n_attribute_values: usize,
    n_classes: usize,
) -> Result<(Vec<usize>, GroupSchema)> {
    if labels.len() != attributes.len() {
        return Err(DfrError::DimensionMismatch {
            context: "labels vs attributes",
            expected: labels.len(),
            found: attributes.len(),
        });
    }
    let a_count = n_attribute_values;
    let mut counts = vec![0usize; n_classes * a_count];
    let mut groups = Vec::with_capacity(labels.len());
    for (i, (&y, &a)) in labels.iter().zip(attributes).enumerate() {
        if a >= a_count {
            return Err(DfrError::InvalidArgument(format!(
                "attribute {a} at row {i} out of range (A = {a_count})"
            )));
        }
        if y >= n_classes {
            return Err(DfrError::InvalidArgument(format!(
                "label {y} at row {i} out of range (C = {n_classes})"
            )));
        }
        let g = y * a_count + a;
        counts[g] += 1;
        groups.push(g);
    }
    let entries = counts
        .iter()
        .enumerate()
        .map(|(g, &train_count)| GroupEntry {
            group: g,
            class_label: g / a_count,
            attribute: Some(g % a_count),
            train_count,
        })
        .collect();
    Ok((groups, GroupSchema::new(entries, n_classes)?))
}

/// Replaces one block of every input with zeros.
pub fn ablate_spurious_block(dataset: &RawDataset, mode: AblationMode) -> Result<RawDataset> {
    let mut x = dataset.data.features().to_owned();
    let cols = match mode {
        AblationMode::ZeroCore => s![.., ..dataset.core_dim],
        AblationMode::ZeroSpurious => s![.., dataset.core_dim..],
    };
    x.slice_mut(cols).fill(0.0);
    Ok(RawDataset {
        data: dataset.data.with_features(x)?,
        ..dataset.clone()
    })
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Accuracy of the Bayes classifier that sees only the core block, on
/// group-balanced data (where the spurious block is uninformative).
///
/// Gaussian core: `∫ φ(z) Φ(z + m/σ)^{C−1} dz`, evaluated by composite
/// Simpson quadrature. XOR core: the optimal rule is the sign product and its
/// accuracy is `p² + (1−p)²` with `p = Φ(m/σ)`.
pub fn bayes_core_accuracy(spec: &SpuriousSpec) -> f64 {
    if spec.core_noise_sigma == 0.0 {
        return 1.0;
    }
    let snr = spec.core_margin / spec.core_noise_sigma;
    match spec.core_kind {
        CoreKind::Xor => {
            let p = std_normal_cdf(snr);
            p * p + (1.0 - p) * (1.0 - p)
        }
        CoreKind::Gaussian => {
            let power = (spec.n_classes - 1) as i32;
            let f = |z: f64| {
                (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() * std_normal_cdf(z + snr).powi(power)
            };
            let (lo, hi, steps) = (-12.0 - snr, 12.0, 6000);
            let h = (hi - lo) / steps as f64;
            let mut sum = f(lo) + f(hi);
            for k in 1..steps {
                let z = lo + k as f64 * h;
                sum += if k % 2 == 1 { 4.0 } else { 2.0 } * f(z);
            }
            sum * h / 3.0
        }
    }
}
