//! Embedding datasets, group schemas and train/val/test splitting.

use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DfrError, Result};
use crate::rng::rng_from_seed;

/// An `n × d` feature matrix with per-row class and group labels.
///
/// Features are stored as `f32`, the precision of the on-disk format; numerical
/// code widens to `f64` through [`EmbeddingDataset::features_f64`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    features: Array2<f32>,
    labels: Vec<usize>,
    groups: Vec<usize>,
    n_classes: usize,
    n_groups: usize,
}

impl EmbeddingDataset {
    /// Builds a dataset, rejecting it if any invariant is violated.
    pub fn new(
        features: Array2<f32>,
        labels: Vec<usize>,
        groups: Vec<usize>,
        n_classes: usize,
        n_groups: usize,
    ) -> Result<Self> {
        let dataset = Self::new_unchecked(features, labels, groups, n_classes, n_groups);
        let report = validate(&dataset);
        if report.is_ok() {
            Ok(dataset)
        } else {
            Err(DfrError::InvalidDataset(report.to_string()))
        }
    }

    /// Builds a dataset without checking invariants. Use [`validate`] before
    /// handing the result to anything else.
    pub fn new_unchecked(
        features: Array2<f32>,
        labels: Vec<usize>,
        groups: Vec<usize>,
        n_classes: usize,
        n_groups: usize,
    ) -> Self {
        Self {
            features,
            labels,
            groups,
            n_classes,
            n_groups,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
            n_classes: self.n_classes,
            n_groups: self.n_groups,
        }
    }

    /// Same labels and groups with a new feature matrix (row count must match).
    pub fn with_features(&self, features: Array2<f32>) -> Result<Self> {
        if features.nrows() != self.n_rows() {
            return Err(DfrError::DimensionMismatch {
                context: "replacement feature rows",
                expected: self.n_rows(),
                found: features.nrows(),
            });
        }
        Ok(Self {
            features,
            labels: self.labels.clone(),
            groups: self.groups.clone(),
            n_classes: self.n_classes,
            n_groups: self.n_groups,
        })
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_groups];
        for &g in &self.groups {
            counts[g] += 1;
        }
        counts
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Row indices of each group, ascending.
    pub fn group_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups];
        for (i, &g) in self.groups.iter().enumerate() {
            out[g].push(i);
        }
        out
    }

    /// Checks that `other` can be used alongside `self` (same d, C and G).
    pub fn ensure_compatible(&self, other: &Self) -> Result<()> {
        let pairs = [
            ("feature dimension", self.dim(), other.dim()),
            ("class count", self.n_classes, other.n_classes),
            ("group count", self.n_groups, other.n_groups),
        ];
        for (context, expected, found) in pairs {
            if expected != found {
                return Err(DfrError::DimensionMismatch {
                    context,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }
}

/// A single broken invariant, with the first offending row where applicable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    NoClasses,
    NoGroups,
    LengthMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    LabelOutOfRange {
        row: usize,
        label: usize,
    },
    GroupOutOfRange {
        row: usize,
        group: usize,
    },
    NonFinite {
        row: usize,
        column: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "dataset has no rows"),
            Violation::NoClasses => write!(f, "n_classes is zero"),
            Violation::NoGroups => write!(f, "n_groups is zero"),
            Violation::LengthMismatch {
                field,
                expected,
                found,
            } => write!(f, "{field} has length {found}, expected {expected}"),
            Violation::LabelOutOfRange { row, label } => {
                write!(f, "label out of range at row {row} (label {label})")
            }
            Violation::GroupOutOfRange { row, group } => {
                write!(f, "group out of range at row {row} (group {group})")
            }
            Violation::NonFinite { row, column } => {
                write!(f, "non-finite feature at row {row}, column {column}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Lists every violated dataset invariant. Never panics.
pub fn validate(dataset: &EmbeddingDataset) -> ValidationReport {
    let mut violations = Vec::new();
    let n = dataset.features.nrows();
    if n == 0 {
        violations.push(Violation::Empty);
    }
    if dataset.n_classes == 0 {
        violations.push(Violation::NoClasses);
    }
    if dataset.n_groups == 0 {
        violations.push(Violation::NoGroups);
    }
    for (field, len) in [("labels", dataset.labels.len()), ("groups", dataset.groups.len())] {
        if len != n {
            violations.push(Violation::LengthMismatch {
                field,
                expected: n,
                found: len,
            });
        }
    }
    if let Some((row, &label)) = dataset
        .labels
        .iter()
        .enumerate()
        .find(|(_, &y)| y >= dataset.n_classes)
    {
        violations.push(Violation::LabelOutOfRange { row, label });
    }
    if let Some((row, &group)) = dataset
        .groups
        .iter()
        .enumerate()
        .find(|(_, &g)| g >= dataset.n_groups)
    {
        violations.push(Violation::GroupOutOfRange { row, group });
    }
    if let Some(((row, column), _)) = dataset
        .features
        .indexed_iter()
        .find(|(_, v)| !v.is_finite())
    {
        violations.push(Violation::NonFinite { row, column });
    }
    ValidationReport { violations }
}

/// One group of the mixture: its class, optional spurious attribute and
/// training-set size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub group: usize,
    pub class_label: usize,
    pub attribute: Option<usize>,
    pub train_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSchema {
    entries: Vec<GroupEntry>,
    n_classes: usize,
}

impl GroupSchema {
    /// Entries may come in any order but their ids must be exactly `0..G`.
    pub fn new(mut entries: Vec<GroupEntry>, n_classes: usize) -> Result<Self> {
        entries.sort_by_key(|e| e.group);
        for (expected, entry) in entries.iter().enumerate() {
            if entry.group != expected {
                return Err(DfrError::InvalidArgument(format!(
                    "group ids must be dense and unique; expected {expected}, found {}",
                    entry.group
                )));
            }
            if entry.class_label >= n_classes {
                return Err(DfrError::InvalidArgument(format!(
                    "group {} maps to class {} but n_classes = {n_classes}",
                    entry.group, entry.class_label
                )));
            }
        }
        if entries.is_empty() {
            return Err(DfrError::InvalidArgument("schema has no groups".into()));
        }
        Ok(Self { entries, n_classes })
    }

    /// Derives the schema from labelled data: each group's class is read off
    /// its rows in `sources`, and training counts come from `train`.
    pub fn infer(train: &EmbeddingDataset, sources: &[&EmbeddingDataset]) -> Result<Self> {
        let n_groups = train.n_groups();
        let mut class_of: Vec<Option<usize>> = vec![None; n_groups];
        for ds in std::iter::once(train).chain(sources.iter().copied()) {
            train.ensure_compatible(ds)?;
            for (&y, &g) in ds.labels().iter().zip(ds.groups()) {
                match class_of[g] {
                    None => class_of[g] = Some(y),
                    Some(c) if c != y => {
                        return Err(DfrError::InvalidDataset(format!(
                            "group {g} contains rows of classes {c} and {y}"
                        )))
                    }
                    _ => {}
                }
            }
        }
        let counts = train.group_counts();
        let entries = class_of
            .into_iter()
            .enumerate()
            .map(|(group, class)| {
                class
                    .map(|class_label| GroupEntry {
                        group,
                        class_label,
                        attribute: None,
                        train_count: counts[group],
                    })
                    .ok_or(DfrError::EmptyGroup { group })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, train.n_classes())
    }

    pub fn entries(&self) -> &[GroupEntry] {
        &self.entries
    }

    pub fn n_groups(&self) -> usize {
        self.entries.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn train_counts(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.train_count).collect()
    }

    /// Mixture weights `train_count / total`; all zero when the total is zero.
    pub fn proportions(&self) -> Vec<f64> {
        let total: usize = self.entries.iter().map(|e| e.train_count).sum();
        self.entries
            .iter()
            .map(|e| {
                if total == 0 {
                    0.0
                } else {
                    e.train_count as f64 / total as f64
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratify {
    None,
    ByGroup,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: EmbeddingDataset,
    pub val: EmbeddingDataset,
    pub test: EmbeddingDataset,
    /// Source row indices of each part, ascending.
    pub indices: [Vec<usize>; 3],
}

/// Splits rows into train/val/test with a seeded shuffle.
///
/// Part sizes are `floor(n·f)` for val and test with the remainder going to
/// train. Under [`Stratify::ByGroup`] each group is apportioned separately and
/// leftover rows are handed out by largest fractional remainder so the global
/// part sizes match the unstratified ones.
pub fn split(
    dataset: &EmbeddingDataset,
    fractions: (f64, f64, f64),
    seed: u64,
    stratify: Stratify,
) -> Result<DatasetSplit> {
    let (f_train, f_val, f_test) = fractions;
    if !(f_train > 0.0 && f_val > 0.0 && f_test > 0.0) || (f_train + f_val + f_test - 1.0).abs() > 1e-9
    {
        return Err(DfrError::InvalidArgument(format!(
            "split fractions must be positive and sum to 1, got ({f_train}, {f_val}, {f_test})"
        )));
    }
    let n = dataset.n_rows();
    let floor = |x: f64| (x + 1e-9).floor() as usize;
    let mut rng = rng_from_seed(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();

    match stratify {
        Stratify::None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let n_val = floor(n as f64 * f_val);
            let n_test = floor(n as f64 * f_test);
            parts[1] = order[..n_val].to_vec();
            parts[2] = order[n_val..n_val + n_test].to_vec();
            parts[0] = order[n_val + n_test..].to_vec();
        }
        Stratify::ByGroup => {
            let by_group = dataset.group_indices();
            for (group, rows) in by_group.iter().enumerate() {
                if rows.len() < 3 {
                    return Err(DfrError::GroupTooSmall {
                        group,
                        count: rows.len(),
                        parts: 3,
                    });
                }
            }
            let counts: Vec<usize> = by_group.iter().map(Vec::len).collect();
            let val_counts = apportion(&counts, f_val, floor(n as f64 * f_val), &vec![0; counts.len()]);
            let test_counts = apportion(&counts, f_test, floor(n as f64 * f_test), &val_counts);
            for (g, mut rows) in by_group.into_iter().enumerate() {
                rows.shuffle(&mut rng);
                let n_val = val_counts[g];
                let n_test = test_counts[g].min(rows.len() - n_val);
                parts[1].extend_from_slice(&rows[..n_val]);
                parts[2].extend_from_slice(&rows[n_val..n_val + n_test]);
                parts[0].extend_from_slice(&rows[n_val + n_test..]);
            }
        }
    }
    for part in parts.iter_mut() {
        part.sort_unstable();
    }
    Ok(DatasetSplit {
        train: dataset.select(&parts[0]),
        val: dataset.select(&parts[1]),
        test: dataset.select(&parts[2]),
        indices: parts,
    })
}

/// Largest-remainder apportionment of `target` rows across groups in
/// proportion to `fraction · count`. Ties go to the group with the smaller
/// `already_taken`, then to the lower group id.
fn apportion(counts: &[usize], fraction: f64, target: usize, already_taken: &[usize]) -> Vec<usize> {
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - out[a] as f64;
        let rb = exact[b] - out[b] as f64;
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(already_taken[a].cmp(&already_taken[b]))
            .then(a.cmp(&b))
    });
    for &g in order.iter().take(target.saturating_sub(assigned)) {
        if out[g] < counts[g] {
            out[g] += 1;
        }
    }
    out
}
