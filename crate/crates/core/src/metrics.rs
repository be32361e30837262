//! Per-group accuracy, worst-group accuracy and prevalence-weighted mean.

use serde::{Deserialize, Serialize};

use crate::error::{DfrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: usize,
    pub count: usize,
    /// `None` when the group has no evaluation rows.
    pub accuracy: Option<f64>,
}

/// Serializes as `{per_group: [{group, count, accuracy}], worst, weighted_mean,
/// mean_over_examples}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub per_group: Vec<GroupAccuracy>,
    pub worst: f64,
    pub weighted_mean: f64,
    pub mean_over_examples: f64,
}

impl GroupMetrics {
    pub fn worst_group_accuracy(&self) -> f64 {
        self.worst
    }

    pub fn per_group_accuracy(&self) -> Vec<Option<f64>> {
        self.per_group.iter().map(|g| g.accuracy).collect()
    }

    pub fn per_group_count(&self) -> Vec<usize> {
        self.per_group.iter().map(|g| g.count).collect()
    }
}

pub fn group_accuracies(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    n_groups: usize,
) -> Result<Vec<GroupAccuracy>> {
    if predictions.len() != labels.len() || groups.len() != labels.len() {
        return Err(DfrError::DimensionMismatch {
            context: "predictions/labels/groups length",
            expected: labels.len(),
            found: if predictions.len() != labels.len() {
                predictions.len()
            } else {
                groups.len()
            },
        });
    }
    let mut correct = vec![0usize; n_groups];
    let mut count = vec![0usize; n_groups];
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
        if g >= n_groups {
            return Err(DfrError::InvalidArgument(format!(
                "group id {g} out of range (n_groups = {n_groups})"
            )));
        }
        count[g] += 1;
        correct[g] += usize::from(p == y);
    }
    Ok((0..n_groups)
        .map(|g| GroupAccuracy {
            group: g,
            count: count[g],
            accuracy: (count[g] > 0).then(|| correct[g] as f64 / count[g] as f64),
        })
        .collect())
}

/// Minimum accuracy over groups that have at least one row.
pub fn worst_group_accuracy(per_group: &[GroupAccuracy]) -> Result<f64> {
    per_group
        .iter()
        .filter_map(|g| g.accuracy)
        .min_by(f64::total_cmp)
        .ok_or_else(|| DfrError::InvalidArgument("all groups are empty".into()))
}

/// `Σ_g acc_g · train_count_g / Σ train_count`.
pub fn weighted_mean_accuracy(per_group_accuracy: &[f64], train_counts: &[usize]) -> Result<f64> {
    if per_group_accuracy.len() != train_counts.len() {
        return Err(DfrError::DimensionMismatch {
            context: "weighted mean inputs",
            expected: per_group_accuracy.len(),
            found: train_counts.len(),
        });
    }
    let total: usize = train_counts.iter().sum();
    if total == 0 {
        return Err(DfrError::InvalidArgument("training counts sum to zero".into()));
    }
    Ok(per_group_accuracy
        .iter()
        .zip(train_counts)
        .map(|(a, &c)| a * c as f64)
        .sum::<f64>()
        / total as f64)
}

/// Full metrics. Groups absent from the evaluation set are excluded from the
/// worst-group minimum and from the weighted mean, whose weights are
/// renormalized over the present groups.
pub fn evaluate(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    n_groups: usize,
    train_counts: &[usize],
) -> Result<GroupMetrics> {
    let per_group = group_accuracies(predictions, labels, groups, n_groups)?;
    let worst = worst_group_accuracy(&per_group)?;
    if train_counts.len() != n_groups {
        return Err(DfrError::DimensionMismatch {
            context: "train counts",
            expected: n_groups,
            found: train_counts.len(),
        });
    }
    let (accs, counts): (Vec<f64>, Vec<usize>) = per_group
        .iter()
        .filter_map(|g| g.accuracy.map(|a| (a, train_counts[g.group])))
        .unzip();
    let weighted_mean = weighted_mean_accuracy(&accs, &counts)?;
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(GroupMetrics {
        per_group,
        worst,
        weighted_mean,
        mean_over_examples: correct as f64 / labels.len() as f64,
    })
}
