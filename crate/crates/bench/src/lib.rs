//! Fixtures shared by the benchmarks.

use dfr_core::data::EmbeddingDataset;
use dfr_core::synth::{generate, SpuriousSpec};
use ndarray::Array2;

/// Training split of the five-class family at `p_corr = 0.95`.
pub fn color_mnist_train(seed: u64) -> EmbeddingDataset {
    let (train, _, _) = generate(&SpuriousSpec::color_mnist(0.95), seed).expect("preset is valid");
    train.data
}

/// Validation split of the imbalanced two-class family.
pub fn waterbirds_val(seed: u64) -> EmbeddingDataset {
    let (_, val, _) = generate(&SpuriousSpec::waterbirds_like(), seed).expect("preset is valid");
    val.data
}

/// Waterbirds-shaped group counts (3498, 184, 56, 1057) with one feature.
pub fn waterbirds_counts() -> EmbeddingDataset {
    let counts = [3498usize, 184, 56, 1057];
    let n: usize = counts.iter().sum();
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for (g, &k) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(g / 2, k));
        groups.extend(std::iter::repeat_n(g, k));
    }
    let features = Array2::from_shape_fn((n, 1), |(i, _)| i as f32);
    EmbeddingDataset::new(features, labels, groups, 2, 4).expect("valid fixture")
}
