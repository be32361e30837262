//! Property tests over the public API.

use dfr_core::data::{split, validate, EmbeddingDataset, Stratify};
use dfr_core::io::{decode_embeddings, encode_embeddings, load_embeddings, save_embeddings, EmbeddingFormat};
use dfr_core::metrics::evaluate;
use dfr_core::preprocess::fit_scaler;
use dfr_core::solver::{fit_logreg, objective, LinearHead, Penalty, SolverConfig};
use dfr_core::synth::{generate, SpuriousSpec};
use ndarray::Array2;
use proptest::prelude::*;

/// Datasets with every group present and every label consistent with it.
fn dataset() -> impl Strategy<Value = EmbeddingDataset> {
    (2usize..4, 1usize..3, 1usize..6, 8usize..60).prop_flat_map(|(c, per_class, d, n)| {
        let g = c * per_class;
        (
            proptest::collection::vec(-1e3f32..1e3, n * d),
            proptest::collection::vec(0..g, n),
            Just((c, per_class, d, n)),
        )
            .prop_map(move |(feats, mut groups, (c, per_class, d, n))| {
                let g = c * per_class;
                for (i, slot) in groups.iter_mut().take(g).enumerate() {
                    *slot = i;
                }
                let labels = groups.iter().map(|gr| gr / per_class).collect();
                let x = Array2::from_shape_vec((n, d), feats).unwrap();
                EmbeddingDataset::new(x, labels, groups, c, g).unwrap()
            })
    })
}

fn solver_problem() -> impl Strategy<Value = (Array2<f64>, Vec<usize>, f64)> {
    (5usize..40, 1usize..5, prop::sample::select(vec![0.01, 0.1, 1.0]), any::<u64>()).prop_map(|(n, d, c, seed)| {
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let x = Array2::from_shape_fn((n, d), |_| 4.0 * next() - 2.0);
        let mut labels: Vec<usize> = (0..n).map(|i| usize::from(x[[i, 0]] + next() - 0.5 > 0.0)).collect();
        labels[0] = 0;
        labels[1] = 1;
        (x, labels, c)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_round_trip_is_exact(data in dataset()) {
        prop_assert_eq!(decode_embeddings(&encode_embeddings(&data)).unwrap(), data);
    }

    #[test]
    fn csv_round_trip_within_1e_6(data in dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_embeddings(&data, &path, EmbeddingFormat::Csv).unwrap();
        let back = load_embeddings(&path, EmbeddingFormat::Csv).unwrap();
        prop_assert_eq!(back.labels(), data.labels());
        prop_assert_eq!(back.groups(), data.groups());
        for (a, b) in back.features().iter().zip(data.features().iter()) {
            prop_assert!((f64::from(*a) - f64::from(*b)).abs() <= 1e-6 * f64::from(b.abs()).max(1.0));
        }
    }

    #[test]
    fn decoding_arbitrary_bytes_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let mut framed = b"DFRE".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = decode_embeddings(&bytes);
        let _ = decode_embeddings(&framed);
    }

    #[test]
    fn validate_is_total(
        labels in proptest::collection::vec(0usize..6, 0..20),
        groups in proptest::collection::vec(0usize..9, 0..20),
        n_classes in 0usize..4,
        n_groups in 0usize..6,
        rows in 0usize..20,
        poison in any::<bool>(),
    ) {
        let mut x = Array2::<f32>::zeros((rows, 2));
        if poison && rows > 0 {
            x[[0, 1]] = f32::NAN;
        }
        let candidate = EmbeddingDataset::new_unchecked(x, labels, groups, n_classes, n_groups);
        let _ = validate(&candidate).to_string();
    }

    #[test]
    fn split_is_deterministic_and_partitions_rows(data in dataset(), seed: u64) {
        let a = split(&data, (0.6, 0.2, 0.2), seed, Stratify::None).unwrap();
        let b = split(&data, (0.6, 0.2, 0.2), seed, Stratify::None).unwrap();
        prop_assert_eq!(&a.indices, &b.indices);
        let mut all: Vec<usize> = a.indices.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..data.n_rows()).collect::<Vec<_>>());
    }

    #[test]
    fn worst_at_most_weighted_at_most_best(
        n_groups in 1usize..6,
        rows in proptest::collection::vec((0usize..6, any::<bool>()), 1..80),
        counts in proptest::collection::vec(1usize..500, 6),
    ) {
        let groups: Vec<usize> = rows.iter().map(|(g, _)| g % n_groups).collect();
        let labels = vec![0usize; rows.len()];
        let preds: Vec<usize> = rows.iter().map(|(_, ok)| usize::from(!ok)).collect();
        let m = evaluate(&preds, &labels, &groups, n_groups, &counts[..n_groups]).unwrap();
        let best = m.per_group_accuracy().into_iter().flatten().fold(0.0, f64::max);
        prop_assert!(m.worst <= m.weighted_mean + 1e-12);
        prop_assert!(m.weighted_mean <= best + 1e-12);
        // Weighting by the evaluation set's own counts gives the plain mean.
        let own = m.per_group_count();
        let present: Vec<usize> = own.iter().map(|&c| c.max(1)).collect();
        let self_weighted = evaluate(&preds, &labels, &groups, n_groups, &present).unwrap();
        prop_assert!((self_weighted.weighted_mean - self_weighted.mean_over_examples).abs() < 1e-12);
    }

    #[test]
    fn scaling_is_affine_and_invertible(data in dataset()) {
        let x = data.features_f64();
        let scaler = fit_scaler(x.view()).unwrap();
        let z = scaler.apply(x.view()).unwrap();
        for j in 0..x.ncols() {
            let sd = scaler.std[j];
            for i in 0..x.nrows() {
                let back = z[[i, j]] * sd + scaler.mean[j];
                prop_assert!((back - x[[i, j]]).abs() <= 1e-9 * x[[i, j]].abs().max(1.0));
            }
        }
    }

    #[test]
    fn solution_is_never_worse_than_zero((x, labels, c) in solver_problem()) {
        for penalty in [Penalty::L1, Penalty::L2] {
            let config = SolverConfig { penalty, inverse_strength: c, ..SolverConfig::default() };
            let scaler = dfr_core::preprocess::Scaler::identity(x.ncols());
            let fit = fit_logreg(x.view(), &labels, 2, &config, scaler.clone()).unwrap();
            let zero = objective(&LinearHead::zeros(2, scaler), x.view(), &labels, &config).unwrap();
            prop_assert!(fit.objective <= zero + 1e-12);
            prop_assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-13));
        }
    }

    #[test]
    fn l2_gradient_vanishes_at_the_solution((x, labels, c) in solver_problem()) {
        let config = SolverConfig { penalty: Penalty::L2, inverse_strength: c, tolerance: 1e-8, max_iters: 50_000, ..SolverConfig::default() };
        let scaler = dfr_core::preprocess::Scaler::identity(x.ncols());
        let fit = fit_logreg(x.view(), &labels, 2, &config, scaler).unwrap();
        prop_assert!(fit.kkt_violation <= 1e-6, "{}", fit.kkt_violation);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn val_and_test_groups_differ_by_at_most_one(
        n_val in 8usize..200,
        n_test in 8usize..200,
        c in 2usize..4,
        seed: u64,
    ) {
        let spec = SpuriousSpec { n_classes: c, n_train: 200, n_val, n_test, ..SpuriousSpec::dominoes(0.9) };
        let (_, val, test) = generate(&spec, seed).unwrap();
        for part in [&val, &test] {
            let counts = part.data.group_counts();
            let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
            prop_assert!(spread <= 1, "{:?}", counts);
        }
    }

    #[test]
    fn generation_is_bit_reproducible(seed: u64) {
        let spec = SpuriousSpec { n_train: 100, n_val: 40, n_test: 40, ..SpuriousSpec::color_mnist(0.9) };
        let a = generate(&spec, seed).unwrap();
        let b = generate(&spec, seed).unwrap();
        prop_assert_eq!(encode_embeddings(&a.0.data), encode_embeddings(&b.0.data));
        prop_assert_eq!(encode_embeddings(&a.2.data), encode_embeddings(&b.2.data));
    }
}

#[test]
fn unequal_split_seeds_almost_always_differ() {
    let n = 40;
    let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f32);
    let data = EmbeddingDataset::new(x, vec![0; n], vec![0; n], 1, 1).unwrap();
    let reference = split(&data, (0.5, 0.25, 0.25), 0, Stratify::None).unwrap().indices;
    let same = (1..=100u64)
        .filter(|&s| split(&data, (0.5, 0.25, 0.25), s, Stratify::None).unwrap().indices == reference)
        .count();
    assert_eq!(same, 0);
}

#[test]
fn attribute_agreement_converges_to_p_corr() {
    for p in [0.7, 0.9, 0.99] {
        let spec = SpuriousSpec { n_train: 20_000, n_val: 8, n_test: 8, ..SpuriousSpec::dominoes(p) };
        let (train, _, _) = generate(&spec, 5).unwrap();
        let n = train.attributes.len() as f64;
        let agree = train
            .attributes
            .iter()
            .zip(train.labels())
            .filter(|(a, y)| a == y)
            .count() as f64
            / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((agree - p).abs() <= 3.0 * sigma.max(1e-4), "p {p}: {agree}");
    }
}
