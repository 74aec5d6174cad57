//! Huffman coding, hierarchical-softmax normalization and small end-to-end
//! runs of both representation learners.

use adpm_core::pretrain::{
    retrieval_accuracy, train_air, train_skipgram, AirConfig, AirModel, HuffmanTree,
    SkipGramConfig, SkipGramMode, SkipGramModel,
};
use adpm_core::sequences::{
    build_vocab, generate_clustered_sessions, generate_coclick_pairs, generate_world, Session,
    SyntheticWorld, Vocabulary, WorldConfig,
};
use adpm_core::{Stream, Tensor};
use proptest::prelude::*;

fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

fn random_model(n: usize, dim: usize, seed: u64, mode: SkipGramMode) -> SkipGramModel {
    let counts: Vec<u64> = (0..n as u64).map(|i| 1 + (i * 7919 + seed) % 97).collect();
    let entries = counts
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("l{i}"), *c))
        .collect();
    let vocab = Vocabulary::from_entries(entries, n, 1).unwrap();
    let mut rng = Stream::new(seed);
    let tree = match mode {
        SkipGramMode::HierarchicalSoftmax => Some(HuffmanTree::build(&counts).unwrap()),
        SkipGramMode::NegativeSampling { .. } => None,
    };
    let out_rows = if tree.is_some() { n - 1 } else { n };
    SkipGramModel {
        vocab,
        input: Tensor::randn(&[n + 1, dim], 1.0, &mut rng),
        output: Tensor::randn(&[out_rows, dim], 1.0, &mut rng),
        tree,
        mode,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn huffman_codes_are_prefix_free_and_near_entropy(counts in prop::collection::vec(1u64..1000, 2..80)) {
        let tree = HuffmanTree::build(&counts).unwrap();
        prop_assert_eq!(tree.num_leaves(), counts.len());
        let h = entropy_bits(&counts);
        let len = tree.expected_code_length(&counts);
        prop_assert!(len >= h - 1e-9 && len < h + 1.0, "H {} L {}", h, len);
        for (i, a) in tree.codes.iter().enumerate() {
            prop_assert_eq!(a.len(), tree.paths[i].len());
            for (j, b) in tree.codes.iter().enumerate() {
                if i != j && a.len() <= b.len() {
                    prop_assert!(b[..a.len()] != a[..], "code {} prefixes code {}", i, j);
                }
            }
        }
    }

    #[test]
    fn hierarchical_softmax_is_normalized(n in 2usize..64, seed in any::<u64>()) {
        let m = random_model(n, 8, seed, SkipGramMode::HierarchicalSoftmax);
        let center = format!("l{}", seed as usize % n);
        let total: f64 = m.distribution(&center).unwrap().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }
}

#[test]
fn full_softmax_is_normalized() {
    let m = random_model(30, 8, 3, SkipGramMode::NegativeSampling { negatives: 5 });
    let total: f64 = m.distribution("l4").unwrap().iter().sum();
    assert!((total - 1.0).abs() < 1e-10);
}

#[test]
fn unknown_center_is_an_error() {
    let m = random_model(4, 3, 1, SkipGramMode::HierarchicalSoftmax);
    assert!(m.distribution("nope").is_err());
}

fn small_world() -> SyntheticWorld {
    generate_world(
        &WorldConfig {
            num_listings: 120,
            num_taxonomies: 6,
            ..WorldConfig::default()
        },
        4,
    )
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n =
        a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / n.max(1e-12)
}

fn taxonomy_gap(world: &SyntheticWorld, model: &SkipGramModel) -> f64 {
    let ids: Vec<&str> = model
        .vocab
        .entries()
        .iter()
        .map(|(id, _)| id.as_str())
        .collect();
    let (mut within, mut wn, mut cross, mut cn) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            let ta = world.listing_taxonomy[world.listing_index(a).unwrap()];
            let tb = world.listing_taxonomy[world.listing_index(b).unwrap()];
            let c = cosine(
                model.input.row(model.vocab.index(a)),
                model.input.row(model.vocab.index(b)),
            );
            if ta == tb {
                within += c;
                wn += 1;
            } else {
                cross += c;
                cn += 1;
            }
        }
    }
    within / wn as f64 - cross / cn as f64
}

fn sessions_vocab(sessions: &[Session]) -> Vocabulary {
    build_vocab(
        sessions
            .iter()
            .flat_map(|s| s.listings.iter().map(String::as_str)),
        10_000,
        1,
    )
    .unwrap()
}

#[test]
fn both_skipgram_modes_separate_taxonomies() {
    let world = small_world();
    let sessions = generate_clustered_sessions(&world, 800, 10, 0.1, &Stream::new(2));
    let vocab = sessions_vocab(&sessions);
    for mode in [
        SkipGramMode::HierarchicalSoftmax,
        SkipGramMode::NegativeSampling { negatives: 5 },
    ] {
        let cfg = SkipGramConfig {
            dim: 16,
            epochs: 3,
            mode,
            ..SkipGramConfig::default()
        };
        let m = train_skipgram(&sessions, &vocab, &cfg).unwrap();
        let gap = taxonomy_gap(&world, &m);
        assert!(gap > 0.1, "{mode:?}: gap {gap}");
    }
}

#[test]
fn skipgram_is_deterministic() {
    let world = small_world();
    let sessions = generate_clustered_sessions(&world, 200, 8, 0.1, &Stream::new(2));
    let vocab = sessions_vocab(&sessions);
    let cfg = SkipGramConfig {
        dim: 8,
        epochs: 1,
        ..SkipGramConfig::default()
    };
    let a = train_skipgram(&sessions, &vocab, &cfg).unwrap();
    let b = train_skipgram(&sessions, &vocab, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn air_training_beats_its_untrained_encoder() {
    let world = small_world();
    let rows: Vec<Vec<f64>> = (0..world.num_listings())
        .map(|l| world.air_features(l))
        .collect();
    let features = Tensor::from_rows(&rows).unwrap();
    let train = generate_coclick_pairs(&world, 3000, 6.0, &Stream::new(3));
    let test = generate_coclick_pairs(&world, 512, 6.0, &Stream::new(4));
    let cfg = AirConfig {
        out_dim: 32,
        batch_size: 32,
        epochs: 2,
        ..AirConfig::default()
    };
    let untrained = AirModel::new(features.cols(), &cfg, &mut Stream::new(9)).unwrap();
    let before = retrieval_accuracy(&untrained, &features, &test, 32).unwrap();
    let out = train_air(&features, &train, &cfg).unwrap();
    let after = retrieval_accuracy(&out.model, &features, &test, 32).unwrap();
    assert!(out.losses.iter().all(|l| l.is_finite()));
    assert!(
        after > 2.0 * before.max(1.0 / 32.0),
        "before {before} after {after}"
    );
}
