//! Appending padding never changes the user representation or the score.

use std::collections::BTreeMap;

use adpm_core::adsformer::{AdpmBatch, AdpmConfig, AdpmVocabs, Pooling};
use adpm_core::embeddings::{EmbeddingTable, Flavor, PretrainedBundle};
use adpm_core::ranking::{forward, RankingBatch, RankingConfig, RankingModel};
use adpm_core::sequences::{EntityKind, PaddedBatch, Vocabulary};
use adpm_core::{Graph, ParamStore, Stream, Tensor};
use proptest::prelude::*;

const CONTEXT_DIM: usize = 6;

fn vocab(prefix: &str, n: usize) -> Vocabulary {
    let entries = (0..n)
        .map(|i| (format!("{prefix}{i}"), (n - i) as u64))
        .collect();
    Vocabulary::from_entries(entries, n, 1).unwrap()
}

struct Setup {
    store: ParamStore,
    model: RankingModel,
    pretrained: PretrainedBundle,
    sizes: BTreeMap<EntityKind, usize>,
}

fn setup(pooling: Pooling, include_target: bool) -> Setup {
    let mut by_entity = BTreeMap::new();
    by_entity.insert(EntityKind::Listing, vocab("l", 20));
    by_entity.insert(EntityKind::Shop, vocab("s", 6));
    by_entity.insert(EntityKind::Taxonomy, vocab("t", 4));
    let sizes = by_entity
        .iter()
        .map(|(e, v)| (*e, v.table_rows()))
        .collect();
    let vocabs = AdpmVocabs { by_entity };
    let cfg = AdpmConfig {
        pooling,
        pool_includes_target: include_target,
        ..AdpmConfig::ctr()
    };
    let mut store = ParamStore::new();
    let mut rng = Stream::new(5);
    let model = RankingModel::new(
        &RankingConfig::ctr(),
        CONTEXT_DIM,
        Some((&cfg, &vocabs)),
        &mut store,
        &mut rng,
    )
    .unwrap();
    let mut pretrained = PretrainedBundle::new();
    let air = Tensor::randn(&[21, Flavor::Air.dim()], 0.3, &mut rng);
    pretrained
        .insert(Flavor::Air, EmbeddingTable::frozen("air", air).unwrap())
        .unwrap();
    Setup {
        store,
        model,
        pretrained,
        sizes,
    }
}

fn rows(rng: &mut Stream, b: usize, vocab_rows: usize, max_len: usize) -> Vec<Vec<usize>> {
    (0..b)
        .map(|_| {
            let n = rng.below(max_len + 1);
            (0..n).map(|_| rng.below(vocab_rows)).collect()
        })
        .collect()
}

fn padded(rows: &[Vec<usize>], extra: usize) -> PaddedBatch {
    let w = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    PaddedBatch::from_indices(rows, w + extra)
}

/// `(u, p)` for one random batch, with `extra[i]` pad columns appended to
/// the `i`-th sequence batch.
fn run(s: &Setup, seed: u64, extra: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut rng = Stream::new(seed);
    let b = 1 + rng.below(4);
    let cfg = &s.model.adpm.as_ref().unwrap().config;
    let lr = s.sizes[&EntityKind::Listing];
    let targets = (0..b).map(|_| rng.below(lr)).collect();
    let encoder = rows(&mut rng, b, lr, 8);
    let union = rows(&mut rng, b, lr, 12);
    let learned: Vec<Vec<Vec<usize>>> = cfg
        .learned
        .iter()
        .map(|spec| rows(&mut rng, b, s.sizes[&spec.key.entity], 5))
        .collect();
    let batch = RankingBatch {
        context: Tensor::randn(&[b, CONTEXT_DIM], 1.0, &mut rng),
        adpm: Some(AdpmBatch {
            targets,
            encoder: padded(&encoder, extra[0]),
            listing_union: padded(&union, extra[1]),
            learned: learned
                .iter()
                .enumerate()
                .map(|(i, r)| padded(r, extra[2 + i]))
                .collect(),
        }),
        labels: vec![0.0; b],
    };
    let mut g = Graph::new();
    let out = forward(
        &mut g,
        &s.store,
        &s.model,
        &s.pretrained,
        &batch,
        false,
        &mut Stream::new(0),
    )
    .unwrap();
    (g.data(out.u.unwrap()).to_vec(), g.data(out.probs).to_vec())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn padding_is_invisible(
        seed in any::<u64>(),
        extra in prop::collection::vec(1usize..=10, 11),
        avg in any::<bool>(),
        include_target in any::<bool>(),
    ) {
        let s = setup(if avg { Pooling::Avg } else { Pooling::Max }, include_target);
        let (u0, p0) = run(&s, seed, &[0; 11]);
        let (u1, p1) = run(&s, seed, &extra);
        prop_assert!(max_abs_diff(&u0, &u1) < 1e-9);
        prop_assert!(max_abs_diff(&p0, &p1) < 1e-9);
    }
}
