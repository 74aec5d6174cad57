//! Shared fixtures for the benchmarks.

use std::collections::BTreeMap;

use adpm_core::adsformer::{build_vocabs, AdpmVocabs};
use adpm_core::embeddings::{EmbeddingTable, Flavor, PretrainedBundle};
use adpm_core::sequences::{
    generate_impressions, generate_world, EntityKind, ImpressionConfig, WorldConfig,
};
use adpm_core::training_eval::TrainingData;
use adpm_core::{Stream, Tensor};

pub struct Fixture {
    pub data: TrainingData,
    pub vocabs: AdpmVocabs,
    pub pretrained: PretrainedBundle,
}

/// Default world, `rows` impressions, 1000-entry vocabularies and random
/// frozen tables for every flavor.
pub fn fixture(rows: usize) -> Fixture {
    let world = generate_world(&WorldConfig::default(), 1);
    let cfg = ImpressionConfig {
        rows,
        ..ImpressionConfig::default()
    };
    let ds = generate_impressions(&world, &cfg, &Stream::new(2));
    let ctx = world.context_matrix(&ds).expect("context");
    let k: BTreeMap<EntityKind, usize> = EntityKind::ALL.iter().map(|e| (*e, 1000)).collect();
    let vocabs = build_vocabs(&ds, &k, 1).expect("vocabs");
    let n = vocabs.listing().expect("listing vocab").table_rows();
    let mut rng = Stream::new(3);
    let mut pretrained = PretrainedBundle::new();
    for f in Flavor::ALL {
        let t = EmbeddingTable::frozen(f.as_str(), Tensor::randn(&[n, f.dim()], 0.1, &mut rng))
            .expect("table");
        pretrained.insert(f, t).expect("insert");
    }
    Fixture {
        data: TrainingData::new(ds, ctx).expect("training data"),
        vocabs,
        pretrained,
    }
}
