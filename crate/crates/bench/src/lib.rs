//! Shared fixtures for the benchmarks.

use headrank_core::data::{generate_synthetic, RankingInstance, Split, SyntheticConfig};
use headrank_core::model::init_params;
use headrank_core::selection::{HeadSet, SelectionConfig};
use headrank_core::{HeadId, ModelConfig, TransformerParams};

/// Default-sized model with a fixed seed.
pub fn model() -> TransformerParams {
    init_params(&ModelConfig { seed: 5, ..ModelConfig::default() }).expect("default config is valid")
}

/// Test-split queries of the default synthetic corpus.
pub fn test_queries() -> Vec<RankingInstance> {
    generate_synthetic(&SyntheticConfig::default())
        .expect("default corpus config is valid")
        .into_iter()
        .filter(|i| i.split == Split::Test)
        .collect()
}

/// Training-split queries of the default synthetic corpus.
pub fn train_queries() -> Vec<RankingInstance> {
    generate_synthetic(&SyntheticConfig::default())
        .expect("default corpus config is valid")
        .into_iter()
        .filter(|i| i.split == Split::Train)
        .collect()
}

/// One head per layer up to `l_max`, so the head set exits at that depth.
pub fn heads_up_to(l_max: usize) -> HeadSet {
    let ids: Vec<HeadId> = (1..=l_max).map(|l| HeadId::new(l, 0)).collect();
    HeadSet::from_ids(&ids, SelectionConfig::default()).expect("heads are in range")
}
