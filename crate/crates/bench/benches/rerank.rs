use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use headrank_bench::{heads_up_to, model, test_queries};
use headrank_core::rerank::{RerankOptions, Reranker};
use headrank_core::scoring::Encoder;

fn rerank_by_exit_depth(c: &mut Criterion) {
    let params = model();
    let queries = test_queries();
    let encoder = Encoder::default();
    let options = RerankOptions {
        cache_baselines: false,
        ..RerankOptions::default()
    };
    let mut group = c.benchmark_group("rerank");
    for l_max in 1..=params.config.n_layers {
        let heads = heads_up_to(l_max);
        group.bench_with_input(BenchmarkId::new("l_max", l_max), &heads, |bench, heads| {
            let mut reranker = Reranker::new(&params, heads, &encoder, &options).expect("valid heads");
            bench.iter(|| black_box(reranker.rerank(&queries[0]).expect("rerank")))
        });
    }
    group.finish();
}

criterion_group!(benches, rerank_by_exit_depth);
criterion_main!(benches);
