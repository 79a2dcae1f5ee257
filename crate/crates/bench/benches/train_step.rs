use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use headrank_bench::{heads_up_to, model, train_queries};
use headrank_core::autodiff::Graph;
use headrank_core::model::ParamNodes;
use headrank_core::scoring::Encoder;
use headrank_core::training::{batch_loss, build_context, LossConfig};

fn loss_and_backward(c: &mut Criterion) {
    let params = model();
    let heads = heads_up_to(params.config.n_layers);
    let encoder = Encoder::default();
    let config = LossConfig::default();
    let contexts: Vec<_> = train_queries()
        .iter()
        .filter_map(|q| build_context(q, &params, &heads, &encoder, 64, 0, None).expect("context"))
        .take(4)
        .collect();
    let batch: Vec<_> = contexts.iter().collect();
    let ids = heads.ids();
    c.bench_function("train_step/batch4", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let nodes = ParamNodes::register(&mut g, &params, true);
            let loss = batch_loss(&mut g, &nodes, &batch, &ids, heads.l_max, &config).expect("loss");
            black_box(g.backward(loss.total).expect("backward"))
        })
    });
}

criterion_group!(benches, loss_and_backward);
criterion_main!(benches);
