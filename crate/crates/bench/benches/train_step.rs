use criterion::{criterion_group, criterion_main, Criterion};
use roomop_core::dataset::{assemble_minibatch, batch_rng};
use roomop_core::deeponet::train_step;
use roomop_core::pipeline::{fresh_state, train_config};

fn step(c: &mut Criterion) {
    let fx = roomop_bench::fixture("room2d");
    let cfg = train_config(&fx.scenario.training);
    let mut state = fresh_state(&fx.scenario, &fx.data, 0, None);
    let batch = assemble_minibatch(&fx.data, cfg.n.min(fx.data.n_sources()), cfg.q, &mut batch_rng(0, 0)).unwrap();
    c.bench_function("train step", |b| b.iter(|| train_step(&mut state, &batch, &cfg).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = step
}
criterion_main!(benches);
