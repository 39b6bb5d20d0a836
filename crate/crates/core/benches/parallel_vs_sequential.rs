//! Sequential vs rayon execution of the data-parallel loops.
//!
//! Run with `cargo bench -p pdp-core`. Without the `parallel` feature both
//! variants take the sequential path.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pdp_core::style_eval::run_eval_on;
use pdp_core::{
    CandidateIndex, CharacterCard, EchoBackend, Engine, EmbeddingBackend, EvalConfig, EvalMethod,
    Execution, MockHashBackend, Side, StrategyKind,
};

fn pool(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| format!("candidate {i} talks about topic {} and mood {}", i % 97, i % 13))
        .collect()
}

fn bench_score_all(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_all");
    for &(n, dim) in &[(2_000usize, 64usize), (20_000, 256)] {
        let backend = MockHashBackend::new(dim).unwrap();
        let index = CandidateIndex::build(pool(n), &backend).unwrap();
        let query = backend.embed_one("do you like swimming", Side::Response).unwrap();
        for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, format!("{n}x{dim}")), &exec, |b, &exec| {
                b.iter(|| black_box(index.score_all_with(black_box(&query), exec).unwrap()))
            });
        }
    }
    group.finish();
}

fn bench_mock_embedding(c: &mut Criterion) {
    let mut group = c.benchmark_group("mock_embed_batch");
    let texts = pool(1_000);
    for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        let backend = MockHashBackend::new(128).unwrap().with_execution(exec);
        group.bench_function(label, |b| b.iter(|| black_box(backend.embed_contexts(&texts).unwrap())));
    }
    group.finish();
}

fn bench_eval_sweep(c: &mut Criterion) {
    let embedder = Arc::new(MockHashBackend::new(64).unwrap());
    let index = CandidateIndex::build(pool(5_000), embedder.as_ref()).unwrap();
    let engine = Engine::new(Arc::new(index), embedder, Arc::new(EchoBackend::last_character_line())).unwrap();
    let characters: Vec<_> = (0..2)
        .map(|c| {
            let card = CharacterCard::new(
                format!("Character {c}"),
                None,
                (0..8).map(|u| format!("marker{c} phrase{u} marker{c}")).collect(),
            );
            engine.register(card).unwrap()
        })
        .collect();
    let contexts: Vec<String> = (0..20)
        .map(|i| format!("a fairly long evaluation context number {i} about the weather"))
        .collect();
    let methods = [EvalMethod::Match(StrategyKind::Dynamic), EvalMethod::Match(StrategyKind::Static)];

    let mut group = c.benchmark_group("eval_sweep");
    group.sample_size(10);
    for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        let config = EvalConfig { execution: exec, ..EvalConfig::default() };
        group.bench_function(label, |b| {
            b.iter(|| black_box(run_eval_on(&engine, &contexts, &characters, &methods, None, &config).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_score_all, bench_mock_embedding, bench_eval_sweep);
criterion_main!(benches);
