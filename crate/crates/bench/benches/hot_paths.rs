use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eager_bench::fixture;
use eager_core::codes::build_code_tree;
use eager_core::embed::EmbeddingMatrix;
use eager_core::infer::{beam_search, recommend_topk, InferenceSession};
use eager_core::model::TaskFlags;
use eager_core::nn::{Gradients, Tape};
use eager_core::rng::rng_for;
use eager_core::CodeTree;
use rand::Rng as _;

fn beam(c: &mut Criterion) {
    let f = fixture(1000, 32, 64, 1);
    let history: Vec<usize> = (0..20).collect();
    let mut g = c.benchmark_group("beam_search");
    for b in [10, 50, 100] {
        g.bench_with_input(BenchmarkId::new("one_stream", b), &b, |bench, &b| {
            bench.iter(|| {
                let mut s = InferenceSession::new(&f.model, &history).unwrap();
                beam_search(&mut s.stream(0), &f.trees[0], b, 10).unwrap()
            })
        });
    }
    let trees: Vec<&CodeTree> = f.trees.iter().collect();
    g.bench_function("recommend_top20_b100", |bench| {
        bench.iter(|| recommend_topk(&f.model, &trees, &history, 20, 100).unwrap())
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let f = fixture(1000, 32, 64, 64);
    let targets: Vec<&EmbeddingMatrix> = f.targets.iter().collect();
    c.bench_function("forward_backward_batch64", |bench| {
        bench.iter(|| {
            let mut t = Tape::new(f.model.params());
            let (loss, _) = f.model.total_loss(&mut t, &f.batch, &targets, TaskFlags::TSG_ONLY).unwrap();
            let mut grads = Gradients::zeros_like(f.model.params());
            t.backward(loss, 1.0, &mut grads);
            grads
        })
    });
}

fn code_tree(c: &mut Criterion) {
    let mut rng = rng_for(2, "bench-emb", &[]);
    let (n, d) = (2000, 32);
    let v = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let emb = EmbeddingMatrix::new(n, d, v, "bench").unwrap();
    let mut g = c.benchmark_group("build_code_tree");
    g.sample_size(10);
    for k in [16, 64] {
        g.bench_with_input(BenchmarkId::new("n2000", k), &k, |bench, &k| bench.iter(|| build_code_tree(&emb, k, 7).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, beam, train_step, code_tree);
criterion_main!(benches);
