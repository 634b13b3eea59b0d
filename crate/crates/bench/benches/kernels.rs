use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use dualdec_core::corpus::{encode, prepare, source_vocabulary, synth_gen, target_vocabulary, Encoded, GenConfig};
use dualdec_core::decoding::{decode, BeamConfig};
use dualdec_core::equations::{parse, solve};
use dualdec_core::model::{joint_loss_with_grads, Batch, ModelConfig, ModelParams};
use dualdec_core::numerics::{Graph, Tensor};

fn ramp(rows: usize, cols: usize, k: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|i| ((i as f64) * k).sin()).collect())
}

fn setup() -> (ModelParams, Vec<Encoded>) {
    let problems = synth_gen(7, 32, &GenConfig::default()).unwrap();
    let prepared: Vec<_> = problems.iter().map(prepare).collect();
    let sv = source_vocabulary(&prepared);
    let tv = target_vocabulary();
    let data = prepared.iter().map(|p| encode(p, &sv, &tv)).collect();
    let cfg = ModelConfig { src_vocab: sv.len(), tgt_vocab: tv.len(), ..ModelConfig::default() };
    (ModelParams::init(cfg, 0).unwrap(), data)
}

fn bench_graph(c: &mut Criterion) {
    let a = ramp(64, 64, 0.37);
    let b = ramp(64, 64, 0.11);
    let mut g = c.benchmark_group("graph");
    g.bench_function("matmul_64_forward_backward", |bench| {
        bench.iter(|| {
            let mut graph = Graph::new();
            let x = graph.param(&a);
            let w = graph.param(&b);
            let y = graph.matmul(x, w).unwrap();
            let s = graph.softmax(y).unwrap();
            let l = graph.sum(s).unwrap();
            black_box(graph.backward(l).unwrap())
        })
    });
    g.finish();
}

fn bench_model(c: &mut Criterion) {
    let (params, data) = setup();
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = data
        .iter()
        .filter_map(|e| e.tgt.clone().map(|t| (e.src.clone(), t)))
        .take(16)
        .collect();
    let batch = Batch::new(&pairs);
    let src = data[0].src.clone();

    let mut g = c.benchmark_group("model");
    g.measurement_time(Duration::from_secs(10));
    g.bench_function("joint_loss_grads_batch16", |b| {
        b.iter(|| black_box(joint_loss_with_grads(&params, &batch, None).unwrap()))
    });
    g.bench_function("decode_beam10", |b| {
        b.iter(|| black_box(decode(&params, black_box(&src), &BeamConfig::for_model(10)).unwrap()))
    });
    g.finish();
}

fn bench_solver(c: &mut Criterion) {
    let linear = parse("x+y+z=60;x-y=7;2*y-z=4").unwrap();
    let quadratic = parse("x*(x+3)=108").unwrap();
    let mut g = c.benchmark_group("solver");
    g.bench_function("three_var_linear", |b| b.iter(|| black_box(solve(black_box(&linear)))));
    g.bench_function("quadratic", |b| b.iter(|| black_box(solve(black_box(&quadratic)))));
    g.finish();
}

criterion_group!(benches, bench_graph, bench_model, bench_solver);
criterion_main!(benches);
