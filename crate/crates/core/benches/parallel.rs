//! Sequential against data-parallel execution on the two hot paths:
//! batched evaluation and verification trials.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kattn::harness::{evaluate_batch, ExperimentConfig, Model, Split, Task};
use kattn::verify::{run_suite, Suite};
use kattn::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn evaluation(c: &mut Criterion) {
    let text = "[model]\nd_model = 32\nd_ff = 64\nn_layers = 2\nn_heads = 2\n";
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    let model = Model::init(&cfg.model_config().unwrap(), 0).unwrap();
    let batch = Task::new(&cfg.task).unwrap().heldout(Split::Test, 64, 0);
    let mut group = c.benchmark_group("evaluate_batch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate_batch(&model, &batch, exec).unwrap())
        });
    }
    group.finish();
}

fn verification(c: &mut Criterion) {
    let mut group = c.benchmark_group("verify_smoother");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_suite(Suite::Smoother, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, evaluation, verification);
criterion_main!(benches);
