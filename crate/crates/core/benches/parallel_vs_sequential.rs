use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use musicform_core::exec::Strategy;
use musicform_core::form::{FormSpec, PartSpec};
use musicform_core::orchestrator::{plan_piece, render_many, OrchestratorConfig};
use musicform_core::rvq::{synthetic_frames, train_codebooks, train_preset, CodecPreset, TrainConfig};
use musicform_core::ToyBackend;

const STRATEGIES: [(&str, Strategy); 2] = [("sequential", Strategy::Sequential), ("parallel", Strategy::Parallel)];

fn encode(c: &mut Criterion) {
    let codec = train_preset(CodecPreset::Toy, 0, Strategy::default()).unwrap();
    let frames = synthetic_frames(20_000, 8, 1);
    let mut group = c.benchmark_group("encode_batch");
    for (name, s) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| codec.encode_batch(&frames, s).unwrap()));
    }
    group.finish();
}

fn train(c: &mut Criterion) {
    let frames = synthetic_frames(4096, 8, 2);
    let mut group = c.benchmark_group("train_codebooks");
    group.sample_size(10);
    for (name, s) in STRATEGIES {
        let mut config = TrainConfig::new(4, 64, 3);
        config.max_iters = 10;
        config.strategy = s;
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| train_codebooks(&frames, &config).unwrap()));
    }
    group.finish();
}

fn render(c: &mut Criterion) {
    let spec = FormSpec {
        parts: (1..=2)
            .map(|i| PartSpec {
                index: i,
                prompt: format!("part {i}"),
                length_s: 10,
                referenced_part: if i == 2 { 1 } else { -1 },
            })
            .collect(),
        description: None,
    };
    let mut base = OrchestratorConfig::default();
    base.constraints.total_s = 20;
    base.constraints.min_part_s = 10;
    let plans: Vec<_> = (0..8)
        .map(|seed| {
            let mut config = base;
            config.sampler.seed = seed;
            plan_piece(&spec, &config).unwrap()
        })
        .collect();
    let backend = ToyBackend::default();
    let mut group = c.benchmark_group("render_many");
    group.sample_size(10);
    for (name, s) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| render_many(&plans, &backend, s)));
    }
    group.finish();
}

criterion_group!(benches, encode, train, render);
criterion_main!(benches);
