//! Sequential against rayon execution for the data-parallel stages: rope
//! simulation per sequence, per-sample gradients of a batch, and
//! per-frame evaluation.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dlo::dataset::{generate_sequence, DataConfig, Frame};
use dlo::encoder::EncoderConfig;
use dlo::eval::{evaluate, EvalConfig};
use dlo::heads::LossWeights;
use dlo::model::{Model, ModelConfig};
use dlo::par::Exec;
use dlo::sample::{item_rng, training_sample, AugmentPolicy, TrainSample};
use dlo::train::sample_gradients;
use numkit::ParamStore;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn small_data() -> DataConfig {
    DataConfig {
        sequences: 8,
        frames_per_sequence: 2,
        ..DataConfig::default()
    }
}

fn frames(cfg: &DataConfig) -> Vec<Frame> {
    (0..cfg.sequences).flat_map(|s| generate_sequence(cfg, s).expect("generate")).collect()
}

fn simulation(c: &mut Criterion) {
    let cfg = small_data();
    let mut g = c.benchmark_group("simulate_sequences");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(exec.map_range(cfg.sequences, |s| generate_sequence(&cfg, s).expect("generate"))))
        });
    }
    g.finish();
}

fn batch_gradients(c: &mut Criterion) {
    let data = frames(&small_data());
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(ModelConfig::new(EncoderConfig::desk(), 16), &mut store, 0).expect("model");
    let samples: Vec<TrainSample<f32>> = data
        .iter()
        .enumerate()
        .map(|(i, f)| training_sample(f, &AugmentPolicy::default(), &model.config, &mut item_rng(0, 0, i as u64)).expect("sample"))
        .collect();
    let mut g = c.benchmark_group("batch_gradients_16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(exec.map(&samples, |s| sample_gradients(&model, &store, s, LossWeights::default()).expect("grad").loss)))
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let data = frames(&small_data());
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(ModelConfig::new(EncoderConfig::desk(), 16), &mut store, 0).expect("model");
    let cfg = EvalConfig::default();
    let mut g = c.benchmark_group("evaluate_16_frames");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(evaluate(&model, &store, &data, &cfg, exec).expect("eval").records.len()))
        });
    }
    g.finish();
}

criterion_group!(benches, simulation, batch_gradients, evaluation);
criterion_main!(benches);
