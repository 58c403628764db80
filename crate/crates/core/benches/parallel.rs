//! Sequential vs rayon fan-out on a training step and an evaluation sweep.
//! With a single core the two should be close; the gap grows with cores.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eebnn::eval::{sweep, SweepOptions};
use eebnn::frontend::{FeatureMode, Frontend, FrontendConfig, MelFeature};
use eebnn::net::{ArchSpec, Family, Model};
use eebnn::par::{with_mode, ExecMode};
use eebnn::train::{synth_dataset, DifficultyMix, Graph, NormMode, Quantizer, Split, TrainParams};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn train_step(c: &mut Criterion) {
    let model = Model::build(&ArchSpec::toy(Family::QuickNet, 6).unwrap(), 0).unwrap();
    let data = synth_dataset(6, 10, DifficultyMix::Mixed, 0).unwrap();
    let fe = Frontend::new(FrontendConfig::default()).unwrap();
    let idx: Vec<usize> = data.indices(Split::Train).into_iter().take(16).collect();
    let feats: Vec<MelFeature> = idx
        .iter()
        .map(|&i| data.featurize(i, &fe, FeatureMode::Eval).unwrap())
        .collect();
    let refs: Vec<&MelFeature> = feats.iter().collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.samples()[i].label).collect();
    let graph = Graph::new(model.plan(), Quantizer::Sign, NormMode::Batch);
    let params = TrainParams::from_model(&model);

    let mut g = c.benchmark_group("train_step_batch16");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| with_mode(mode, || graph.loss_and_grads(&params, &refs, &labels, &[1.0; 5]).unwrap()))
        });
    }
    g.finish();
}

fn eval_sweep(c: &mut Criterion) {
    let model = Model::build(&ArchSpec::toy(Family::QuickNet, 6).unwrap(), 0).unwrap();
    let data = synth_dataset(6, 20, DifficultyMix::Mixed, 0).unwrap();
    let fe = Frontend::new(FrontendConfig::default()).unwrap();
    let opts = SweepOptions {
        dataset_id: "synth".into(),
        timing: false,
    };
    let mut g = c.benchmark_group("sweep_24_clips");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| with_mode(mode, || sweep(&model, &data, &fe, &[0.0, 0.5, 1.0], &opts).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, train_step, eval_sweep);
criterion_main!(benches);
