use criterion::{criterion_group, criterion_main, Criterion};
use maskwright::autodiff::Tape;
use maskwright::nn::Binding;
use maskwright::presets::preset;
use maskwright::tasks::TaskKind;
use maskwright::train::{train_base, train_explainer, TrainConfig};
use maskwright_bench::{bigru_fixture, conv2d_fixture, task_fixture};

fn forward_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_backward");
    g.sample_size(20);

    let (mut conv, x) = conv2d_fixture(32, 16);
    g.bench_function("conv2d_32x1x16x16", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let mut binding = Binding::new();
            let y = conv.forward(&tape, x.feed(&tape), &mut binding).unwrap();
            tape.backward(y.sum_all()).unwrap()
        })
    });

    let (mut gru, ids) = bigru_fixture(32, 30);
    g.bench_function("bigru_32x30", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let mut binding = Binding::new();
            let y = gru.forward(&tape, ids.feed(&tape), &mut binding).unwrap();
            tape.backward(y.sum_all()).unwrap()
        })
    });
    g.finish();
}

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    let one_epoch = TrainConfig { epochs: 1, ..Default::default() };

    let (model, data, _) = task_fixture(TaskKind::PlantedPatch, 256);
    g.bench_function("base_epoch_patch_256", |b| {
        b.iter(|| {
            let mut m = model.clone();
            train_base(&mut m, &data, &one_epoch).unwrap()
        })
    });

    let (mut base, data, spec) = task_fixture(TaskKind::KeywordSeq, 256);
    train_base(&mut base, &data, &one_epoch).unwrap();
    let p = preset(&spec, 5).unwrap();
    let mm = p.masked_model(base, &data.example_shape(), 6).unwrap();
    let cfg = TrainConfig { epochs: 1, reg: p.explainer_train.reg, ..Default::default() };
    g.bench_function("explainer_epoch_keyword_256", |b| {
        b.iter(|| {
            let mut m = mm.clone();
            train_explainer(&mut m, &data, &cfg).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, forward_backward, training);
criterion_main!(benches);
