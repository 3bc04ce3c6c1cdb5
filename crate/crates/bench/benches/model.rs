use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use e2ea_bench::toy_model;
use e2ea_core::{BeamConfig, DecodeMode, FusionConfig, Recognizer};

fn encoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("blstm_encoder");
    for hidden in [32, 64] {
        let (model, data) = toy_model(hidden);
        group.bench_with_input(BenchmarkId::from_parameter(hidden), &hidden, |b, _| {
            b.iter(|| model.encode(black_box(&data[0].features)).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let (mut model, data) = toy_model(64);
    c.bench_function("mtl_forward_backward", |b| {
        b.iter(|| {
            model.store_mut().zero_grads();
            model
                .accumulate_gradients(&data[0].features, &data[0].labels, 0.5, &FusionConfig::none(), None, None)
                .unwrap()
        })
    });
}

fn beam_search(c: &mut Criterion) {
    let (model, data) = toy_model(64);
    let encoded = model.encode(&data[0].features).unwrap();
    let rec = Recognizer::new(&model, None);
    let mut group = c.benchmark_group("beam_search");
    group.sample_size(20);
    for (name, mode) in [
        ("attention", DecodeMode::Attention),
        ("rescoring", DecodeMode::Rescoring),
        ("one-pass", DecodeMode::OnePass),
    ] {
        let cfg = BeamConfig {
            mode,
            ..BeamConfig::default()
        };
        group.bench_function(name, |b| b.iter(|| rec.decode(black_box(&encoded), &cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, encoder, train_step, beam_search);
criterion_main!(benches);
