use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use e2ea_bench::grid;
use e2ea_core::ctc::{prefix_extend, PrefixStep};
use e2ea_core::{ctc_loss, CtcPrefixState, Label, Vocab};

fn loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("ctc_loss");
    for frames in [50, 200, 800] {
        let g = grid(frames, 6);
        let target: Vec<Label> = (0..frames / 8).map(|i| Label((i % 5) as u32 + 1)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(frames), &frames, |b, _| {
            b.iter(|| ctc_loss(black_box(&g), black_box(&target)).unwrap())
        });
    }
    group.finish();
}

fn prefix(c: &mut Criterion) {
    let vocab = Vocab::letters(5).unwrap();
    let mut group = c.benchmark_group("prefix_extend");
    for frames in [50, 200, 800] {
        let g = grid(frames, 6);
        let mut state = CtcPrefixState::initial(&g);
        let mut prefix = Vec::new();
        for i in 0..5 {
            let l = Label(i % 5 + 1);
            state = match prefix_extend(&state, &g, &vocab, &prefix, l).unwrap() {
                PrefixStep::Open(s) => s,
                PrefixStep::Closed(_) => unreachable!(),
            };
            prefix.push(l);
        }
        group.bench_with_input(BenchmarkId::from_parameter(frames), &frames, |b, _| {
            b.iter(|| prefix_extend(black_box(&state), &g, &vocab, &prefix, Label(2)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, loss, prefix);
criterion_main!(benches);
