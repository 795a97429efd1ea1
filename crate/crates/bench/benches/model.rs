use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use frosty_core::binomial::{bin_at_least, ratio};
use frosty_core::chainstr::{threshold_frontier, ChainString};
use frosty_core::simnet::{run_until, Scenario};
use frosty_core::ProtocolParams;

fn binomial(c: &mut Criterion) {
    let x = ratio(1, 5);
    c.bench_function("bin_at_least(80, 1/5, 48)", |b| b.iter(|| bin_at_least(80, black_box(&x), 48).unwrap()));
}

// 80 reports sharing a 7000-bit prefix and splitting over the last block.
fn frontier(c: &mut Criterion) {
    let mut base = ChainString::new();
    for i in 0..7000u64 {
        base.push(i.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 63 == 1);
    }
    let values: Vec<ChainString> = (0..80u64)
        .map(|i| {
            let mut s = base.clone();
            s.push_bits(i % 3, 32);
            s
        })
        .collect();
    c.bench_function("threshold_frontier(80 x 7032 bits, 72)", |b| b.iter(|| threshold_frontier(black_box(&values), 72)));
}

fn simulation(c: &mut Criterion) {
    let sc = Scenario { seed: 1, params: ProtocolParams { f: 0, ..Default::default() }, ..Default::default() };
    let mut g = c.benchmark_group("simulation");
    g.sample_size(10);
    g.bench_function("n=25 happy path, 100 timeslots", |b| {
        b.iter_batched(|| sc.clone(), |sc| run_until(&sc, 100).unwrap(), BatchSize::SmallInput)
    });
    g.finish();
}

criterion_group!(benches, binomial, frontier, simulation);
criterion_main!(benches);
