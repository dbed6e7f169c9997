use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use spectra_bench::{planted_matrix, uniform_trace};
use spectra_core::phase::layer_profile;
use spectra_core::spectral::{matrix_alpha, sliding_window_alpha, DEFAULT_DROP_THRESHOLD};
use spectra_core::trace_store::{decode_trace, encode_trace};

fn alpha_fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("matrix_alpha");
    for (t, d) in [(50, 64), (200, 512), (400, 1024)] {
        let m = planted_matrix(t, d);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{t}x{d}")), &m, |b, m| {
            b.iter(|| matrix_alpha(black_box(m), DEFAULT_DROP_THRESHOLD).unwrap())
        });
    }
    group.finish();
}

fn trace_level(c: &mut Criterion) {
    let trace = uniform_trace(12, 128, 64);
    c.bench_function("layer_profile 12x128x64", |b| {
        b.iter(|| layer_profile(black_box(&trace), DEFAULT_DROP_THRESHOLD).unwrap())
    });
    c.bench_function("sliding_window w=10 T=128 d=64", |b| {
        b.iter(|| sliding_window_alpha(black_box(&trace), 0, 10, DEFAULT_DROP_THRESHOLD).unwrap())
    });
    let bytes = encode_trace(&trace).unwrap();
    c.bench_function("decode_trace 12x128x64", |b| {
        b.iter(|| decode_trace(black_box(&bytes)).unwrap())
    });
}

criterion_group!(benches, alpha_fit, trace_level);
criterion_main!(benches);
