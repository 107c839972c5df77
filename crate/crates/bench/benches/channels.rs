use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rdmachan::chan::{declared_table, Selector};
use rdmachan::metrics::{validate_matrix, MeasureParams};
use rdmachan_bench::{echo, stream};

const MESSAGES: u64 = 2_000;

fn streaming(c: &mut Criterion) {
    let mut g = c.benchmark_group("stream");
    g.throughput(Throughput::Elements(MESSAGES));
    for sel in [
        Selector::SendRecvNormal,
        Selector::WslotInlined,
        Selector::RingZeroing,
        Selector::RingNoZeroing,
        Selector::SringImm,
        Selector::RslotInlined,
        Selector::RringInlined,
    ] {
        g.bench_with_input(BenchmarkId::from_parameter(sel), &sel, |b, &sel| b.iter(|| stream(sel, MESSAGES, 256)));
    }
    g.finish();
}

fn echoing(c: &mut Criterion) {
    let mut g = c.benchmark_group("echo");
    g.throughput(Throughput::Elements(MESSAGES));
    for sel in [Selector::SendRecvNormal, Selector::WslotInlined, Selector::RingZeroing] {
        g.bench_with_input(BenchmarkId::from_parameter(sel), &sel, |b, &sel| b.iter(|| echo(sel, MESSAGES, 64)));
    }
    g.finish();
}

fn matrix(c: &mut Criterion) {
    let specs = declared_table();
    let mut g = c.benchmark_group("matrix");
    g.sample_size(10);
    g.bench_function("validate", |b| b.iter(|| validate_matrix(&specs, &MeasureParams::default())));
    g.finish();
}

criterion_group!(benches, streaming, echoing, matrix);
criterion_main!(benches);
