use criterion::{criterion_group, criterion_main, Criterion};
use great_bench::cloud;
use great_core::backbones::{ball_query, default_levels, farthest_point_sample, PointGeometry};
use std::hint::black_box;

fn geometry(c: &mut Criterion) {
    let pts = cloud(0, 2048);
    c.bench_function("fps 2048 -> 512", |b| b.iter(|| farthest_point_sample(black_box(&pts), 512)));
    let centres = pts.select(ndarray::Axis(0), &farthest_point_sample(&pts, 512));
    c.bench_function("ball query 512 x 32", |b| {
        b.iter(|| ball_query(black_box(&pts), black_box(&centres), 0.2, 32))
    });
    let levels = default_levels();
    c.bench_function("point geometry (3 levels)", |b| {
        b.iter(|| PointGeometry::build(black_box(&pts), &levels).unwrap())
    });
}

criterion_group!(benches, geometry);
criterion_main!(benches);
