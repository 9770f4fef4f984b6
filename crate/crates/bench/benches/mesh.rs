use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mziforge::imperfect::{generate_variation_map, stream_rng, MapKind, MapStructure};
use mziforge::mesh::{clements_decompose, mesh_to_unitary, GridShape};
use mziforge_bench::unitary;
use std::hint::black_box;

fn decompose(c: &mut Criterion) {
    let mut g = c.benchmark_group("clements_decompose");
    for n in [4, 8, 16, 32] {
        let u = unitary(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &u, |b, u| {
            b.iter(|| clements_decompose(black_box(u), 1e-8).unwrap())
        });
    }
    g.finish();
}

fn rebuild(c: &mut Criterion) {
    let plan = clements_decompose(&unitary(16), 1e-8).unwrap();
    c.bench_function("mesh_to_unitary/16", |b| b.iter(|| mesh_to_unitary(black_box(&plan))));
}

fn variation_maps(c: &mut Criterion) {
    let g = GridShape::for_modes(16);
    let mut group = c.benchmark_group("variation_map_16");
    for l in [1, 4, 8] {
        let s = MapStructure {
            radial: true,
            corr_len: l,
            renormalize: true,
        };
        group.bench_with_input(BenchmarkId::new("L", l), &s, |b, s| {
            let mut rng = stream_rng(1, 0);
            b.iter(|| generate_variation_map(g.width, g.height, 0.05, MapKind::Phase, *s, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, decompose, rebuild, variation_maps);
criterion_main!(benches);
