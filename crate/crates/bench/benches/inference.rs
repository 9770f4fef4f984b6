use criterion::{criterion_group, criterion_main, Criterion};
use mziforge::experiments::simulated_accuracy_loss;
use mziforge::imperfect::{apply_instance, realize_instance, ImperfectionParameterSet};
use mziforge::network::{build_teacher_classifier, Dataset};
use mziforge_bench::{inputs, model};
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let m = model(16, 2);
    let compiled = m.compile();
    let xs = inputs(16, 64);
    c.bench_function("forward/16x2/compiled/64", |b| {
        b.iter(|| {
            xs.iter()
                .map(|x| compiled.forward(black_box(x)).unwrap()[0])
                .sum::<f64>()
        })
    });
    c.bench_function("compile/16x2", |b| b.iter(|| black_box(&m).compile()));
}

fn imperfect_instance(c: &mut Criterion) {
    let m = model(16, 2);
    let p = ImperfectionParameterSet {
        sigma_phs: 0.01,
        sigma_bes: 0.02,
        corr_len: 4,
        sigma_il: 0.2,
        n_bits: Some(6),
        radial: true,
        ..Default::default()
    };
    let shape = m.mesh_sizes();
    c.bench_function("realize_and_apply/16x2", |b| {
        let mut i = 0;
        b.iter(|| {
            i += 1;
            let inst = realize_instance(&p, &shape, 1, i).unwrap();
            apply_instance(black_box(&m), &inst).unwrap()
        })
    });
}

fn monte_carlo(c: &mut Criterion) {
    let (m, data): (_, Dataset) = build_teacher_classifier(8, 2, 100, 1).unwrap();
    let p = ImperfectionParameterSet {
        sigma_phs: 0.02,
        ..Default::default()
    };
    let mut g = c.benchmark_group("sal");
    g.sample_size(10);
    g.bench_function("teacher8x2/n_p=50", |b| {
        b.iter(|| simulated_accuracy_loss(&m, &data, &p, 50, 3).unwrap().sal)
    });
    g.finish();
}

criterion_group!(benches, forward, imperfect_instance, monte_carlo);
criterion_main!(benches);
