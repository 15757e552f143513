//! Criterion benchmarks: the simulator's hot paths, and the data-parallel
//! sweep/verification fan-out against its sequential fallback.
//!
//! Run with `cargo bench` (add `--no-default-features` to measure the
//! build without rayon; the parallel mode then degrades to sequential).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use anycall::bench::{findmagic, getpid_program, run_sweep, BenchSpec, Benchmark};
use anycall::costmodel::preset;
use anycall::isa::assemble_named;
use anycall::par::{map_ordered, ExecMode};
use anycall::syskernel::SimKernel;
use anycall::verifier::{verify, Limits};
use anycall::vm::{invoke_anycall, DEFAULT_FUEL};

fn modes() -> Vec<(&'static str, ExecMode)> {
    vec![
        ("sequential", ExecMode::Sequential),
        ("parallel", ExecMode::Parallel),
    ]
}

fn bench_sweep_modes(c: &mut Criterion) {
    let mut group = c.benchmark_group("getpid_sweep");
    group.sample_size(10);
    for (name, mode) in modes() {
        let spec = BenchSpec {
            benchmark: Benchmark::Getpid,
            invocations: 50,
            calls: (1..=32).collect(),
            chunk_sizes: vec![],
            params: preset("paper-kpti-getpid").unwrap(),
            sandbox: None,
            mode,
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &spec, |b, spec| {
            b.iter(|| run_sweep(spec).unwrap());
        });
    }
    group.finish();
}

fn bench_verify_corpus_modes(c: &mut Criterion) {
    // A fixed corpus of generated filter programs, verified one per task.
    let corpus: Vec<anycall::Program> = (1..=24)
        .map(|chunk| {
            assemble_named(
                format!("fm-{chunk}"),
                &findmagic::generate_program(chunk, b"#!/bin/sh", 0),
            )
            .unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("verify_corpus");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, mode| {
            b.iter(|| {
                let verdicts = map_ordered(corpus.clone(), *mode, |p| {
                    verify(&p, &Limits::default()).accepted
                });
                assert!(verdicts.iter().all(|v| *v));
            });
        });
    }
    group.finish();
}

fn bench_verifier_single(c: &mut Criterion) {
    let program =
        assemble_named("fm-256", &findmagic::generate_program(256, b"#!/bin/sh", 0)).unwrap();
    c.bench_function("verify_find_magic_256", |b| {
        b.iter(|| {
            let verdict = verify(&program, &Limits::default());
            assert!(verdict.accepted);
        });
    });
}

fn bench_interpreter(c: &mut Criterion) {
    let program = getpid_program(300).unwrap();
    assert!(verify(&program, &Limits::default()).accepted);
    c.bench_function("invoke_getpid_300", |b| {
        b.iter(|| {
            let mut kernel = SimKernel::without_sandbox();
            let result = invoke_anycall(&program, 0, &mut kernel, DEFAULT_FUEL);
            assert!(result.fault.is_none());
        });
    });
}

criterion_group!(
    benches,
    bench_sweep_modes,
    bench_verify_corpus_modes,
    bench_verifier_single,
    bench_interpreter
);
criterion_main!(benches);
