//! Throughput benchmarks for the three hot paths: simulating event logs,
//! parsing them back, and sampling characters from the generator.

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use liftlog_core::codec::{build_vocab, parse_line, render_log};
use liftlog_core::models::{
    DiscriminatorConfig, DiscriminatorParams, GeneratorConfig, GeneratorParams,
};
use liftlog_core::sim::{self, BuildingConfig};
use liftlog_core::train::derive_rng;

fn reference_log(ticks: u64) -> String {
    let config = BuildingConfig::default();
    let events = sim::run(&config, ticks).expect("default config simulates");
    render_log(&events)
}

fn bench_simulator(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulator");
    let ticks = 10_000u64;
    group.throughput(Throughput::Elements(ticks));
    group.bench_function("default_building_ticks", |b| {
        let config = BuildingConfig::default();
        b.iter(|| sim::run(&config, ticks).unwrap());
    });
    group.finish();
}

fn bench_codec(c: &mut Criterion) {
    let log = reference_log(50_000);
    let lines: Vec<&str> = log.lines().collect();
    let mut group = c.benchmark_group("codec");
    group.throughput(Throughput::Elements(lines.len() as u64));
    group.bench_function("parse_log_lines", |b| {
        b.iter(|| {
            let mut parsed = 0usize;
            for line in &lines {
                parse_line(line).unwrap();
                parsed += 1;
            }
            parsed
        });
    });
    group.finish();
}

fn bench_models(c: &mut Criterion) {
    let log = reference_log(20_000);
    let vocab = build_vocab(&log, false).unwrap();
    let mut rng = derive_rng(7, &[]);
    let gen = GeneratorParams::new(vocab.size(), GeneratorConfig::default(), &mut rng).unwrap();
    let disc =
        DiscriminatorParams::new(vocab.size(), DiscriminatorConfig::default(), &mut rng).unwrap();

    let mut group = c.benchmark_group("models");
    let chars = 256usize;
    group.throughput(Throughput::Elements(chars as u64));
    group.bench_function("generate_chars", |b| {
        let mut sample_rng = derive_rng(8, &[]);
        b.iter(|| {
            gen.generate_sequence("1 - ", chars, &vocab, &mut sample_rng)
                .unwrap()
        });
    });

    let window: Vec<u32> = (0..100u32).map(|i| i % vocab.size() as u32).collect();
    group.throughput(Throughput::Elements(1));
    group.bench_function("discriminator_score", |b| {
        b.iter(|| disc.score(&window).unwrap());
    });
    group.finish();
}

criterion_group!(benches, bench_simulator, bench_codec, bench_models);
criterion_main!(benches);
