use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kg2mmkg_bench::{random_graph, random_rows, random_table};
use kg2mmkg_core::embed::{self, EncoderConfig};
use kg2mmkg_core::evalmetrics::{fid, FeatureSet};
use kg2mmkg_core::kg::{EntityId, RelationId};
use kg2mmkg_core::mmkgc::{evaluate_model, train_transe, KgcConfig, Setting};
use kg2mmkg_core::sns::select_all;

fn sns(c: &mut Criterion) {
    let mut group = c.benchmark_group("sns_select_all");
    for n in [1_000, 10_000] {
        let g = random_graph(n, 20, n * 8, 1);
        let table = random_table(&g, 64, 2);
        let targets: Vec<EntityId> = (0..n as u32).map(EntityId).collect();
        let allowed: BTreeSet<RelationId> = (0..20).map(RelationId).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| select_all(&g, &table, &targets, &allowed).unwrap())
        });
    }
    group.finish();
}

fn frechet(c: &mut Criterion) {
    let mut group = c.benchmark_group("fid");
    for dim in [64, 512] {
        let a = FeatureSet::new(&random_rows(dim + 50, dim, 3), "a").unwrap();
        let b = FeatureSet::new(&random_rows(dim + 50, dim, 4), "b").unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |bench, _| {
            bench.iter(|| fid(&a, &b).unwrap())
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let g = random_graph(500, 10, 3_000, 5);
    let cfg = EncoderConfig {
        dim: 32,
        epochs: 10,
        ..Default::default()
    };
    c.bench_function("encoder_10_epochs", |b| b.iter(|| embed::train(&g, &cfg).unwrap()));
}

fn transe(c: &mut Criterion) {
    let g = random_graph(500, 10, 3_000, 6);
    let cfg = KgcConfig {
        dim: 32,
        epochs: 10,
        ..Default::default()
    };
    c.bench_function("transe_10_epochs", |b| b.iter(|| train_transe(&g, &cfg, None).unwrap()));
    let trained = train_transe(&g, &cfg, None).unwrap();
    c.bench_function("filtered_ranking", |b| {
        b.iter(|| evaluate_model(&g, &trained.model, Setting::Filtered).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = sns, frechet, encoder, transe
}
criterion_main!(benches);
