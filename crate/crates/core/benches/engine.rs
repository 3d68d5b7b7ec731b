//! Sequential against parallel scheduling on the main workloads.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pihte::decomposition::{decompose, parse_decomposition, DecomposeOptions, Hypergraph};
use pihte::engine::{estimate, EvalOptions};
use pihte::estimand::{flatten, parse_estimand};
use pihte::scm::{random_cbn, Distribution};
use pihte::{fixtures, CausalGraph, Exec, SparseFactor, Variable};

const SCHEDULES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn factor(names: [&str; 2], k: [u32; 2], salt: u32) -> SparseFactor {
    let scope = vec![Variable::new(names[0], k[0]), Variable::new(names[1], k[1])];
    let entries =
        (0..k[0]).flat_map(|x| (0..k[1]).map(move |y| (vec![x, y], 1.0 + ((x * 31 + y * 17 + salt) % 97) as f64)));
    SparseFactor::from_entries(scope, entries).unwrap()
}

fn factor_product(c: &mut Criterion) {
    // 160k rows joined with 1.6k rows on B: 640k output rows.
    let f = factor(["A", "B"], [400, 400], 1);
    let g = factor(["B", "C"], [400, 4], 2);
    let mut group = c.benchmark_group("factor_product_640k");
    for (name, exec) in SCHEDULES {
        group.bench_function(name, |b| {
            b.iter(|| black_box(f.product_with(&g, exec).unwrap().marginalize_with(&["B"], exec).unwrap()))
        });
    }
    group.finish();
}

fn chain99(c: &mut Criterion) {
    let g = CausalGraph::parse(fixtures::CHAIN99_GRAPH).unwrap();
    let est = parse_estimand(fixtures::CHAIN99_ESTIMAND).unwrap();
    let cbn = random_cbn(&g, Distribution::Dirichlet { alpha: 1.0 }, 1);
    let mut group = c.benchmark_group("chain99_estimate");
    group.sample_size(10);
    for n in [1000usize, 4000] {
        let data = cbn.sample(n, 2, Exec::Parallel);
        for (name, exec) in SCHEDULES {
            let opts = EvalOptions { exec, ..EvalOptions::default() };
            group.bench_with_input(BenchmarkId::new(name, n), &data, |b, d| {
                b.iter(|| estimate(&est, d, &opts).unwrap())
            });
        }
    }
    group.finish();
}

fn cone_cloud(c: &mut Criterion) {
    let g = fixtures::cone_cloud_graph(10);
    let est = parse_estimand(fixtures::CONE_CLOUD_ESTIMAND).unwrap();
    let cbn = random_cbn(&g, Distribution::Dirichlet { alpha: 1.0 }, 0);
    let supplied = parse_decomposition(fixtures::CONE_CLOUD_TD).unwrap();
    let mut group = c.benchmark_group("cone_cloud_estimate");
    group.sample_size(10);
    for n in [400usize, 1600] {
        let data = cbn.sample(n, 3, Exec::Parallel);
        for (name, exec) in SCHEDULES {
            let opts = EvalOptions { exec, supplied: Some(supplied.clone()), ..EvalOptions::default() };
            group.bench_with_input(BenchmarkId::new(name, n), &data, |b, d| {
                b.iter(|| estimate(&est, d, &opts).unwrap())
            });
        }
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let g = CausalGraph::parse(fixtures::CHAIN99_GRAPH).unwrap();
    let cbn = random_cbn(&g, Distribution::Dirichlet { alpha: 1.0 }, 1);
    let mut group = c.benchmark_group("sample_50k_rows");
    group.sample_size(10);
    for (name, exec) in SCHEDULES {
        group.bench_function(name, |b| b.iter(|| black_box(cbn.sample(50_000, 5, exec))));
    }
    group.finish();
}

fn decomposition_restarts(c: &mut Criterion) {
    let est = parse_estimand(fixtures::CONE_CLOUD_ESTIMAND).unwrap();
    let hier = flatten(&est.expr);
    let level = hier.root_level();
    let h = Hypergraph::from_level(level);
    let mut group = c.benchmark_group("decompose_64_restarts");
    for (name, exec) in SCHEDULES {
        let opts = DecomposeOptions { restarts: 64, seed: 9, exec };
        group.bench_function(name, |b| b.iter(|| decompose(&h, &level.free_vars, opts).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, factor_product, chain99, cone_cloud, sampling, decomposition_restarts);
criterion_main!(benches);
