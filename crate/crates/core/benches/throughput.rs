//! Sequential versus data-parallel throughput of the three hot loops:
//! corpus generation, cross-validation units and Shapley attribution.
//!
//! `cargo bench -p crosspath-core` measures jobs=1 against all cores;
//! adding `--no-default-features` builds the sequential fallback, where
//! both series should match.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use crosspath_core::explain::{explain_corpus, ExplainConfig};
use crosspath_core::harness::{self, Dataset, GridSpace, TrainingSettings};
use crosspath_core::model::ModelKind;
use crosspath_core::par::resolve_jobs;
use crosspath_core::seed::SeedPlan;
use crosspath_core::synthgen::{self, GeneratorConfig};
use crosspath_core::windowing::{DataType, Variant};

const BUILD: &str = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };

fn job_counts() -> Vec<usize> {
    let all = resolve_jobs(0);
    if all > 1 {
        vec![1, all]
    } else {
        vec![1]
    }
}

fn small_config() -> GeneratorConfig {
    GeneratorConfig {
        n_participants: 12,
        scenarios_per_participant: 10,
        ..synthgen::benchmark_config(7)
    }
}

fn bench_generate(c: &mut Criterion) {
    let cfg = small_config();
    let mut g = c.benchmark_group(format!("generate/{BUILD}"));
    g.sample_size(10);
    for jobs in job_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(jobs), &jobs, |b, &jobs| {
            b.iter(|| black_box(synthgen::generate(&cfg, jobs).unwrap()))
        });
    }
    g.finish();
}

fn bench_cross_validation(c: &mut Criterion) {
    let instances = synthgen::generate(&small_config(), 1).unwrap();
    let plan = SeedPlan::from_master(7);
    let ds = Dataset::for_type(&instances, DataType::T11, Variant::Xyod, 5, plan.split, 4).unwrap();
    let settings = TrainingSettings {
        epochs: 2,
        ..TrainingSettings::default()
    };
    let configs = GridSpace::ci_slice().configs(ModelKind::Aux, Variant::Xyod, ds.output_len, &settings);
    let mut g = c.benchmark_group(format!("cross_validation/{BUILD}"));
    g.sample_size(10);
    for jobs in job_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(jobs), &jobs, |b, &jobs| {
            b.iter(|| black_box(harness::grid_search_configs(&configs, &ds, &plan, jobs).unwrap()))
        });
    }
    g.finish();
}

fn bench_explain(c: &mut Criterion) {
    let instances = synthgen::generate(&small_config(), 1).unwrap();
    let plan = SeedPlan::from_master(7);
    let ds = Dataset::for_type(&instances, DataType::T11, Variant::Xyod, 5, plan.split, 4).unwrap();
    let settings = TrainingSettings {
        epochs: 2,
        ..TrainingSettings::default()
    };
    let config = &GridSpace::ci_slice().configs(ModelKind::Aux, Variant::Xyod, ds.output_len, &settings)[0];
    let (artifact, _) = harness::train_on_pool(config, &ds, &plan).unwrap();
    let norm = &artifact.normalization;
    let items: Vec<_> = ds
        .test_samples()
        .into_iter()
        .take(24)
        .map(|s| (s.instance_id.clone(), s.start_step, norm.normalize(s).unwrap()))
        .collect();
    let pool: Vec<_> = ds.pool_samples().into_iter().map(|s| norm.normalize(s).unwrap()).collect();
    let mut g = c.benchmark_group(format!("explain/{BUILD}"));
    g.sample_size(10);
    for jobs in job_counts() {
        let cfg = ExplainConfig {
            background_size: 50,
            seed: plan.background,
            jobs,
            ..ExplainConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(jobs), &cfg, |b, cfg| {
            b.iter(|| black_box(explain_corpus(&artifact, &items, &pool, cfg).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_generate, bench_cross_validation, bench_explain);
criterion_main!(benches);
