//! Hot loops on the rayon global pool against the same code pinned to one
//! worker. Built without the `parallel` feature only the sequential path runs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rad_core::data::{self, InteractionRecord};
use rad_core::distembed::{self, MultiquantileConfig, MultiquantileModel};
use rad_core::ecdf::{self, CohortKey, CohortKind, LabelSources, TieRule};
use rad_core::metrics;
use rad_core::preference::{LabelKind, MlpRegressor, RegressorConfig};
use rad_core::synth::{self, SyntheticSpec};

struct Fixture {
    records: Vec<InteractionRecord>,
    binner: data::DurationBinner,
    samples: Vec<(CohortKey, f64)>,
    quantile_model: MultiquantileModel,
    regressor: MlpRegressor,
    examples: Vec<(InteractionRecord, f64)>,
}

fn fixture() -> Fixture {
    let spec = SyntheticSpec {
        users: 400,
        videos: 300,
        ..SyntheticSpec::default()
    };
    let (records, _) = synth::generate(&spec).expect("generator");
    let binner = data::fit_duration_binner(&records, 4).expect("binner");
    let by_video = distembed::cohort_samples(&records, CohortKind::Video, None, None);
    let cohorts: Vec<CohortKey> = by_video.keys().copied().collect();
    let support: Vec<usize> = by_video.values().map(Vec::len).collect();
    let quantile_model =
        MultiquantileModel::new(cohorts, support, 10_000.0, &MultiquantileConfig::default(), 1).expect("model");
    let samples: Vec<(CohortKey, f64)> = records.iter().take(4096).map(|r| (CohortKey::video(r.video_id), r.watch_time)).collect();
    let regressor = MlpRegressor::new(LabelKind::RadV, &records, &RegressorConfig::default(), 2).expect("regressor");
    let examples = records.iter().take(4096).map(|r| (r.clone(), 0.5)).collect();
    Fixture {
        records,
        binner,
        samples,
        quantile_model,
        regressor,
        examples,
    }
}

fn workloads(c: &mut Criterion, fx: &Fixture, mode: &str, run: &dyn Fn(&mut (dyn FnMut() + Send))) {
    let mut group = c.benchmark_group(mode);
    group.sample_size(10);
    group.bench_function("build_and_label", |b| {
        b.iter(|| {
            run(&mut || {
                let video = ecdf::build_cdfs(&fx.records, CohortKind::Video, Some(&fx.binner), None, TieRule::Midrank).unwrap();
                let user = ecdf::build_cdfs(&fx.records, CohortKind::UserXDurationbin, Some(&fx.binner), None, TieRule::Midrank).unwrap();
                let d2q = ecdf::build_cdfs(&fx.records, CohortKind::DurationBin, Some(&fx.binner), None, TieRule::Midrank).unwrap();
                let src = LabelSources {
                    video: &video,
                    user: &user,
                    user_kind: CohortKind::UserXDurationbin,
                    d2q: &d2q,
                    binner: &fx.binner,
                    clusters: None,
                    clip_pcr: true,
                };
                black_box(ecdf::label_records(&fx.records, &src));
            })
        })
    });
    group.bench_function("grouped_xauc", |b| {
        let pred: Vec<f64> = fx.records.iter().map(|r| r.watch_time / r.duration).collect();
        let truth: Vec<f64> = fx.records.iter().map(|r| r.watch_time).collect();
        let users: Vec<u64> = fx.records.iter().map(|r| r.user_id).collect();
        b.iter(|| run(&mut || drop(black_box(metrics::xgauc(&pred, &truth, &users).unwrap()))))
    });
    group.bench_function("quantile_gradient", |b| {
        b.iter(|| run(&mut || drop(black_box(fx.quantile_model.loss_and_gradient(&fx.samples).unwrap()))))
    });
    group.bench_function("regressor_gradient", |b| {
        b.iter(|| run(&mut || drop(black_box(fx.regressor.loss_and_gradient(&fx.examples).unwrap()))))
    });
    group.finish();
}

fn bench(c: &mut Criterion) {
    let fx = fixture();
    #[cfg(feature = "parallel")]
    {
        workloads(c, &fx, "global_pool", &|f| f());
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
        workloads(c, &fx, "one_thread", &|f| single.install(f));
    }
    #[cfg(not(feature = "parallel"))]
    workloads(c, &fx, "sequential", &|f| f());
}

criterion_group!(benches, bench);
criterion_main!(benches);
