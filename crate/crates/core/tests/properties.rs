#![allow(clippy::excessive_precision)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use rad_core::cluster::{self, KModesConfig};
use rad_core::data::{self, SplitSpec};
use rad_core::ecdf::{self, CohortKind, TieRule};
use rad_core::fusion::{fuse, normal_cdf, probit, FusionWeights};
use rad_core::synth::{self, SyntheticSpec};

#[test]
fn probit_agrees_with_independent_inverse_cdf() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    // Log-spaced lower tail plus a linear sweep of the body, mirrored.
    let mut qs: Vec<f64> = (0..=1100).map(|i| 10f64.powf(-12.0 + i as f64 * 0.01)).filter(|&q| q < 0.5).collect();
    qs.extend((1..1000).map(|i| i as f64 / 1000.0));
    qs.extend(qs.clone().iter().map(|q| 1.0 - q));
    for q in qs {
        if !(1e-12..=1.0 - 1e-12).contains(&q) {
            continue;
        }
        worst = worst.max((probit(q).unwrap() - normal.inverse_cdf(q)).abs());
    }
    assert!(worst <= 1e-9, "worst absolute error {worst:e}");
}

// 30-digit values of the standard normal cdf.
const CDF_REFERENCE: [(f64, f64); 12] = [
    (-37.0, 5.7255712225245768227e-300),
    (-20.0, 2.7536241186062336951e-89),
    (-10.0, 7.619853024160526066e-24),
    (-8.5, 9.4795348222033183542e-18),
    (-4.21, 1.2768534413734953991e-5),
    (-1.5, 0.066807201268858066004),
    (-0.3, 0.38208857781104736693),
    (0.0, 0.5),
    (0.7, 0.75803634777692697138),
    (2.5, 0.99379033467422386483),
    (5.0, 0.99999971334842812081),
    (8.0, 0.9999999999999993779),
];

#[test]
fn normal_cdf_matches_high_precision_reference() {
    for (x, want) in CDF_REFERENCE {
        let got = normal_cdf(x);
        assert!((got - want).abs() <= want * 1e-13, "x = {x}: {got} vs {want}");
    }
}

#[test]
fn normal_cdf_agrees_with_independent_cdf() {
    // statrs is itself only good to about 1e-10 relative in the lower tail.
    let normal = Normal::new(0.0, 1.0).unwrap();
    for i in 0..=4000 {
        let x = -20.0 + i as f64 * 0.01;
        let (ours, theirs) = (normal_cdf(x), normal.cdf(x));
        assert!((ours - theirs).abs() <= 1e-15_f64.max(theirs * 1e-9), "x = {x}: {ours} vs {theirs}");
    }
}

#[test]
fn fusing_independent_normals_stays_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (alpha, beta) in [(1.0, 1.0), (3.0, 1.0), (0.2, 5.0)] {
        let w = FusionWeights::new(alpha, beta).unwrap();
        let n = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let zu: f64 = StandardNormal.sample(&mut rng);
            let zv: f64 = StandardNormal.sample(&mut rng);
            let qu = normal_cdf(zu).clamp(1e-15, 1.0 - 1e-15);
            let qv = normal_cdf(zv).clamp(1e-15, 1.0 - 1e-15);
            let z = fuse(qu, qv, w).unwrap().z_fused;
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "weights ({alpha}, {beta}): mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "weights ({alpha}, {beta}): variance {var}");
    }
}

#[test]
fn cluster_cohorts_have_support_on_the_default_dataset() {
    let spec = SyntheticSpec::default();
    let (records, _) = synth::generate(&spec).unwrap();
    let split = data::chrono_split(&records, &SplitSpec::new(spec.cutoff(0.8), spec.cutoff(0.9))).unwrap();
    let binner = data::fit_duration_binner(&split.train, 4).unwrap();
    let model = cluster::fit_kmodes(&data::user_features(&split.train), &KModesConfig::default()).unwrap();
    let clusters = model.cluster_map();
    let table = ecdf::build_cdfs(
        &split.train,
        CohortKind::UserClusterXDurationbin,
        Some(&binner),
        Some(&clusters),
        TieRule::Midrank,
    )
    .unwrap();
    let smallest = table.cdfs.values().map(|c| c.n()).min().unwrap();
    assert_eq!(table.len(), 40);
    assert!(smallest >= 100, "smallest cluster cohort has {smallest} samples");
    assert!(model.cost_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn labels_stay_strictly_inside_the_unit_interval() {
    let spec = SyntheticSpec {
        users: 200,
        videos: 150,
        ..SyntheticSpec::default()
    };
    let (records, _) = synth::generate(&spec).unwrap();
    let split = data::chrono_split(&records, &SplitSpec::new(spec.cutoff(0.8), spec.cutoff(0.9))).unwrap();
    let binner = data::fit_duration_binner(&split.train, 4).unwrap();
    let table = |kind| ecdf::build_cdfs(&split.train, kind, Some(&binner), None, TieRule::Midrank).unwrap();
    let (video, user, d2q) = (
        table(CohortKind::Video),
        table(CohortKind::UserXDurationbin),
        table(CohortKind::DurationBin),
    );
    let src = ecdf::LabelSources {
        video: &video,
        user: &user,
        user_kind: CohortKind::UserXDurationbin,
        d2q: &d2q,
        binner: &binner,
        clusters: None,
        clip_pcr: true,
    };
    for part in [&split.train, &split.validation, &split.test] {
        for l in ecdf::label_records(part, &src) {
            for q in [l.q_video, l.q_user, l.q_d2q] {
                assert!(q > 0.0 && q < 1.0);
            }
            assert!((0.0..=1.0).contains(&l.pcr));
        }
    }
}
