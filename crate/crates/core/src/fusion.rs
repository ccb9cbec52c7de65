//! Probit-space fusion of user-side and video-side quantiles.
//!
//! Both quantiles are mapped to z-scores with the inverse normal CDF,
//! averaged with weights `alpha`, `beta` normalised by `sqrt(alpha² + beta²)`,
//! and mapped back through the normal CDF. When both sides agree on `z` and
//! the weights are equal, the fused score is `sqrt(2) * z`: agreement sharpens
//! the quantile rather than reproducing it.

#![allow(clippy::excessive_precision)]

use serde::{Deserialize, Serialize};

use crate::{RadError, Result};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Complementary error function (Cody's rational Chebyshev approximations).
pub fn erfc(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.161_123_743_870_565_6,
        1.138_641_541_510_501_6e2,
        3.774_852_376_853_020_2e2,
        3.209_377_589_138_469_5e3,
        1.857_777_061_846_031_5e-1,
    ];
    const B: [f64; 4] = [
        2.360_129_095_234_412_1e1,
        2.440_246_379_344_441_7e2,
        1.282_616_526_077_372_3e3,
        2.844_236_833_439_170_6e3,
    ];
    const C: [f64; 9] = [
        5.641_884_969_886_700_9e-1,
        8.883_149_794_388_376,
        6.611_919_063_714_163e1,
        2.986_351_381_974_001_3e2,
        8.819_522_212_417_691e2,
        1.712_047_612_634_070_6e3,
        2.051_078_377_826_071_5e3,
        1.230_339_354_797_997_2e3,
        2.153_115_354_744_038_5e-8,
    ];
    const D: [f64; 8] = [
        1.574_492_611_070_983_5e1,
        1.176_939_508_913_125e2,
        5.371_811_018_620_099e2,
        1.621_389_574_566_690_2e3,
        3.290_799_235_733_459_6e3,
        4.362_619_090_143_247e3,
        3.439_367_674_143_721_6e3,
        1.230_339_354_803_749_4e3,
    ];
    const P: [f64; 6] = [
        3.053_266_349_612_323_4e-1,
        3.603_448_999_498_044_4e-1,
        1.257_817_261_112_292_5e-1,
        1.608_378_514_874_227_7e-2,
        6.587_491_615_298_378e-4,
        1.631_538_713_730_209_8e-2,
    ];
    const Q: [f64; 5] = [
        2.568_520_192_289_822,
        1.872_952_849_923_467_3,
        5.279_051_029_514_284e-1,
        6.051_834_131_244_132e-2,
        2.335_204_976_268_691_8e-3,
    ];

    if x.is_nan() {
        return f64::NAN;
    }
    let y = x.abs();
    if y <= 0.468_75 {
        let ysq = if y > 1.11e-16 { y * y } else { 0.0 };
        let mut num = A[4] * ysq;
        let mut den = ysq;
        for i in 0..3 {
            num = (num + A[i]) * ysq;
            den = (den + B[i]) * ysq;
        }
        let erf = x * (num + A[3]) / (den + B[3]);
        return 1.0 - erf;
    }
    let tail = if y >= 26.543 {
        0.0
    } else {
        let r = if y <= 4.0 {
            let mut num = C[8] * y;
            let mut den = y;
            for i in 0..7 {
                num = (num + C[i]) * y;
                den = (den + D[i]) * y;
            }
            (num + C[7]) / (den + D[7])
        } else {
            let ysq = 1.0 / (y * y);
            let mut num = P[5] * ysq;
            let mut den = ysq;
            for i in 0..4 {
                num = (num + P[i]) * ysq;
                den = (den + Q[i]) * ysq;
            }
            let r = ysq * (num + P[4]) / (den + Q[4]);
            (FRAC_1_SQRT_PI - r) / y
        };
        // exp(-y²) split so the squared argument stays exact
        let ysq = (y * 16.0).trunc() / 16.0;
        let del = (y - ysq) * (y + ysq);
        (-ysq * ysq).exp() * (-del).exp() * r
    };
    if x < 0.0 {
        2.0 - tail
    } else {
        tail
    }
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal CDF Φ.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

// Acklam's rational approximation for the lower half, q <= 0.5.
fn acklam_lower(q: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    if q < P_LOW {
        let t = (-2.0 * q.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    } else {
        let r = q - 0.5;
        let s = r * r;
        (((((A[0] * s + A[1]) * s + A[2]) * s + A[3]) * s + A[4]) * s + A[5]) * r
            / (((((B[0] * s + B[1]) * s + B[2]) * s + B[3]) * s + B[4]) * s + 1.0)
    }
}

fn probit_lower(q: f64) -> f64 {
    let x = acklam_lower(q);
    // One Newton step against the erfc-based CDF.
    let err = normal_cdf(x) - q;
    x - err / normal_pdf(x)
}

/// Inverse standard normal CDF Φ⁻¹ for `q` in the open unit interval.
pub fn probit(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(RadError::invalid(format!("probit argument {q} outside (0, 1)")));
    }
    if q == 0.5 {
        return Ok(0.0);
    }
    // Work in the lower tail, where 1 - q is exact for q > 0.5.
    Ok(if q < 0.5 { probit_lower(q) } else { -probit_lower(1.0 - q) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum FusionPolicy {
    /// `alpha = beta = 1`.
    #[default]
    Equal,
    /// `alpha = n_user`, `beta = n_video` for each record.
    SupportProportional,
    /// Explicit weights.
    Fixed { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl FusionWeights {
    pub const EQUAL: FusionWeights = FusionWeights { alpha: 1.0, beta: 1.0 };

    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(RadError::invalid(format!("fusion weights must be finite and non-negative, got {alpha}, {beta}")));
        }
        if alpha + beta <= 0.0 {
            return Err(RadError::invalid("fusion weights alpha and beta are both zero"));
        }
        Ok(Self { alpha, beta })
    }

    /// Weights for one record given the support of its user and video cohorts.
    /// Support-proportional weights fall back to equal when both supports are zero.
    pub fn resolve(policy: FusionPolicy, n_user: usize, n_video: usize) -> Result<Self> {
        match policy {
            FusionPolicy::Equal => Ok(Self::EQUAL),
            FusionPolicy::SupportProportional if n_user + n_video == 0 => Ok(Self::EQUAL),
            FusionPolicy::SupportProportional => Self::new(n_user as f64, n_video as f64),
            FusionPolicy::Fixed { alpha, beta } => Self::new(alpha, beta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedQuantile {
    pub z_user: f64,
    pub z_video: f64,
    pub z_fused: f64,
    pub q_fused: f64,
}

/// Fuses a user-side and a video-side quantile.
pub fn fuse(q_user: f64, q_video: f64, w: FusionWeights) -> Result<FusedQuantile> {
    let w = FusionWeights::new(w.alpha, w.beta)?;
    let z_user = probit(q_user)?;
    let z_video = probit(q_video)?;
    let z_fused = (w.alpha * z_user + w.beta * z_video) / w.alpha.hypot(w.beta);
    let q_fused = if w.beta == 0.0 {
        q_user
    } else if w.alpha == 0.0 {
        q_video
    } else {
        normal_cdf(z_fused)
    };
    Ok(FusedQuantile {
        z_user,
        z_video,
        z_fused,
        q_fused,
    })
}
