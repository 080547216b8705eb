//! Scalar normal special functions.
//!
//! The error function pair follows W. J. Cody's rational Chebyshev
//! approximations (the SPECFUN `calerf` scheme), which keep full double
//! precision over the whole range, including the far tail of `erfc`. The
//! normal quantile uses Acklam's rational approximation polished with one
//! Halley step against our own CDF.

/// 1/sqrt(2*pi)
pub(crate) const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// ln(sqrt(2*pi))
pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;

// Coefficients for erf(x), |x| <= 0.46875.
const ERF_A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_6e2,
    3.774_852_376_853_02e2,
    3.209_377_589_138_469_4e3,
    1.857_777_061_846_031_5e-1,
];
const ERF_B: [f64; 4] = [
    2.360_129_095_234_412_2e1,
    2.440_246_379_344_441_7e2,
    1.282_616_526_077_372_3e3,
    2.844_236_833_439_171e3,
];

// Coefficients for erfc(x), 0.46875 < x <= 4.
const ERFC_C: [f64; 9] = [
    5.641_884_969_886_701e-1,
    8.883_149_794_388_377,
    6.611_919_063_714_163e1,
    2.986_351_381_974_001e2,
    8.819_522_212_417_69e2,
    1.712_047_612_634_070_7e3,
    2.051_078_377_826_071_6e3,
    1.230_339_354_797_997_2e3,
    2.153_115_354_744_038_3e-8,
];
const ERFC_D: [f64; 8] = [
    1.574_492_611_070_983_5e1,
    1.176_939_508_913_125e2,
    5.371_811_018_620_099e2,
    1.621_389_574_566_690_3e3,
    3.290_799_235_733_459_7e3,
    4.362_619_090_143_247e3,
    3.439_367_674_143_721_6e3,
    1.230_339_354_803_749_5e3,
];

// Coefficients for erfc(x), x > 4.
const ERFC_P: [f64; 6] = [
    3.053_266_349_612_323_6e-1,
    3.603_448_999_498_044_5e-1,
    1.257_817_261_112_292_6e-1,
    1.608_378_514_874_227_5e-2,
    6.587_491_615_298_378e-4,
    1.631_538_713_730_209_7e-2,
];
const ERFC_Q: [f64; 5] = [
    2.568_520_192_289_822,
    1.872_952_849_923_460_4,
    5.279_051_029_514_285e-1,
    6.051_834_131_244_132e-2,
    2.335_204_976_268_691_8e-3,
];

fn erf_core(x: f64) -> f64 {
    let z = x * x;
    let mut num = ERF_A[4] * z;
    let mut den = z;
    for i in 0..3 {
        num = (num + ERF_A[i]) * z;
        den = (den + ERF_B[i]) * z;
    }
    x * (num + ERF_A[3]) / (den + ERF_B[3])
}

// exp(-y*y) split so the squared high part is exact in f64.
fn exp_neg_sq(y: f64) -> f64 {
    let hi = (y * 16.0).trunc() / 16.0;
    let del = (y - hi) * (y + hi);
    (-hi * hi).exp() * (-del).exp()
}

fn erfc_mid(y: f64) -> f64 {
    let mut num = ERFC_C[8] * y;
    let mut den = y;
    for i in 0..7 {
        num = (num + ERFC_C[i]) * y;
        den = (den + ERFC_D[i]) * y;
    }
    exp_neg_sq(y) * (num + ERFC_C[7]) / (den + ERFC_D[7])
}

fn erfc_far(y: f64) -> f64 {
    if y >= 26.64 {
        return 0.0;
    }
    let z = 1.0 / (y * y);
    let mut num = ERFC_P[5] * z;
    let mut den = z;
    for i in 0..4 {
        num = (num + ERFC_P[i]) * z;
        den = (den + ERFC_Q[i]) * z;
    }
    let r = z * (num + ERFC_P[4]) / (den + ERFC_Q[4]);
    exp_neg_sq(y) * (INV_SQRT_PI - r) / y
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let y = x.abs();
    if y <= 0.46875 {
        erf_core(x)
    } else if x > 0.0 {
        1.0 - erfc_pos(y)
    } else {
        erfc_pos(y) - 1.0
    }
}

fn erfc_pos(y: f64) -> f64 {
    if y <= 4.0 {
        erfc_mid(y)
    } else {
        erfc_far(y)
    }
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let y = x.abs();
    if y <= 0.46875 {
        1.0 - erf_core(x)
    } else if x > 0.0 {
        erfc_pos(y)
    } else {
        2.0 - erfc_pos(y)
    }
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal distribution function.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// Natural log of the standard normal CDF, stable far into the lower tail.
pub fn ln_std_normal_cdf(z: f64) -> f64 {
    if z >= -37.0 {
        // erfc keeps full relative precision here, so the log is accurate.
        let c = erfc(-z * FRAC_1_SQRT_2);
        if c > 0.0 {
            return (0.5 * c).ln();
        }
    }
    // Asymptotic expansion of the Mills ratio for z -> -inf.
    let zi = 1.0 / (z * z);
    let series = 1.0 + zi * (-1.0 + zi * (3.0 + zi * (-15.0 + zi * 105.0)));
    -0.5 * z * z - (-z).ln() - LN_SQRT_2PI + series.ln()
}

/// Hazard ratio phi(t)/Phi(t) of the standard normal.
///
/// Evaluated in log space below t = -6 so strongly truncated components keep
/// a finite, accurate correction term instead of underflowing to 0/0.
pub fn hazard_ratio(t: f64) -> f64 {
    if t >= -6.0 {
        std_normal_pdf(t) / std_normal_cdf(t)
    } else {
        let ln_pdf = -0.5 * t * t - LN_SQRT_2PI;
        (ln_pdf - ln_std_normal_cdf(t)).exp()
    }
}

// Acklam's inverse normal CDF coefficients.
const PPF_A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239e0,
];
const PPF_B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const PPF_C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838e0,
    -2.549_732_539_343_734e0,
    4.374_664_141_464_968e0,
    2.938_163_982_698_783e0,
];
const PPF_D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996e0,
    3.754_408_661_907_416e0,
];

fn quantile_estimate(p: f64) -> f64 {
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((PPF_C[0] * q + PPF_C[1]) * q + PPF_C[2]) * q + PPF_C[3]) * q + PPF_C[4]) * q
            + PPF_C[5])
            / ((((PPF_D[0] * q + PPF_D[1]) * q + PPF_D[2]) * q + PPF_D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((PPF_A[0] * r + PPF_A[1]) * r + PPF_A[2]) * r + PPF_A[3]) * r + PPF_A[4]) * r
            + PPF_A[5])
            * q
            / (((((PPF_B[0] * r + PPF_B[1]) * r + PPF_B[2]) * r + PPF_B[3]) * r + PPF_B[4]) * r
                + 1.0)
    } else {
        -quantile_estimate(1.0 - p)
    }
}

/// Standard normal quantile for p strictly inside (0, 1).
///
/// Refinement always runs in the lower tail, where the CDF keeps full
/// relative precision, so accuracy is limited only by the representation of
/// `p` itself. Callers are responsible for the domain check; see
/// [`crate::dists::std_normal_quantile`] for the fallible wrapper.
pub(crate) fn std_normal_quantile_unchecked(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    if p > 0.5 {
        return -std_normal_quantile_unchecked(1.0 - p);
    }
    let mut x = quantile_estimate(p).min(0.0);
    // Halley steps against the full-precision CDF.
    for _ in 0..2 {
        let err = std_normal_cdf(x) - p;
        let u = err / std_normal_pdf(x);
        if !u.is_finite() {
            break;
        }
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}
