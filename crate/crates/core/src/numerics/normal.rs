//! Standard-normal distribution function and its inverse.

use libm::erfc;
use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard-normal density.
#[inline]
pub fn normal_pdf(v: f64) -> f64 {
    (-0.5 * v * v).exp() / (2.0 * PI).sqrt()
}

/// Log of the standard-normal density.
#[inline]
pub fn normal_log_pdf(v: f64) -> f64 {
    -0.5 * v * v - LN_SQRT_2PI
}

/// Φ(v) without argument validation. Accurate in both tails because it goes
/// through the complementary error function.
#[inline]
pub(crate) fn phi(v: f64) -> f64 {
    0.5 * erfc(-v / SQRT_2)
}

/// Standard-normal CDF.
pub fn normal_cdf(v: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "normal_cdf: non-finite input {v}"
        )));
    }
    Ok(phi(v))
}

/// log(1 - Φ(v)), stable far into the upper tail.
pub(crate) fn log_upper_tail(v: f64) -> f64 {
    if v < 30.0 {
        (0.5 * erfc(v / SQRT_2)).ln()
    } else {
        // Asymptotic Mills-ratio expansion; erfc underflows beyond ~37.
        let v2 = v * v;
        -0.5 * v2 - v.ln() - LN_SQRT_2PI + (1.0 - 1.0 / v2 + 3.0 / (v2 * v2)).ln()
    }
}

// Acklam's rational approximation, relative error ~1.15e-9, refined below.
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

fn acklam(p: f64) -> f64 {
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Lower-half quantile (p ≤ 0.5) with two Halley steps on Φ.
fn lower_quantile(p: f64) -> f64 {
    let mut x = acklam(p);
    for _ in 0..2 {
        let e = phi(x) - p;
        let u = e / normal_pdf(x);
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

/// Inverse of the standard-normal CDF.
pub fn normal_quantile(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!(
            "normal_quantile: argument {u} outside (0, 1)"
        )));
    }
    if u == 0.5 {
        return Ok(0.0);
    }
    // 1 - u is exact for u in [0.5, 1), so the upper half reuses the lower tail.
    Ok(if u < 0.5 {
        lower_quantile(u)
    } else {
        -lower_quantile(1.0 - u)
    })
}
