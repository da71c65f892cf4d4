//! Quantile helpers: a full-precision normal quantile and gamma quantiles by
//! bisection on the statrs incomplete gamma.

// The rational-approximation tables are published at full precision.
#![allow(clippy::excessive_precision)]

use statrs::function::erf;
use statrs::function::gamma::gamma_lr;

/// Standard normal CDF. Accuracy is bounded by the underlying erfc
/// implementation (about 1e-11 relative); fine for summaries, not used for
/// quantiles.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile via the AS 241 rational approximations
/// (Wichura's PPND16), accurate to close to machine precision over the whole
/// open unit interval.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "normal_quantile needs p in (0, 1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        const A: [f64; 8] = [
            3.387_132_872_796_366_608,
            1.331_416_678_917_843_774_5e2,
            1.971_590_950_306_551_442_7e3,
            1.373_169_376_550_946_112_5e4,
            4.592_195_393_154_987_145_7e4,
            6.726_577_092_700_870_085_3e4,
            3.343_057_558_358_812_810_5e4,
            2.509_080_928_730_122_672_7e3,
        ];
        const B: [f64; 8] = [
            1.0,
            4.231_333_070_160_091_125_2e1,
            6.871_870_074_920_579_083e2,
            5.394_196_021_424_751_107_7e3,
            2.121_379_430_158_659_586_7e4,
            3.930_789_580_009_271_061e4,
            2.872_908_573_572_194_267_4e4,
            5.226_495_278_852_854_561e3,
        ];
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        const C: [f64; 8] = [
            1.423_437_110_749_683_577_3,
            4.630_337_846_156_545_295_9,
            5.769_497_221_460_691_405_5,
            3.647_848_324_763_204_605,
            1.270_458_252_452_368_382_6,
            2.417_807_251_774_506_117_7e-1,
            2.272_384_498_926_918_458_3e-2,
            7.745_450_142_783_414_076_4e-4,
        ];
        const D: [f64; 8] = [
            1.0,
            2.053_191_626_637_758_821_9,
            1.676_384_830_183_803_849_4,
            6.897_673_349_851_000_045_5e-1,
            1.481_039_764_274_800_745_9e-1,
            1.519_866_656_361_645_719_7e-2,
            5.475_938_084_995_344_946e-4,
            1.050_750_071_644_416_843_2e-9,
        ];
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        const E: [f64; 8] = [
            6.657_904_643_501_103_777_2,
            5.463_784_911_164_114_369_9,
            1.784_826_539_917_291_335_8,
            2.965_605_718_285_048_912_3e-1,
            2.653_218_952_657_612_309_3e-2,
            1.242_660_947_388_078_438_6e-3,
            2.711_555_568_743_487_578_2e-5,
            2.010_334_399_292_288_132_6e-7,
        ];
        const F: [f64; 8] = [
            1.0,
            5.998_322_065_558_879_376_9e-1,
            1.369_298_809_227_358_053_1e-1,
            1.487_536_129_085_061_485_2e-2,
            7.868_691_311_456_132_591e-4,
            1.846_318_317_510_054_681_8e-5,
            1.421_511_758_316_445_888_7e-7,
            2.044_263_103_389_939_785_6e-15,
        ];
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

fn poly(coefficients: &[f64; 8], x: f64) -> f64 {
    coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Quantile of the Gamma(shape, scale = 1) distribution by bisection on the
/// regularized lower incomplete gamma function.
pub fn gamma_quantile(p: f64, shape: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "gamma_quantile needs p in (0, 1)");
    assert!(shape > 0.0, "gamma_quantile needs shape > 0");
    let mut hi = shape.max(1.0);
    while gamma_lr(shape, hi) < p {
        hi *= 2.0;
        if hi > 1e300 {
            return hi;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_lr(shape, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Ratio of inverse-gamma quantiles at (p_hi, p_lo) for shape `a`. The scale
/// cancels, and inverting flips the gamma quantiles, so the ratio equals
/// Q_gamma(p_hi; a) / Q_gamma(p_lo; a).
pub fn inverse_gamma_quantile_ratio(a: f64, p_lo: f64, p_hi: f64) -> f64 {
    gamma_quantile(p_hi, a) / gamma_quantile(p_lo, a)
}
