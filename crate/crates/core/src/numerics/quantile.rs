use crate::error::{IvError, Result};

/// Two-sided standard-normal quantile `r` with `P[|V| ≥ r] = delta`,
/// i.e. `Φ⁻¹(1 − delta/2)`.
///
/// Evaluated as `−Φ⁻¹(delta/2)` so that `delta → 1` keeps full relative
/// precision near zero.
pub fn normal_quantile(delta: f64) -> Result<f64> {
    if !(delta.is_finite() && delta > 0.0 && delta < 1.0) {
        return Err(IvError::Domain(format!(
            "normal_quantile requires delta in (0,1), got {delta}"
        )));
    }
    Ok(-standard_normal_ppf(0.5 * delta))
}

/// Inverse standard-normal CDF (Wichura's AS241, PPND16), about 1e-16
/// relative accuracy over the open unit interval.
///
/// Returns ±∞ at the endpoints and NaN outside `[0, 1]`.
// Published coefficients are kept digit for digit.
#[allow(clippy::excessive_precision, clippy::inconsistent_digit_grouping)]
pub fn standard_normal_ppf(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((r * 2509.080_928_730_122_7 + 33430.575_583_588_128) * r
            + 67265.770_927_008_7)
            * r
            + 45921.953_931_549_87)
            * r
            + 13731.693_765_509_461)
            * r
            + 1971.590_950_306_551_4)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_6;
        let den = ((((((r * 5226.495_278_852_546 + 28729.085_735_721_943) * r
            + 39307.895_800_092_71)
            * r
            + 21213.794_301_586_596)
            * r
            + 5394.196_021_424_751)
            * r
            + 687.187_007_492_057_9)
            * r
            + 42.313_330_701_600_91)
            * r
            + 1.0;
        return q * num / den;
    }

    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((r * 7.745_450_142_783_414e-4 + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((r * 1.050_750_071_644_416_8e-9 + 5.475_938_084_995_345e-4) * r
            + 0.015_198_666_563_616_457)
            * r
            + 0.148_103_976_427_480_08)
            * r
            + 0.689_767_334_985_1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((r * 2.010_334_399_292_288_1e-7 + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((r * 2.044_263_103_389_939_7e-15 + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 0.014_875_361_290_850_615)
            * r
            + 0.136_929_880_922_735_8)
            * r
            + 0.599_832_206_555_888)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_percent_two_sided() {
        let r = normal_quantile(0.05).unwrap();
        assert!((r - 1.959_963_984_540_054).abs() < 1e-12, "{r}");
    }

    #[test]
    fn ninety_five_percent_two_sided() {
        // Φ⁻¹(0.525)
        let r = normal_quantile(0.95).unwrap();
        assert!((r - 0.062_706_777_943_213_85).abs() < 1e-12, "{r}");
        assert_eq!(format!("{r:.4}"), "0.0627");
    }

    #[test]
    fn limit_toward_one() {
        let r = normal_quantile(1.0 - 1e-12).unwrap();
        assert!(r > 0.0 && r < 1e-11, "{r}");
    }

    #[test]
    fn rejects_out_of_domain() {
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN, f64::INFINITY] {
            assert!(matches!(normal_quantile(bad), Err(IvError::Domain(_))));
        }
    }

    #[test]
    fn ppf_is_antisymmetric_and_hits_tails() {
        for p in [1e-5, 0.01, 0.2, 0.4] {
            let lo = standard_normal_ppf(p);
            let hi = standard_normal_ppf(1.0 - p);
            assert!((lo + hi).abs() < 1e-9, "{p}: {lo} vs {hi}");
        }
        let deep = standard_normal_ppf(1e-300);
        assert!(deep.is_finite() && deep < -37.0);
        assert_eq!(standard_normal_ppf(0.5), 0.0);
        assert!(standard_normal_ppf(0.0).is_infinite());
        assert!(standard_normal_ppf(1.1).is_nan());
    }
}
