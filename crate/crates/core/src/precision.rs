//! Functional emulation of reduced-precision floating-point formats.
//!
//! Values live in `f64`; a [`FloatFormat`] describes a narrower format and
//! [`round_to_format`] snaps a value onto that format's grid with
//! round-to-nearest-even. Subnormals are flushed to zero and overflow maps
//! to signed infinity with a flag, so format effects are reproducible
//! without any 16- or 32-bit storage.
//!
//! The interesting consequence for routers: bfloat16 keeps 7 mantissa bits,
//! so at magnitude 128 its grid step is 1.0 and a logit of 128.5 rounds to
//! 128. Eleven near-tied logits then softmax to exactly 1/11 each, where
//! 32-bit rounding preserves the 0.5 gap.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrecisionError {
    #[error("format must store at least one mantissa bit and one exponent bit, got m={mantissa_bits} e={exponent_bits}")]
    DegenerateFormat { mantissa_bits: u32, exponent_bits: u32 },
    #[error("cannot round a NaN input")]
    NanInput,
}

/// A binary floating-point format: stored mantissa bits (excluding the
/// implicit leading 1) and exponent width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloatFormat {
    pub mantissa_bits: u32,
    pub exponent_bits: u32,
}

impl FloatFormat {
    pub fn new(mantissa_bits: u32, exponent_bits: u32) -> Result<Self, PrecisionError> {
        if mantissa_bits == 0 || exponent_bits < 2 || mantissa_bits > 52 || exponent_bits > 11 {
            return Err(PrecisionError::DegenerateFormat {
                mantissa_bits,
                exponent_bits,
            });
        }
        Ok(Self {
            mantissa_bits,
            exponent_bits,
        })
    }

    /// bfloat16: 7 stored mantissa bits, 8 exponent bits.
    pub fn bfloat16() -> Self {
        Self {
            mantissa_bits: 7,
            exponent_bits: 8,
        }
    }

    /// IEEE binary32: 23 stored mantissa bits, 8 exponent bits.
    pub fn float32() -> Self {
        Self {
            mantissa_bits: 23,
            exponent_bits: 8,
        }
    }

    fn exponent_bias(&self) -> i32 {
        (1 << (self.exponent_bits - 1)) - 1
    }

    /// Largest representable biased-normal exponent (all-ones is reserved).
    pub fn max_exponent(&self) -> i32 {
        self.exponent_bias()
    }

    /// Smallest normal exponent; below this, values flush to zero.
    pub fn min_exponent(&self) -> i32 {
        1 - self.exponent_bias()
    }

    /// Largest finite value: (2 - 2^-m) * 2^max_exponent.
    pub fn max_finite(&self) -> f64 {
        (2.0 - (2.0_f64).powi(-(self.mantissa_bits as i32))) * (2.0_f64).powi(self.max_exponent())
    }

    /// Unit in the last place at magnitude |x|: 2^(floor(log2|x|) - m).
    /// Zero and flushed-subnormal magnitudes report the ulp of the
    /// smallest normal binade.
    pub fn ulp(&self, x: f64) -> f64 {
        let e = if x == 0.0 || !x.is_finite() {
            self.min_exponent()
        } else {
            floor_log2_abs(x).max(self.min_exponent())
        };
        (2.0_f64).powi(e - self.mantissa_bits as i32)
    }
}

/// A value after rounding, plus whether it overflowed to infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rounded {
    pub value: f64,
    pub overflowed: bool,
}

fn floor_log2_abs(x: f64) -> i32 {
    debug_assert!(x != 0.0 && x.is_finite());
    // f64 exponent field; finite nonzero subnormal f64 inputs sit far
    // below any emulated format's flush threshold, so the biased-zero
    // case can report an arbitrarily low exponent.
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        -1075
    } else {
        biased - 1023
    }
}

/// Rounds `x` to the nearest representable value of `fmt`, ties to even.
///
/// Results exceeding the format's largest finite value become signed
/// infinity with `overflowed` set. Values below the smallest normal
/// magnitude flush to zero (no subnormal support). Infinite inputs pass
/// through unflagged; NaN is rejected by the checked wrapper.
pub fn round_to_format(x: f64, fmt: FloatFormat) -> Rounded {
    debug_assert!(!x.is_nan());
    if x == 0.0 || x.is_infinite() {
        return Rounded {
            value: x,
            overflowed: false,
        };
    }
    let sign = if x.is_sign_negative() { -1.0 } else { 1.0 };
    let mag = x.abs();
    let mut exp = floor_log2_abs(mag);
    let m = fmt.mantissa_bits;

    // Scale the magnitude so the integer part holds exactly m+1 bits of
    // significand, then round that integer half-to-even.
    let scaled = mag * (2.0_f64).powi(m as i32 - exp);
    let floor = scaled.floor();
    let frac = scaled - floor;
    let mut sig = floor as u64;
    if frac > 0.5 || (frac == 0.5 && sig & 1 == 1) {
        sig += 1;
    }
    if sig == (1 << (m + 1)) {
        sig >>= 1;
        exp += 1;
    }

    if exp > fmt.max_exponent() {
        return Rounded {
            value: sign * f64::INFINITY,
            overflowed: true,
        };
    }
    if exp < fmt.min_exponent() {
        return Rounded {
            value: 0.0,
            overflowed: false,
        };
    }
    Rounded {
        value: sign * sig as f64 * (2.0_f64).powi(exp - m as i32),
        overflowed: false,
    }
}

/// [`round_to_format`] with a NaN check for untrusted inputs.
pub fn round_checked(x: f64, fmt: FloatFormat) -> Result<Rounded, PrecisionError> {
    if x.is_nan() {
        return Err(PrecisionError::NanInput);
    }
    Ok(round_to_format(x, fmt))
}

/// Softmax with every intermediate value rounded to `fmt`: inputs, the
/// running max, differences, exponentials, the accumulating sum, and each
/// final quotient. Summation is sequential left to right, matching what a
/// narrow accumulator would do.
pub fn softmax_in_format(logits: &[f64], fmt: FloatFormat) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let r: Vec<f64> = logits.iter().map(|&x| round_to_format(x, fmt).value).collect();
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = r
        .iter()
        .map(|&x| {
            let d = round_to_format(x - max, fmt).value;
            round_to_format(d.exp(), fmt).value
        })
        .collect();
    let mut sum = 0.0;
    for &e in &exps {
        sum = round_to_format(sum + e, fmt).value;
    }
    exps.iter()
        .map(|&e| round_to_format(e / sum, fmt).value)
        .collect()
}

/// Summary of router logit magnitudes relevant to format overflow: the
/// largest |logit|, the largest row log-sum-exp, and the mean squared
/// log-sum-exp across rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogitRangeReport {
    pub max_abs_logit: f64,
    pub max_log_sum_exp: f64,
    pub mean_squared_log_sum_exp: f64,
}

/// Computes [`LogitRangeReport`] over rows of router logits.
pub fn logit_range_report(rows: &[Vec<f64>]) -> LogitRangeReport {
    let mut max_abs = 0.0_f64;
    let mut max_lse = f64::NEG_INFINITY;
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for row in rows {
        if row.is_empty() {
            continue;
        }
        for &v in row {
            max_abs = max_abs.max(v.abs());
        }
        let lse = crate::ops::log_sum_exp(row).unwrap_or(f64::NAN);
        max_lse = max_lse.max(lse);
        sum_sq += lse * lse;
        n += 1;
    }
    LogitRangeReport {
        max_abs_logit: max_abs,
        max_log_sum_exp: if n == 0 { 0.0 } else { max_lse },
        mean_squared_log_sum_exp: if n == 0 { 0.0 } else { sum_sq / n as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn float32_rounding_matches_hardware_cast() {
        // The native f32 cast is an independent oracle for the emulated
        // path: normal-range values must agree bit for bit.
        let mut x = -1e30_f64;
        let mut probe = 0u64;
        while x < 1e30 {
            let got = round_to_format(x, FloatFormat::float32()).value;
            let want = (x as f32) as f64;
            assert_eq!(got, want, "x={x}");
            probe += 1;
            x = x * -1.618 + 1.0e-9;
            if probe > 200 {
                break;
            }
        }
        for &x in &[1.0, 1.5, 2.0 / 3.0, 1e-20, 128.5, -128.5, 3.141592653589793] {
            let got = round_to_format(x, FloatFormat::float32()).value;
            assert_eq!(got, (x as f32) as f64, "x={x}");
        }
    }

    #[test]
    fn bfloat16_grid_at_128_has_unit_step() {
        let bf16 = FloatFormat::bfloat16();
        assert_eq!(round_to_format(128.0, bf16).value, 128.0);
        // 128.5 is a tie between 128 and 129; even mantissa wins.
        assert_eq!(round_to_format(128.5, bf16).value, 128.0);
        assert_eq!(round_to_format(128.6, bf16).value, 129.0);
        assert_eq!(round_to_format(129.5, bf16).value, 130.0);
        assert_eq!(bf16.ulp(128.0), 1.0);
    }

    #[test]
    fn rounding_is_idempotent_and_monotone() {
        let bf16 = FloatFormat::bfloat16();
        let mut prev = f64::NEG_INFINITY;
        for i in -300..300 {
            let x = i as f64 * 0.37;
            let once = round_to_format(x, bf16).value;
            let twice = round_to_format(once, bf16).value;
            assert_eq!(once, twice, "idempotence at {x}");
            assert!(once >= prev, "monotone at {x}");
            prev = once;
        }
    }

    #[test]
    fn overflow_flushes_to_signed_infinity_with_flag() {
        let bf16 = FloatFormat::bfloat16();
        assert!((bf16.max_finite() - 3.3895313892515355e38).abs() < 1e24);
        let over = round_to_format(1e39, bf16);
        assert_eq!(over.value, f64::INFINITY);
        assert!(over.overflowed);
        let under = round_to_format(-1e39, bf16);
        assert_eq!(under.value, f64::NEG_INFINITY);
        assert!(under.overflowed);
        // Just below the cap stays finite.
        let edge = round_to_format(3.38e38, bf16);
        assert!(!edge.overflowed && edge.value.is_finite());
    }

    #[test]
    fn subnormals_flush_to_zero() {
        let bf16 = FloatFormat::bfloat16();
        // Smallest bf16 normal is 2^-126.
        let tiny = (2.0_f64).powi(-127);
        assert_eq!(round_to_format(tiny, bf16).value, 0.0);
        let normal = (2.0_f64).powi(-126);
        assert_eq!(round_to_format(normal, bf16).value, normal);
    }

    #[test]
    fn round_checked_rejects_nan() {
        assert_eq!(
            round_checked(f64::NAN, FloatFormat::bfloat16()).unwrap_err(),
            PrecisionError::NanInput
        );
    }

    #[test]
    fn ulp_is_power_of_two_times_binade() {
        let bf16 = FloatFormat::bfloat16();
        assert_eq!(bf16.ulp(1.0), (2.0_f64).powi(-7));
        assert_eq!(bf16.ulp(1.999), (2.0_f64).powi(-7));
        assert_eq!(bf16.ulp(2.0), (2.0_f64).powi(-6));
        let f32f = FloatFormat::float32();
        assert_eq!(f32f.ulp(1.0), (2.0_f64).powi(-23));
        // Worst-case ulp ratio over [1, 2): exactly 2^16.
        assert_eq!(bf16.ulp(1.5) / f32f.ulp(1.5), 65536.0);
    }

    #[test]
    fn near_tied_logits_collapse_under_bfloat16_softmax() {
        // Ten logits at 128 and one at 128.5: in wide precision the odd
        // one out keeps prob exp(0.5)/(exp(0.5)+10) ~ 0.142; under bf16
        // the grid step at 128 is 1.0, so 128.5 rounds to 128 and the
        // distribution collapses to uniform 1/11.
        let mut logits = vec![128.0; 11];
        logits[3] = 128.5;
        let exact = crate::ops::softmax(&logits).unwrap();
        assert!((exact[3] - 0.1416).abs() < 0.002, "exact {}", exact[3]);

        let bf = softmax_in_format(&logits, FloatFormat::bfloat16());
        assert!((bf[3] - 1.0 / 11.0).abs() < 0.002, "bf16 {}", bf[3]);

        let f32p = softmax_in_format(&logits, FloatFormat::float32());
        assert!((f32p[3] - exact[3]).abs() < 1e-3, "f32 {}", f32p[3]);
    }

    #[test]
    fn logit_range_report_flags_growth() {
        let rows = vec![vec![0.0, 0.0], vec![3.0, -1.0]];
        let rep = logit_range_report(&rows);
        assert_eq!(rep.max_abs_logit, 3.0);
        let lse0 = 2.0_f64.ln();
        let lse1 = ((3.0_f64).exp() + (-1.0_f64).exp()).ln();
        assert!((rep.max_log_sum_exp - lse1).abs() < 1e-12);
        assert!((rep.mean_squared_log_sum_exp - (lse0 * lse0 + lse1 * lse1) / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn emulated_float32_agrees_with_cast(x in -1e37..1e37f64) {
            let got = round_to_format(x, FloatFormat::float32()).value;
            prop_assert_eq!(got, (x as f32) as f64);
        }

        #[test]
        fn rounding_error_bounded_by_half_ulp(x in -1e30..1e30f64) {
            prop_assume!(x != 0.0);
            let fmt = FloatFormat::bfloat16();
            let r = round_to_format(x, fmt);
            prop_assume!(!r.overflowed && r.value != 0.0);
            prop_assert!((r.value - x).abs() <= 0.5 * fmt.ulp(x) + 1e-300);
        }

        #[test]
        fn rounded_values_are_fixed_points(x in -1e30..1e30f64) {
            let fmt = FloatFormat::bfloat16();
            let once = round_to_format(x, fmt).value;
            prop_assume!(once.is_finite());
            prop_assert_eq!(round_to_format(once, fmt).value, once);
        }
    }
}
