//! Fixed-point scaling and the symmetric r-bit quantizer.
//!
//! The quantizer maps `[-cB, cB]` onto the symmetric level set
//! `[-(2^{r-1}-1), 2^{r-1}-1]`, so values of opposite sign cancel under plain
//! integer addition and a sum can be carried mod `2^r`.
//!
//! Range scaling by `c` alone does not rule out overflow: with nearest
//! rounding, `c` values at `+B` each land on `round(N/c)` and their sum can
//! exceed `N = 2^{r-1}-1` (at r = 8, c = 2 two values at `+B` sum to 128).
//! [`quantize_contribution`] therefore also caps each client's level at
//! `floor(N/c)`, which makes the sum of any `c` contributions fit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SCALE: f64 = 1e7;
pub const DEFAULT_CLIP_BOUND: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("quantizer width must be 8 or 16 bits, got {0}")]
    Bits(u8),
    #[error("clip bound must be finite and positive, got {0}")]
    ClipBound(f64),
    #[error("aggregation count must be at least 1")]
    ZeroCount,
    #[error("scaling factor must be finite and positive, got {0}")]
    Scale(f64),
    #[error("{value} lies outside the quantizer range [-{limit}, {limit}]")]
    Range { value: f64, limit: f64 },
    #[error("{value} * {scale} does not fit the 32-bit message space")]
    ScaleOverflow { value: f64, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    bits: u8,
    clip_bound: f64,
    count: u32,
    scale: f64,
}

impl QuantConfig {
    pub fn new(bits: u8, clip_bound: f64, count: u32) -> Result<Self, QuantError> {
        Self::with_scale(bits, clip_bound, count, DEFAULT_SCALE)
    }

    pub fn with_scale(
        bits: u8,
        clip_bound: f64,
        count: u32,
        scale: f64,
    ) -> Result<Self, QuantError> {
        if bits != 8 && bits != 16 {
            return Err(QuantError::Bits(bits));
        }
        if !(clip_bound.is_finite() && clip_bound > 0.0) {
            return Err(QuantError::ClipBound(clip_bound));
        }
        if count == 0 {
            return Err(QuantError::ZeroCount);
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QuantError::Scale(scale));
        }
        Ok(Self {
            bits,
            clip_bound,
            count,
            scale,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip_bound
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Same config with a different aggregation count.
    pub fn for_count(&self, count: u32) -> Result<Self, QuantError> {
        Self::with_scale(self.bits, self.clip_bound, count, self.scale)
    }

    /// `N = 2^{r-1} - 1`, the largest level magnitude.
    pub fn max_level(&self) -> i64 {
        max_level(self.bits)
    }

    /// `cB`, the quantizer's input range.
    pub fn range(&self) -> f64 {
        f64::from(self.count) * self.clip_bound
    }

    /// Width of one quantization level, `cB / N`.
    pub fn step(&self) -> f64 {
        self.range() / self.max_level() as f64
    }

    pub fn half_step(&self) -> f64 {
        self.step() / 2.0
    }

    /// `floor(N / c)`: the largest level a single contribution may take so
    /// that `c` of them never exceed `N`.
    pub fn contribution_cap(&self) -> i64 {
        self.max_level() / i64::from(self.count)
    }
}

pub fn max_level(bits: u8) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// `floor(v * L)`.
pub fn scale_to_int(v: f64, scale: f64) -> Result<i64, QuantError> {
    let scaled = (v * scale).floor();
    if !scaled.is_finite() || scaled.abs() >= 2f64.powi(31) {
        return Err(QuantError::ScaleOverflow { value: v, scale });
    }
    Ok(scaled as i64)
}

pub fn descale(v: i64, scale: f64) -> f64 {
    v as f64 / scale
}

pub fn clip(v: f64, bound: f64) -> f64 {
    v.clamp(-bound, bound)
}

/// `sgn(v) * round(|v| * N / (cB))` with ties rounded away from zero and
/// `sgn(0) = +1`.
pub fn quantize(v: f64, cfg: &QuantConfig) -> Result<i64, QuantError> {
    let limit = cfg.range();
    if !v.is_finite() || v.abs() > limit {
        return Err(QuantError::Range { value: v, limit });
    }
    let level = (v.abs() * cfg.max_level() as f64 / limit).round() as i64;
    Ok(if v < 0.0 { -level } else { level })
}

/// `sgn(u) * |u| * cB / N`.
pub fn dequantize(u: i64, cfg: &QuantConfig) -> f64 {
    let magnitude = u.unsigned_abs() as f64 * cfg.range() / cfg.max_level() as f64;
    if u < 0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Quantizes one client coordinate for aggregation: clips to `[-B, B]`,
/// applies [`quantize`], then caps the level magnitude at
/// [`QuantConfig::contribution_cap`].
pub fn quantize_contribution(v: f64, cfg: &QuantConfig) -> Result<i64, QuantError> {
    if v.is_nan() {
        return Err(QuantError::Range {
            value: v,
            limit: cfg.range(),
        });
    }
    let q = quantize(clip(v, cfg.clip_bound), cfg)?;
    let cap = cfg.contribution_cap();
    Ok(q.clamp(-cap, cap))
}

/// Two's-complement style embedding of a signed level into `[0, 2^r)`.
pub fn wrap(q: i64, bits: u8) -> u64 {
    (q as u64) & ((1u64 << bits) - 1)
}

/// `a` if `a <= 2^{r-1} - 1`, else `a - 2^r`.
pub fn recover_sign(a: u64, bits: u8) -> i64 {
    let a = a & ((1u64 << bits) - 1);
    if a as i64 <= max_level(bits) {
        a as i64
    } else {
        a as i64 - (1i64 << bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg8() -> QuantConfig {
        QuantConfig::new(8, 0.5, 1).unwrap()
    }

    #[test]
    fn scale_examples() {
        assert_eq!(scale_to_int(-0.5, 1e7).unwrap(), -5_000_000);
        assert_eq!(scale_to_int(0.0, 1e7).unwrap(), 0);
        assert_eq!(scale_to_int(0.0, 3.0).unwrap(), 0);
        let v = 0.1234567;
        let s = scale_to_int(v, 1e7).unwrap();
        assert_eq!(s, 1_234_567);
        assert!((descale(s, 1e7) - v).abs() < 1e-7);
        assert_eq!(scale_to_int(-0.00000001, 1e7).unwrap(), -1);
        assert!(scale_to_int(300.0, 1e7).is_err());
        assert!(scale_to_int(f64::NAN, 1e7).is_err());
    }

    #[test]
    fn clip_examples() {
        let b = 0.5;
        assert_eq!(clip(2.0 * b, b), b);
        assert_eq!(clip(-2.0 * b, b), -b);
        assert_eq!(clip(0.3, b), 0.3);
    }

    #[test]
    fn quantize_examples() {
        let c = cfg8();
        assert_eq!(quantize(0.5, &c).unwrap(), 127);
        assert_eq!(quantize(-0.5, &c).unwrap(), -127);
        // 0.2 * 127 / 0.5 = 50.8
        assert_eq!(quantize(0.2, &c).unwrap(), 51);
        assert_eq!(quantize(0.0, &c).unwrap(), 0);
        assert!(matches!(quantize(0.51, &c), Err(QuantError::Range { .. })));
        // Range widens with c.
        let c4 = QuantConfig::new(8, 0.5, 4).unwrap();
        assert_eq!(quantize(2.0, &c4).unwrap(), 127);
        assert_eq!(quantize(0.5, &c4).unwrap(), 32);
    }

    #[test]
    fn ties_round_away_from_zero() {
        // r = 8, cB = 127 makes the level equal to v; 2.5 is an exact tie.
        let c = QuantConfig::new(8, 127.0, 1).unwrap();
        assert_eq!(quantize(2.5, &c).unwrap(), 3);
        assert_eq!(quantize(-2.5, &c).unwrap(), -3);
    }

    #[test]
    fn dequantize_examples() {
        let c = cfg8();
        assert_eq!(dequantize(127, &c), 0.5);
        assert_eq!(dequantize(0, &c), 0.0);
        assert_eq!(dequantize(-127, &c), -0.5);
    }

    #[test]
    fn sign_recovery_examples() {
        assert_eq!(recover_sign(200, 8), -56);
        assert_eq!(recover_sign(127, 8), 127);
        assert_eq!(recover_sign(128, 8), -128);
        assert_eq!(recover_sign(0, 16), 0);
        assert_eq!(recover_sign(65535, 16), -1);
    }

    #[test]
    fn every_level_survives_wrap_and_sign_recovery() {
        let c = cfg8();
        for level in -127i64..=127 {
            let v = dequantize(level, &c);
            let q = quantize(v, &c).unwrap();
            assert_eq!(q, level);
            assert_eq!(recover_sign(wrap(q, 8), 8), q);
        }
    }

    #[test]
    fn plain_range_scaling_can_overflow() {
        // The counterexample that motivates the contribution cap.
        let c2 = QuantConfig::new(8, 0.5, 2).unwrap();
        let q = quantize(0.5, &c2).unwrap();
        assert_eq!(q, 64);
        assert_eq!(recover_sign(wrap(2 * q, 8), 8), -128);
        let capped = quantize_contribution(0.5, &c2).unwrap();
        assert_eq!(capped, 63);
        assert_eq!(recover_sign(wrap(2 * capped, 8), 8), 126);
    }

    #[test]
    fn contribution_cap_only_bites_near_the_bound() {
        let c = QuantConfig::new(16, 0.5, 10).unwrap();
        assert_eq!(c.contribution_cap(), 3276);
        for i in 0..=1000 {
            let v = -0.5 + i as f64 / 1000.0;
            let raw = quantize(v, &c).unwrap();
            let capped = quantize_contribution(v, &c).unwrap();
            if raw.abs() <= 3276 {
                assert_eq!(raw, capped);
            } else {
                assert_eq!(capped.abs(), 3276);
                assert!(v.abs() > 0.4999);
            }
        }
        assert_eq!(quantize_contribution(7.0, &c).unwrap(), 3276);
        assert!(quantize_contribution(f64::NAN, &c).is_err());
    }

    #[test]
    fn config_validation() {
        assert_eq!(QuantConfig::new(4, 0.5, 1), Err(QuantError::Bits(4)));
        assert_eq!(QuantConfig::new(8, 0.0, 1), Err(QuantError::ClipBound(0.0)));
        assert_eq!(QuantConfig::new(8, 0.5, 0), Err(QuantError::ZeroCount));
        assert!(QuantConfig::with_scale(8, 0.5, 1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn symmetric(v in -0.5f64..0.5, bits in prop_oneof![Just(8u8), Just(16u8)], c in 1u32..17) {
            let cfg = QuantConfig::new(bits, 0.5, c).unwrap();
            prop_assume!(v != 0.0);
            prop_assert_eq!(quantize(-v, &cfg).unwrap(), -quantize(v, &cfg).unwrap());
        }

        #[test]
        fn monotone(a in -0.5f64..0.5, b in -0.5f64..0.5, c in 1u32..17) {
            let cfg = QuantConfig::new(16, 0.5, c).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo, &cfg).unwrap() <= quantize(hi, &cfg).unwrap());
            prop_assert!(quantize_contribution(lo, &cfg).unwrap() <= quantize_contribution(hi, &cfg).unwrap());
        }

        #[test]
        fn round_trip_within_half_step(v in -0.5f64..=0.5, bits in prop_oneof![Just(8u8), Just(16u8)], c in 1u32..17) {
            let cfg = QuantConfig::new(bits, 0.5, c).unwrap();
            let err = (dequantize(quantize(v, &cfg).unwrap(), &cfg) - v).abs();
            prop_assert!(err <= cfg.half_step() * (1.0 + 1e-12), "err {} > {}", err, cfg.half_step());
        }

        #[test]
        fn capped_contributions_never_overflow(
            vs in proptest::collection::vec(-1.0f64..1.0, 1..17),
            bits in prop_oneof![Just(8u8), Just(16u8)],
        ) {
            let cfg = QuantConfig::new(bits, 0.5, vs.len() as u32).unwrap();
            let sum: i64 = vs.iter().map(|&v| quantize_contribution(v, &cfg).unwrap()).sum();
            prop_assert!(sum.abs() <= cfg.max_level());
            let wrapped = vs
                .iter()
                .map(|&v| wrap(quantize_contribution(v, &cfg).unwrap(), bits))
                .fold(0u64, |acc, x| (acc + x) & ((1 << bits) - 1));
            prop_assert_eq!(recover_sign(wrapped, bits), sum);
        }
    }
}
