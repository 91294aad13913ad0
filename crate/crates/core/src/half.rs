//! Software IEEE binary16 codec.
//!
//! Values are encoded with round-to-nearest-even directly from binary64, so
//! there is no double rounding through binary32.

/// Largest finite binary16 value.
pub const F16_MAX: f64 = 65504.0;
/// Smallest positive subnormal binary16 value (2^-24).
pub const F16_MIN_SUBNORMAL: f64 = 5.960_464_477_539_063e-8;
/// Smallest positive normal binary16 value (2^-14).
pub const F16_MIN_NORMAL: f64 = 6.103_515_625e-5;

const SIGN_MASK: u16 = 0x8000;
const INF_BITS: u16 = 0x7c00;
const NAN_BITS: u16 = 0x7e00;

/// Encodes a binary64 value as binary16 bits, rounding to nearest even.
pub fn f64_to_f16_bits(x: f64) -> u16 {
    let sign = if x.is_sign_negative() { SIGN_MASK } else { 0 };
    if x.is_nan() {
        return sign | NAN_BITS;
    }
    let a = x.abs();
    if a.is_infinite() {
        return sign | INF_BITS;
    }
    if a < F16_MIN_NORMAL {
        // Subnormal grid has spacing 2^-24; scaling by a power of two is exact.
        let q = (a / F16_MIN_SUBNORMAL).round_ties_even();
        // q == 1024 rolls over into the smallest normal, which has the same bits.
        return sign | q as u16;
    }
    let raw = a.to_bits();
    let mut exp = ((raw >> 52) & 0x7ff) as i32 - 1023;
    let frac = f64::from_bits((raw & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    let mut mant = ((frac - 1.0) * 1024.0).round_ties_even() as u32;
    if mant == 1024 {
        mant = 0;
        exp += 1;
    }
    if exp > 15 {
        return sign | INF_BITS;
    }
    sign | (((exp + 15) as u16) << 10) | mant as u16
}

/// Decodes binary16 bits to the exactly equal binary64 value.
pub fn f16_bits_to_f64(bits: u16) -> f64 {
    let sign = if bits & SIGN_MASK != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let mant = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * mant * F16_MIN_SUBNORMAL,
        31 if mant == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        e => sign * (1.0 + mant / 1024.0) * 2f64.powi(e - 15),
    }
}

/// Rounds `x` to the nearest binary16 value and widens it back.
#[inline]
pub fn half_round(x: f64) -> f64 {
    f16_bits_to_f64(f64_to_f16_bits(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_bit_patterns() {
        let cases: &[(f64, u16)] = &[
            (0.0, 0x0000),
            (-0.0, 0x8000),
            (1.0, 0x3c00),
            (-2.0, 0xc000),
            (65504.0, 0x7bff),
            (F16_MIN_NORMAL, 0x0400),
            (F16_MIN_SUBNORMAL, 0x0001),
            (0.333_251_953_125, 0x3555),
            (f64::INFINITY, 0x7c00),
            (f64::NEG_INFINITY, 0xfc00),
        ];
        for &(x, bits) in cases {
            assert_eq!(f64_to_f16_bits(x), bits, "encode {x}");
            if !x.is_nan() {
                assert_eq!(f16_bits_to_f64(bits), x, "decode {bits:#06x}");
            }
        }
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(half_round(1.0), 1.0);
        assert_eq!(half_round(2049.0), 2048.0);
        assert_eq!(half_round(2051.0), 2052.0);
        assert_eq!(half_round(65519.0), 65504.0);
        assert_eq!(half_round(65520.0), f64::INFINITY);
        assert_eq!(half_round(-65520.0), f64::NEG_INFINITY);
        assert!(half_round(f64::NAN).is_nan());
        // ties at the bottom of the subnormal range go to even (zero)
        assert_eq!(half_round(F16_MIN_SUBNORMAL / 2.0), 0.0);
        assert_eq!(half_round(F16_MIN_SUBNORMAL * 1.5), 2.0 * F16_MIN_SUBNORMAL);
    }
}
