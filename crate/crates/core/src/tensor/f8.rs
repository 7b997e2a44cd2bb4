//! Software e4m3 codec: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits.
//!
//! The format has no infinities; the all-ones exponent with all-ones mantissa
//! is NaN, which leaves 448 as the largest finite magnitude. Encoding uses
//! round-to-nearest-even and saturates out-of-range magnitudes to the maximum
//! finite value, matching the usual training-time quantization behavior.

/// Largest finite e4m3 magnitude: (1 + 6/8) * 2^8.
pub const E4M3_MAX: f64 = 448.0;

/// Smallest positive normal value: 2^-6.
pub const E4M3_MIN_NORMAL: f64 = 0.015625;

const NAN_BITS: u8 = 0x7f;

/// Encode an `f64` to the nearest e4m3 value (ties to even, saturating).
pub fn encode(v: f64) -> u8 {
    if v.is_nan() {
        return NAN_BITS;
    }
    let sign: u8 = if v.is_sign_negative() { 0x80 } else { 0 };
    let a = v.abs();
    if a == 0.0 {
        return sign;
    }
    // Subnormal grid: multiples of 2^-9 below 2^-6.
    if a < E4M3_MIN_NORMAL {
        let q = (a * 512.0).round_ties_even() as u8; // a / 2^-9
        if q == 0 {
            return sign;
        }
        if q < 8 {
            return sign | q;
        }
        // Rounded up into the first normal value.
        return sign | 0x08;
    }
    if a >= E4M3_MAX {
        return sign | 0x7e;
    }
    // Normal: a = (1 + m/8) * 2^(e), exponent field E = e + 7 in 1..=15.
    let mut e = a.log2().floor() as i32;
    // log2 can land one off at powers of two; fix up by direct comparison.
    if a < (e as f64).exp2() {
        e -= 1;
    } else if a >= ((e + 1) as f64).exp2() {
        e += 1;
    }
    let mut scaled = (a / ((e - 3) as f64).exp2()).round_ties_even(); // in [8, 16]
    if scaled >= 16.0 {
        e += 1;
        scaled = 8.0;
    }
    if e > 8 || (e == 8 && scaled as u8 - 8 == 7) {
        // Overflow past 448 (the e=8, m=7 slot is NaN): saturate.
        return sign | 0x7e;
    }
    let exp_field = (e + 7) as u8;
    let mant = scaled as u8 - 8;
    sign | (exp_field << 3) | mant
}

/// Decode an e4m3 bit pattern.
pub fn decode(bits: u8) -> f64 {
    let sign = if bits & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp_field = (bits >> 3) & 0x0f;
    let mant = (bits & 0x07) as f64;
    if exp_field == 0x0f && bits & 0x07 == 0x07 {
        return f64::NAN;
    }
    let magnitude = if exp_field == 0 {
        mant * (-9.0f64).exp2()
    } else {
        (1.0 + mant / 8.0) * ((exp_field as i32 - 7) as f64).exp2()
    };
    sign * magnitude
}
