use gridmath::precision::{f32_to_half_bits, half_bits_to_f32, quantize, Precision};
use proptest::prelude::*;

/// Binary16 narrowing done by hand on the bit pattern: round to nearest,
/// ties to even, overflow to infinity, NaN kept quiet.
fn oracle_to_half(v: f32) -> u16 {
    let x = v.to_bits();
    let sign = ((x >> 16) & 0x8000) as u16;
    let exp = ((x >> 23) & 0xFF) as i32;
    let man = x & 0x7F_FFFF;
    if exp == 0xFF {
        return sign | 0x7C00 | if man != 0 { 0x200 } else { 0 };
    }
    let e = exp - 127 + 15;
    if e >= 0x1F {
        return sign | 0x7C00;
    }
    let (full, shift) = if e <= 0 {
        // Subnormal half: shift the implicit-one mantissa further right.
        if e < -10 {
            return sign;
        }
        (man | 0x80_0000, (14 - e) as u32)
    } else {
        (man, 13)
    };
    let kept = full >> shift;
    let rem = full & ((1 << shift) - 1);
    let half = 1 << (shift - 1);
    let round = rem > half || (rem == half && kept & 1 == 1);
    let base = if e <= 0 { kept } else { ((e as u32) << 10) | kept };
    sign | (base + round as u32) as u16
}

fn oracle_to_f32(h: u16) -> f32 {
    let sign = if h & 0x8000 != 0 { -1.0f64 } else { 1.0 };
    let exp = ((h >> 10) & 0x1F) as i32;
    let man = (h & 0x3FF) as f64;
    let v = match exp {
        0 => man * 2f64.powi(-24),
        0x1F if man == 0.0 => f64::INFINITY,
        0x1F => f64::NAN,
        _ => (1.0 + man / 1024.0) * 2f64.powi(exp - 15),
    };
    (sign * v) as f32
}

#[test]
fn every_half_widens_exactly() {
    for h in 0..=u16::MAX {
        let (got, want) = (half_bits_to_f32(h), oracle_to_f32(h));
        if want.is_nan() {
            assert!(got.is_nan());
        } else {
            assert_eq!(got.to_bits(), want.to_bits(), "{h:#06x}");
        }
    }
}

#[test]
fn boundary_values() {
    for v in [65504.0f32, 65519.99, 65520.0, 6.1035156e-5, 5.9604645e-8, 2.9802322e-8, 2.9802326e-8, -0.0, 1.0009766, 1.000_488_3] {
        assert_eq!(f32_to_half_bits(v), oracle_to_half(v), "{v}");
    }
}

proptest! {
    #[test]
    fn narrowing_matches_bit_oracle(bits in any::<u32>()) {
        let v = f32::from_bits(bits);
        prop_assume!(!v.is_nan());
        prop_assert_eq!(f32_to_half_bits(v), oracle_to_half(v));
    }

    #[test]
    fn quantize_is_idempotent(v in -1e6f64..1e6) {
        for p in [Precision::Half, Precision::Single, Precision::Double] {
            let q = quantize(v, p);
            prop_assert_eq!(quantize(q, p).to_bits(), q.to_bits());
        }
    }
}
