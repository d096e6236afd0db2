//! Element precisions and scalar conversions.
//!
//! Half is a storage format only: every arithmetic path upcasts to Single
//! (or Double when an operand is Double) and rounds back on store.

use half::f16;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Half,
    Single,
    Double,
}

impl Precision {
    pub const fn bytes(self) -> usize {
        match self {
            Precision::Half => 2,
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub const fn tag(self) -> u8 {
        match self {
            Precision::Half => 0,
            Precision::Single => 1,
            Precision::Double => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Precision::Half),
            1 => Ok(Precision::Single),
            2 => Ok(Precision::Double),
            t => Err(Error::Decode(format!("precision tag {t}"))),
        }
    }

    /// Precision used for arithmetic over operands stored in `self`.
    pub const fn compute(self) -> ComputePrecision {
        match self {
            Precision::Double => ComputePrecision::Double,
            _ => ComputePrecision::Single,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "half" | "f16" => Ok(Precision::Half),
            "single" | "f32" | "float" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }
}

/// Arithmetic precision. Never narrower than Single.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputePrecision {
    Single,
    Double,
}

impl ComputePrecision {
    pub fn of(precisions: &[Precision]) -> Self {
        if precisions.contains(&Precision::Double) {
            ComputePrecision::Double
        } else {
            ComputePrecision::Single
        }
    }

    /// Rounds an exact value to this precision, returned widened.
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            ComputePrecision::Single => v as f32 as f64,
            ComputePrecision::Double => v,
        }
    }
}

/// Round-to-nearest-even narrowing; overflow saturates to infinity.
#[inline]
pub fn f32_to_half_bits(v: f32) -> u16 {
    f16::from_f32(v).to_bits()
}

#[inline]
pub fn half_bits_to_f32(bits: u16) -> f32 {
    f16::from_bits(bits).to_f32()
}

/// Rounds `v` to the nearest value representable in `p`, returned widened.
#[inline]
pub fn quantize(v: f64, p: Precision) -> f64 {
    match p {
        Precision::Half => f16::from_f64(v).to_f64(),
        Precision::Single => v as f32 as f64,
        Precision::Double => v,
    }
}

/// Writes one element at `index` of a packed buffer.
#[inline]
pub fn write_element(buf: &mut [u8], p: Precision, index: usize, v: f64) {
    match p {
        Precision::Half => {
            let b = f16::from_f64(v).to_bits().to_le_bytes();
            buf[index * 2..index * 2 + 2].copy_from_slice(&b);
        }
        Precision::Single => {
            buf[index * 4..index * 4 + 4].copy_from_slice(&(v as f32).to_le_bytes());
        }
        Precision::Double => {
            buf[index * 8..index * 8 + 8].copy_from_slice(&v.to_le_bytes());
        }
    }
}

/// Reads one element; the widening is exact for every precision.
#[inline]
pub fn read_element(buf: &[u8], p: Precision, index: usize) -> f64 {
    match p {
        Precision::Half => {
            let b = [buf[index * 2], buf[index * 2 + 1]];
            f16::from_bits(u16::from_le_bytes(b)).to_f64()
        }
        Precision::Single => {
            let mut b = [0u8; 4];
            b.copy_from_slice(&buf[index * 4..index * 4 + 4]);
            f32::from_le_bytes(b) as f64
        }
        Precision::Double => {
            let mut b = [0u8; 8];
            b.copy_from_slice(&buf[index * 8..index * 8 + 8]);
            f64::from_le_bytes(b)
        }
    }
}

pub fn decode_all(buf: &[u8], p: Precision) -> Vec<f64> {
    (0..buf.len() / p.bytes()).map(|i| read_element(buf, p, i)).collect()
}

pub fn encode_all(values: &[f64], p: Precision) -> Vec<u8> {
    let mut out = vec![0u8; values.len() * p.bytes()];
    for (i, &v) in values.iter().enumerate() {
        write_element(&mut out, p, i, v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_widths() {
        assert_eq!(Precision::Half.bytes(), 2);
        assert_eq!(Precision::Single.bytes(), 4);
        assert_eq!(Precision::Double.bytes(), 8);
    }

    #[test]
    fn tags_round_trip() {
        for p in [Precision::Half, Precision::Single, Precision::Double] {
            assert_eq!(Precision::from_tag(p.tag()).unwrap(), p);
        }
        assert!(Precision::from_tag(3).is_err());
    }

    #[test]
    fn overflow_saturates() {
        assert_eq!(half_bits_to_f32(f32_to_half_bits(65520.0)), f32::INFINITY);
        assert_eq!(half_bits_to_f32(f32_to_half_bits(-65520.0)), f32::NEG_INFINITY);
        assert_eq!(half_bits_to_f32(f32_to_half_bits(65504.0)), 65504.0);
        assert!(half_bits_to_f32(f32_to_half_bits(f32::NAN)).is_nan());
    }

    #[test]
    fn half_single_half_is_idempotent() {
        for bits in 0..=u16::MAX {
            let v = half_bits_to_f32(bits);
            if v.is_nan() {
                continue;
            }
            assert_eq!(f32_to_half_bits(v), bits);
        }
    }

    #[test]
    fn compute_precision_never_below_single() {
        assert_eq!(Precision::Half.compute(), ComputePrecision::Single);
        assert_eq!(ComputePrecision::of(&[Precision::Half, Precision::Double]), ComputePrecision::Double);
    }
}
