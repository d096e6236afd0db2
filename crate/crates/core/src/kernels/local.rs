//! Worker-local dense arithmetic on assembled operands.
//!
//! Values travel as exact f64 widenings of their stored precision; arithmetic
//! runs in `T` (f32 or f64) with a fixed summation order.

use std::ops::{Add, Div, Mul, Sub};

use crate::layout::TileExtent;
use crate::ops::EwOp;

use super::plan::IndexMap;

pub trait Real: Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> {
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub fn to_real<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

/// Dense operands for one worker's share of a gemm: rows of op(A) and
/// columns of op(B) (stored transposed), both `k` long.
pub struct GemmOperands<T> {
    pub a: Vec<T>,
    pub a_rows: IndexMap,
    pub bt: Vec<T>,
    pub b_cols: IndexMap,
    pub k: usize,
}

impl<T: Real> GemmOperands<T> {
    /// C tile update `c <- alpha * A*B + beta * c`. `panel_order` selects
    /// arrival-order accumulation over k-panels of `panel_width`; `None`
    /// sums every element in ascending k.
    pub fn tile(&self, tile: &TileExtent, c: &mut [f64], alpha: f64, beta: f64, panel_order: Option<(&[usize], usize)>) {
        let (alpha_t, beta_t) = (T::from_f64(alpha), T::from_f64(beta));
        let k = self.k;
        for i in tile.row_start..tile.row_end() {
            let li = self.a_rows.local(i).expect("row assembled");
            let arow = &self.a[li * k..(li + 1) * k];
            for j in tile.col_start..tile.col_end() {
                let idx = tile.local_index(i, j);
                if alpha == 0.0 {
                    c[idx] = if beta == 0.0 { 0.0 } else { (beta_t * T::from_f64(c[idx])).to_f64() };
                    continue;
                }
                let lj = self.b_cols.local(j).expect("column assembled");
                let bcol = &self.bt[lj * k..(lj + 1) * k];
                let acc = match panel_order {
                    None => dot(arow, bcol),
                    Some((order, width)) => {
                        let mut acc: Option<T> = None;
                        for &p in order {
                            let (s, e) = (p * width, ((p + 1) * width).min(k));
                            let part = dot(&arow[s..e], &bcol[s..e]);
                            acc = Some(match acc {
                                None => part,
                                Some(a) => a + part,
                            });
                        }
                        acc.unwrap_or(T::ZERO)
                    }
                };
                let v = if beta == 0.0 { alpha_t * acc } else { alpha_t * acc + beta_t * T::from_f64(c[idx]) };
                c[idx] = v.to_f64();
            }
        }
    }
}

/// Applies `op` in place on `dst`; `src` is element-aligned with `dst`.
pub fn elementwise<T: Real>(op: EwOp, dst: &mut [f64], src: Option<&[f64]>, scalar: f64) {
    let s = T::from_f64(scalar);
    let zero = T::ZERO;
    match op {
        EwOp::MulScalar => dst.iter_mut().for_each(|d| *d = (T::from_f64(*d) * s).to_f64()),
        EwOp::Relu => dst.iter_mut().for_each(|d| {
            let x = T::from_f64(*d);
            *d = if x > zero { x.to_f64() } else { 0.0 }
        }),
        EwOp::Set => dst.iter_mut().for_each(|d| *d = s.to_f64()),
        EwOp::Add | EwOp::Sub | EwOp::ReluGrad | EwOp::Axpy => {
            let src = src.expect("binary op needs a source");
            for (d, &x) in dst.iter_mut().zip(src) {
                let (dv, xv) = (T::from_f64(*d), T::from_f64(x));
                *d = match op {
                    EwOp::Add => dv + xv,
                    EwOp::Sub => dv - xv,
                    EwOp::ReluGrad => {
                        if xv > zero {
                            dv
                        } else {
                            zero
                        }
                    }
                    _ => s * xv + dv,
                }
                .to_f64();
            }
        }
    }
}

/// Numerically stable softmax over one row, max and sum in ascending order.
pub fn softmax_row<T: Real>(row: &mut [f64]) {
    let vals: Vec<T> = to_real(row);
    let Some(&first) = vals.first() else { return };
    let max = vals.iter().skip(1).fold(first, |m, &x| if x > m { x } else { m });
    let exps: Vec<T> = vals.iter().map(|&x| (x - max).exp()).collect();
    let mut sum = T::ZERO;
    for &e in &exps {
        sum = sum + e;
    }
    for (r, e) in row.iter_mut().zip(exps) {
        *r = (e / sum).to_f64();
    }
}

pub fn sum_ascending<T: Real>(values: impl IntoIterator<Item = f64>) -> T {
    let mut acc = T::ZERO;
    for v in values {
        acc = acc + T::from_f64(v);
    }
    acc
}

/// `acc + alpha * sum` in `T`.
#[inline]
pub fn accumulate<T: Real>(acc: f64, alpha: f64, sum: T) -> f64 {
    (T::from_f64(acc) + T::from_f64(alpha) * sum).to_f64()
}

pub const fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based uniform value for flat element `index`; independent of
/// which worker computes it.
pub fn fill_value(seed: u64, index: u64, lo: f64, hi: f64) -> f64 {
    let u = (splitmix64(seed ^ splitmix64(index)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    lo + (hi - lo) * u
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_axpy() {
        let mut v = vec![-1.0, 0.0, 2.0];
        elementwise::<f32>(EwOp::Relu, &mut v, None, 0.0);
        assert_eq!(v, vec![0.0, 0.0, 2.0]);
        let mut y = vec![1.0; 4];
        elementwise::<f32>(EwOp::Axpy, &mut y, Some(&[1.0; 4]), 2.0);
        assert_eq!(y, vec![3.0; 4]);
        let mut g = vec![5.0, 6.0];
        elementwise::<f32>(EwOp::ReluGrad, &mut g, Some(&[-1.0, 1.0]), 0.0);
        assert_eq!(g, vec![0.0, 6.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut r = vec![0.0, 0.0];
        softmax_row::<f32>(&mut r);
        assert_eq!(r, vec![0.5, 0.5]);
        let mut r = vec![1000.0, 0.0];
        softmax_row::<f32>(&mut r);
        assert_eq!(r[0], 1.0);
        assert!(r[1] >= 0.0 && r[1] < 1e-30);
    }

    #[test]
    fn fill_values_in_range() {
        for i in 0..1000 {
            let v = fill_value(42, i, -0.5, 0.5);
            assert!((-0.5..0.5).contains(&v));
        }
        assert_ne!(fill_value(1, 0, 0.0, 1.0), fill_value(2, 0, 0.0, 1.0));
    }
}
