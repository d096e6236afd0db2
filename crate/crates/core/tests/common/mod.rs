#![allow(dead_code)]

use gridmath::layout::{Layout, TileExtent, WorkerId};
use gridmath::session::Session;
use gridmath::transport::{Backend, Fabric};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn session(p: usize) -> Session {
    Session::new(Fabric::new(p, Backend::InProcess).unwrap()).unwrap()
}

pub fn ids(p: usize) -> Vec<WorkerId> {
    (0..p as u32).map(WorkerId).collect()
}

/// A spread of layouts for a rows x cols matrix over p workers.
pub fn layouts(rows: usize, cols: usize, p: usize) -> Vec<Layout> {
    let w = ids(p);
    let mut v = vec![
        Layout::single(rows, cols, WorkerId(0)),
        Layout::single(rows, cols, WorkerId(p as u32 - 1)),
        Layout::row_block(rows, cols, &w).unwrap(),
        Layout::col_block(rows, cols, &w).unwrap(),
    ];
    if p >= 4 && rows >= 2 && cols >= 2 {
        v.push(Layout::grid(rows, cols, 2, p / 2, &w).unwrap());
    }
    if rows >= 3 && cols >= 2 {
        // Irregular: three uneven tiles, owners reversed.
        let r1 = rows / 3;
        let c1 = cols / 2;
        v.push(Layout {
            tiles: vec![
                (TileExtent::new(0, r1.max(1), 0, cols), WorkerId(p as u32 - 1)),
                (TileExtent::new(r1.max(1), rows - r1.max(1), 0, c1.max(1)), WorkerId(0)),
                (TileExtent::new(r1.max(1), rows - r1.max(1), c1.max(1), cols - c1.max(1)), WorkerId((p / 2) as u32)),
            ],
        });
    }
    v
}

pub fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect()
}

/// Serial gemm in f64: alpha*op(A)*op(B) + beta*C.
#[allow(clippy::too_many_arguments)]
pub fn gemm_oracle(
    a: &[f64],
    ar: usize,
    ac: usize,
    b: &[f64],
    br: usize,
    bc: usize,
    c: &[f64],
    alpha: f64,
    beta: f64,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let at = |i: usize, p: usize| if ta { a[p * ac + i] } else { a[i * ac + p] };
    let bt = |p: usize, j: usize| if tb { b[j * bc + p] } else { b[p * bc + j] };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += at(i, p) * bt(p, j);
            }
            out[i * n + j] = alpha * s + if beta == 0.0 { 0.0 } else { beta * c[i * n + j] };
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
