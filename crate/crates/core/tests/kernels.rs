mod common;

use common::*;
use gridmath::layout::{Layout, WorkerId};
use gridmath::precision::Precision;

#[test]
fn set_get_round_trip_every_layout() {
    for p in [1, 2, 4] {
        let mut s = session(p);
        for l in layouts(7, 5, p) {
            let m = s.create_matrix(7, 5, Precision::Single, l).unwrap();
            let v = random(35, 3);
            s.set_data(m, &v).unwrap();
            assert_eq!(bits(&s.get_data(m).unwrap()), bits(&v));
            s.destroy(m).unwrap();
        }
        assert!(s.check_metadata_consistency().unwrap());
    }
}

#[test]
fn gemm_matches_oracle_across_layouts() {
    let (m, k, n) = (13, 9, 11);
    let a = random(m * k, 1);
    let b = random(k * n, 2);
    let c0 = random(m * n, 4);
    let want = gemm_oracle(&a, m, k, &b, k, n, &c0, 1.5, 0.5, false, false);
    let mut reference: Option<Vec<u64>> = None;
    for p in [1, 2, 4] {
        let mut s = session(p);
        for (la, lc) in layouts(m, k, p).into_iter().zip(layouts(m, n, p).into_iter().rev()) {
            let lb = Layout::row_block(k, n, &ids(p)).unwrap();
            let ma = s.create_matrix(m, k, Precision::Single, la).unwrap();
            let mb = s.create_matrix(k, n, Precision::Single, lb).unwrap();
            let mc = s.create_matrix(m, n, Precision::Single, lc).unwrap();
            s.set_data(ma, &a).unwrap();
            s.set_data(mb, &b).unwrap();
            s.set_data(mc, &c0).unwrap();
            s.gemm(ma, mb, mc, 1.5, 0.5, false, false).unwrap();
            let got = s.get_data(mc).unwrap();
            assert!(max_abs_diff(&got, &want) < 1e-5, "p={p}");
            match &reference {
                None => reference = Some(bits(&got)),
                Some(r) => assert_eq!(r, &bits(&got), "p={p}"),
            }
            for x in [ma, mb, mc] {
                s.destroy(x).unwrap();
            }
        }
        assert!(s.check_metadata_consistency().unwrap());
    }
}

#[test]
fn gemm_transposes() {
    let (m, k, n) = (6, 5, 4);
    let a = random(k * m, 7);
    let b = random(n * k, 8);
    let want = gemm_oracle(&a, k, m, &b, n, k, &[], 1.0, 0.0, true, true);
    let mut s = session(3);
    let w = ids(3);
    let ma = s.create_matrix(k, m, Precision::Single, Layout::col_block(k, m, &w).unwrap()).unwrap();
    let mb = s.create_matrix(n, k, Precision::Double, Layout::single(n, k, WorkerId(2))).unwrap();
    let mc = s.create_matrix(m, n, Precision::Single, Layout::row_block(m, n, &w).unwrap()).unwrap();
    s.set_data(ma, &a).unwrap();
    s.set_data(mb, &b).unwrap();
    s.gemm(ma, mb, mc, 1.0, 0.0, true, true).unwrap();
    assert!(max_abs_diff(&s.get_data(mc).unwrap(), &want) < 1e-5);
}

fn conv_oracle(x: &[f64], f: &[f64], g: &gridmath::ops::ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.n * g.k * oh * ow];
    for n in 0..g.n {
        for k in 0..g.k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.c {
                        for r in 0..g.r {
                            for q in 0..g.s {
                                let iy = (oy * g.stride + r) as isize - g.pad as isize;
                                let ix = (ox * g.stride + q) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
                                    continue;
                                }
                                let xv = x[n * g.c * g.h * g.w + c * g.h * g.w + iy as usize * g.w + ix as usize];
                                acc += xv * f[k * g.c * g.r * g.s + c * g.r * g.s + r * g.s + q];
                            }
                        }
                    }
                    out[n * g.k * oh * ow + k * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    use gridmath::ops::ConvGeometry;
    let g = ConvGeometry { n: 2, c: 3, h: 8, w: 8, k: 4, r: 3, s: 3, stride: 1, pad: 1 };
    let x = random(g.n * g.c * g.h * g.w, 11);
    let f = random(g.k * g.patch_len(), 12);
    let want = conv_oracle(&x, &f, &g);
    let mut reference = None;
    for p in [1, 2, 4] {
        let mut s = session(p);
        let w = ids(p);
        let cols = g.c * g.h * g.w;
        let out_cols = g.k * g.positions();
        let mx = s.create_matrix(g.n, cols, Precision::Single, Layout::col_block(g.n, cols, &w).unwrap()).unwrap();
        let mf = s.create_matrix(g.k, g.patch_len(), Precision::Single, Layout::single(g.k, g.patch_len(), WorkerId(0))).unwrap();
        let mo = s.create_matrix(g.n, out_cols, Precision::Single, Layout::row_block(g.n, out_cols, &w).unwrap()).unwrap();
        s.set_data(mx, &x).unwrap();
        s.set_data(mf, &f).unwrap();
        s.conv2d_forward(mx, mf, mo, g).unwrap();
        let got = s.get_data(mo).unwrap();
        assert!(max_abs_diff(&got, &want) <= 1e-5);
        match &reference {
            None => reference = Some(bits(&got)),
            Some(r) => assert_eq!(r, &bits(&got)),
        }
    }
    let strided = ConvGeometry { stride: 2, pad: 0, ..g };
    let want = conv_oracle(&x, &f, &strided);
    let mut s = session(2);
    let w = ids(2);
    let out_cols = strided.k * strided.positions();
    let mx = s.create_matrix(g.n, g.c * g.h * g.w, Precision::Single, Layout::row_block(g.n, g.c * g.h * g.w, &w).unwrap()).unwrap();
    let mf = s.create_matrix(g.k, g.patch_len(), Precision::Single, Layout::col_block(g.k, g.patch_len(), &w).unwrap()).unwrap();
    let mo = s.create_matrix(g.n, out_cols, Precision::Single, Layout::col_block(g.n, out_cols, &w).unwrap()).unwrap();
    s.set_data(mx, &x).unwrap();
    s.set_data(mf, &f).unwrap();
    s.conv2d_forward(mx, mf, mo, strided).unwrap();
    assert!(max_abs_diff(&s.get_data(mo).unwrap(), &want) <= 1e-5);
}

#[test]
fn row_col_sum_deterministic_and_fast() {
    let (r, c) = (50, 70);
    let a = random(r * c, 21);
    let rows: Vec<f64> = (0..r).map(|i| a[i * c..(i + 1) * c].iter().sum()).collect();
    let cols: Vec<f64> = (0..c).map(|j| (0..r).map(|i| a[i * c + j]).sum()).collect();
    let mut reference = None;
    for p in [1, 4] {
        for (i, la) in layouts(r, c, p).into_iter().enumerate() {
            let mut s = session(p);
            let w = ids(p);
            let ma = s.create_matrix(r, c, Precision::Single, la).unwrap();
            let mr = s.create_matrix(r, 1, Precision::Single, Layout::row_block(r, 1, &w).unwrap()).unwrap();
            let mc = s.create_matrix(1, c, Precision::Single, Layout::col_block(1, c, &w).unwrap()).unwrap();
            s.set_data(ma, &a).unwrap();
            s.add_row_col_sum(ma, mr, mc, 1.0, true).unwrap();
            let (gr, gc) = (s.get_data(mr).unwrap(), s.get_data(mc).unwrap());
            assert!(max_abs_diff(&gr, &rows) < 1e-4 && max_abs_diff(&gc, &cols) < 1e-4);
            let got = (bits(&gr), bits(&gc));
            match &reference {
                None => reference = Some(got),
                Some(want) => assert_eq!(want, &got, "p={p} layout {i}"),
            }
            s.set_scalar(mr, 0.0).unwrap();
            s.set_scalar(mc, 0.0).unwrap();
            s.add_row_col_sum(ma, mr, mc, 1.0, false).unwrap();
            assert!(max_abs_diff(&s.get_data(mr).unwrap(), &rows) < 1e-4);
            assert!(max_abs_diff(&s.get_data(mc).unwrap(), &cols) < 1e-4);
        }
    }
}

#[test]
fn row_col_sum_counts_ones() {
    let mut s = session(2);
    let w = ids(2);
    let a = s.create_matrix(3, 4, Precision::Single, Layout::grid(3, 4, 1, 2, &w).unwrap()).unwrap();
    let r = s.create_matrix(3, 1, Precision::Single, Layout::single(3, 1, WorkerId(1))).unwrap();
    let c = s.create_matrix(1, 4, Precision::Single, Layout::single(1, 4, WorkerId(0))).unwrap();
    s.set_scalar(a, 1.0).unwrap();
    s.add_row_col_sum(a, r, c, 1.0, true).unwrap();
    assert_eq!(s.get_data(r).unwrap(), vec![4.0; 3]);
    assert_eq!(s.get_data(c).unwrap(), vec![3.0; 4]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let (r, c) = (9, 17);
    let a: Vec<f64> = random(r * c, 5).iter().map(|x| x * 30.0).collect();
    let mut reference = None;
    for p in [1, 4] {
        for l in layouts(r, c, p) {
            let mut s = session(p);
            let m = s.create_matrix(r, c, Precision::Single, l).unwrap();
            s.set_data(m, &a).unwrap();
            s.softmax_rows(m).unwrap();
            let got = s.get_data(m).unwrap();
            for i in 0..r {
                let row = &a[i * c..(i + 1) * c];
                let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                let sum: f64 = got[i * c..(i + 1) * c].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for j in 0..c {
                    assert!((got[i * c + j] - (a[i * c + j] - mx).exp() / z).abs() < 1e-6);
                }
            }
            match &reference {
                None => reference = Some(bits(&got)),
                Some(want) => assert_eq!(want, &bits(&got)),
            }
        }
    }
    let mut s = session(1);
    let m = s.create_matrix(2, 2, Precision::Single, Layout::single(2, 2, WorkerId(0))).unwrap();
    s.set_data(m, &[0.0, 0.0, 1000.0, 0.0]).unwrap();
    s.softmax_rows(m).unwrap();
    let got = s.get_data(m).unwrap();
    assert_eq!(&got[..2], &[0.5, 0.5]);
    assert_eq!(got[2], 1.0);
    assert!(got[3] < 1e-30);
}

#[test]
fn elementwise_remaps_mismatched_layouts() {
    use gridmath::transport::MessageKind;
    let (r, c) = (8, 6);
    let x = random(r * c, 31);
    let y = random(r * c, 32);
    let mut s = session(4);
    let w = ids(4);
    let a = s.create_matrix(r, c, Precision::Single, Layout::row_block(r, c, &w).unwrap()).unwrap();
    let b = s.create_matrix(r, c, Precision::Single, Layout::col_block(r, c, &w).unwrap()).unwrap();
    let b2 = s.create_matrix(r, c, Precision::Single, Layout::row_block(r, c, &w).unwrap()).unwrap();
    s.set_data(a, &x).unwrap();
    s.set_data(b, &y).unwrap();
    s.set_data(b2, &y).unwrap();
    let before = s.fabric().stats();
    s.add(a, b).unwrap();
    let moved = s.fabric().stats().since(&before).total(MessageKind::Data).messages;
    assert!(moved > 0);
    let remapped = s.get_data(a).unwrap();
    s.set_data(a, &x).unwrap();
    let before = s.fabric().stats();
    s.add(a, b2).unwrap();
    assert_eq!(s.fabric().stats().since(&before).total(MessageKind::Data).messages, 0);
    assert_eq!(bits(&s.get_data(a).unwrap()), bits(&remapped));

    s.set_scalar(a, 1.0).unwrap();
    s.set_scalar(b2, 1.0).unwrap();
    s.axpy(2.0, a, b2).unwrap();
    assert_eq!(s.get_data(b2).unwrap(), vec![3.0; r * c]);
    s.set_data(a, &[-1.0, 0.0, 2.0].repeat(16)).unwrap();
    s.relu(a).unwrap();
    assert_eq!(&s.get_data(a).unwrap()[..3], &[0.0, 0.0, 2.0]);
}

#[test]
fn cast_to_half_rounds_and_saturates() {
    let mut s = session(2);
    let w = ids(2);
    let src = s.create_matrix(1, 3, Precision::Single, Layout::single(1, 3, WorkerId(0))).unwrap();
    let dst = s.create_matrix(1, 3, Precision::Half, Layout::col_block(1, 3, &w).unwrap()).unwrap();
    s.set_data(src, &[1.0, 65520.0, -65520.0]).unwrap();
    s.cast_precision(src, dst).unwrap();
    assert_eq!(s.get_data(dst).unwrap(), vec![1.0, f64::INFINITY, f64::NEG_INFINITY]);
}

#[test]
fn shape_errors_are_reported() {
    let mut s = session(1);
    let a = s.create_matrix(2, 3, Precision::Single, Layout::single(2, 3, WorkerId(0))).unwrap();
    let b = s.create_matrix(2, 3, Precision::Single, Layout::single(2, 3, WorkerId(0))).unwrap();
    let c = s.create_matrix(2, 2, Precision::Single, Layout::single(2, 2, WorkerId(0))).unwrap();
    assert!(s.gemm(a, b, c, 1.0, 0.0, false, false).is_err());
    assert!(s.gemm(a, b, c, 1.0, 0.0, false, true).is_ok());
    assert!(s.add(a, c).is_err());
    assert!(s.set_data(a, &[1.0]).is_err());
    assert!(s.check_metadata_consistency().unwrap());
}
