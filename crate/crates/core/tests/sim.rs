mod common;

use gridmath::layout::Layout;
use gridmath::precision::Precision;
use gridmath::session::Session;
use gridmath::sim::{self, SimPoint, TrainingAnalog};
use gridmath::transport::{Backend, CostModel, Fabric};
use proptest::prelude::*;

#[test]
fn analog_tracks_the_simulated_fabric() {
    let cost = CostModel::new(5e-6, 5e-10, 1e9).unwrap();
    for (n, p) in [(256, 4), (300, 6), (128, 2)] {
        let mut s = Session::new(Fabric::new(p, Backend::Simulated(cost)).unwrap()).unwrap();
        let (pr, pc) = sim::grid_shape(p);
        let ws = common::ids(p);
        let mk = |s: &mut Session| s.create_matrix(n, n, Precision::Single, Layout::grid(n, n, pr, pc, &ws).unwrap()).unwrap();
        let (a, b, c) = (mk(&mut s), mk(&mut s), mk(&mut s));
        s.fabric().reset_clock();
        s.gemm(a, b, c, 1.0, 0.0, false, false).unwrap();
        let real = s.fabric().simulated_elapsed().unwrap();
        let model = sim::simulate_gemm(n, p, &cost).unwrap().seconds;
        assert!((real - model).abs() <= 0.02 * real, "n={n} P={p}: fabric {real} vs analog {model}");
    }
}

#[test]
fn gemm_and_training_scale_with_diminishing_returns() {
    let cost = CostModel::default();
    let ps = sim::doubling(64);
    assert_eq!(ps, vec![1, 2, 4, 8, 16, 32, 64]);
    let gemm: Vec<SimPoint> = ps.iter().map(|&p| sim::simulate_gemm(4096, p, &cost).unwrap()).collect();
    let train: Vec<SimPoint> = ps.iter().map(|&p| sim::simulate_training(&TrainingAnalog::default(), p, &cost).unwrap()).collect();
    for pts in [&gemm, &train] {
        let shape = sim::shape(pts);
        assert!(shape.monotone && shape.diminishing, "{shape:?}");
    }
    // Single worker: pure compute, no communication.
    let one = &gemm[0];
    assert!((one.seconds - 2.0 * 4096f64.powi(3) / cost.compute_rate).abs() < 1e-9 * one.seconds + 4.0 * cost.latency);
}

#[test]
fn shape_detects_flat_and_accelerating_curves() {
    let pt = |w: usize, t: f64| SimPoint { workers: w, seconds: 1.0, throughput: t };
    let linear = sim::shape(&[pt(1, 1.0), pt(2, 2.0), pt(4, 4.0)]);
    assert!(linear.monotone && !linear.diminishing);
    let drop = sim::shape(&[pt(1, 1.0), pt(2, 1.5), pt(4, 1.4)]);
    assert!(!drop.monotone);
}

proptest! {
    #[test]
    fn grid_shape_factors(p in 1usize..200) {
        let (pr, pc) = sim::grid_shape(p);
        prop_assert_eq!(pr * pc, p);
        prop_assert!(pr <= pc);
    }
}
