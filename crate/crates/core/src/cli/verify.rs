//! Self-contained oracle and invariant suites behind `gridmath verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataload::{exhaustive_best, modeled_latency, tune, CostTable, StageCost};
use crate::dnn::{self, Dataset, TrainConfig};
use crate::layout::{worker_range, Layout, TileExtent, WorkerId};
use crate::precision::{f32_to_half_bits, half_bits_to_f32, Precision};
use crate::session::{DistMatrix, Session};
use crate::sim;
use crate::transport::{Backend, CostModel, Fabric, MessageKind};

pub type SuiteResult = std::result::Result<String, String>;

pub struct Options {
    pub inject_layout_overlap: bool,
}

pub const SUITES: &[&str] =
    &["layout", "gemm", "determinism", "replication", "cache", "pooling", "checkpoint", "tuner", "half", "gradient", "scaling"];

pub fn run_suite(name: &str, opts: &Options) -> SuiteResult {
    let r = match name {
        "layout" => layout(opts),
        "gemm" => gemm(),
        "determinism" => determinism(),
        "replication" => replication(),
        "cache" => cache(),
        "pooling" => pooling(),
        "checkpoint" => checkpoint(),
        "tuner" => tuner(),
        "half" => half(),
        "gradient" => gradient(),
        "scaling" => scaling(),
        _ => return Err(format!("unknown suite {name:?}")),
    };
    r.map_err(|e| e.to_string())?
}

type R = crate::Result<SuiteResult>;

fn session(p: usize) -> crate::Result<Session> {
    Session::new(Fabric::new(p, Backend::InProcess)?)
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn layouts(rows: usize, cols: usize, p: usize) -> crate::Result<Vec<Layout>> {
    let w = worker_range(p);
    let mut v =
        vec![Layout::single(rows, cols, WorkerId(p as u32 - 1)), Layout::row_block(rows, cols, &w)?, Layout::col_block(rows, cols, &w)?];
    if p.is_multiple_of(2) {
        v.push(Layout::grid(rows, cols, 2, p / 2, &w)?);
    }
    Ok(v)
}

fn layout(opts: &Options) -> R {
    let w = worker_range(4);
    let mut good = layouts(9, 7, 4)?;
    good.push(Layout::grid(9, 7, 2, 2, &w)?);
    if opts.inject_layout_overlap {
        let mut bad = Layout::row_block(9, 7, &w)?;
        bad.tiles[1].0 = TileExtent::new(2, bad.tiles[1].0.row_count, 0, 7);
        good.push(bad);
    }
    for (i, l) in good.iter().enumerate() {
        if let Err(v) = l.validate(9, 7, &w) {
            return Ok(Err(format!("layout {i} rejected: {v}")));
        }
    }
    let overlap = Layout { tiles: vec![(TileExtent::new(0, 5, 0, 7), w[0]), (TileExtent::new(4, 5, 0, 7), w[1])] };
    let gap = Layout { tiles: vec![(TileExtent::new(0, 4, 0, 7), w[0]), (TileExtent::new(5, 4, 0, 7), w[1])] };
    let stranger = Layout::single(9, 7, WorkerId(9));
    for (name, l) in [("overlap", overlap), ("gap", gap), ("unknown worker", stranger)] {
        if l.validate(9, 7, &w).is_ok() {
            return Ok(Err(format!("{name} accepted")));
        }
    }
    Ok(Ok(format!("{} layouts valid, 3 faults rejected", good.len())))
}

fn oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    c
}

fn gemm() -> R {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut cases = 0;
    for p in [1, 2, 4] {
        let mut s = session(p)?;
        for _ in 0..6 {
            let (m, k, n) = (rng.gen_range(1..48), rng.gen_range(1..48), rng.gen_range(1..48));
            let (av, bv) = (random(m * k, &mut rng), random(k * n, &mut rng));
            let la = layouts(m, k, p)?;
            let lb = layouts(k, n, p)?;
            let lc = layouts(m, n, p)?;
            let pick = |v: &Vec<Layout>, rng: &mut ChaCha8Rng| v[rng.gen_range(0..v.len())].clone();
            let a = s.create_matrix(m, k, Precision::Single, pick(&la, &mut rng))?;
            let b = s.create_matrix(k, n, Precision::Single, pick(&lb, &mut rng))?;
            let c = s.create_matrix(m, n, Precision::Single, pick(&lc, &mut rng))?;
            s.set_data(a, &av)?;
            s.set_data(b, &bv)?;
            s.gemm(a, b, c, 1.0, 0.0, false, false)?;
            let got = s.get_data(c)?;
            let want = oracle(&av, &bv, m, k, n);
            let max_el = av.iter().chain(&bv).fold(0.0f64, |x, v| x.max(v.abs()));
            let bound = 1e-5 * k as f64 * max_el * max_el;
            let err = got.iter().zip(&want).fold(0.0f64, |x, (g, w)| x.max((g - w).abs()));
            if err > bound {
                return Ok(Err(format!("{m}x{k}x{n} at P={p}: error {err:e} > {bound:e}")));
            }
            for x in [a, b, c] {
                s.destroy(x)?;
            }
            cases += 1;
        }
    }
    Ok(Ok(format!("{cases} cases within tolerance")))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn determinism() -> R {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, k, n) = (13, 300, 11);
    let (av, bv) = (random(m * k, &mut rng), random(k * n, &mut rng));
    let mut reference: Option<(Vec<u64>, Vec<u64>, Vec<u64>)> = None;
    for p in [1, 2, 4] {
        let mut s = session(p)?;
        for (la, lc) in layouts(m, k, p)?.into_iter().zip(layouts(m, n, p)?.into_iter().rev()) {
            let a = s.create_matrix(m, k, Precision::Single, la)?;
            let b = s.create_matrix(k, n, Precision::Single, Layout::col_block(k, n, s.worker_ids())?)?;
            let c = s.create_matrix(m, n, Precision::Single, lc)?;
            let row = s.create_matrix(m, 1, Precision::Single, Layout::row_block(m, 1, s.worker_ids())?)?;
            let col = s.create_matrix(1, n, Precision::Single, Layout::single(1, n, WorkerId(0)))?;
            s.set_data(a, &av)?;
            s.set_data(b, &bv)?;
            s.gemm(a, b, c, 1.0, 0.0, false, false)?;
            s.add_row_col_sum(c, row, col, 1.0, true)?;
            let gemm_bits = bits(&s.get_data(c)?);
            let sums = bits(&[s.get_data(row)?, s.get_data(col)?].concat());
            s.softmax_rows(c)?;
            let soft = bits(&s.get_data(c)?);
            match &reference {
                None => reference = Some((gemm_bits, sums, soft)),
                Some(r) => {
                    if r.0 != gemm_bits || r.1 != sums || r.2 != soft {
                        return Ok(Err(format!("results differ at P={p}")));
                    }
                }
            }
            for x in [a, b, c, row, col] {
                s.destroy(x)?;
            }
        }
    }
    Ok(Ok("gemm, addRowColSum and softmaxRows bitwise identical".into()))
}

fn replication() -> R {
    let p = 4;
    let mut s = session(p)?;
    let m = s.create_matrix(37, 23, Precision::Single, Layout::grid(37, 23, 2, 2, s.worker_ids())?)?;
    s.fill_uniform(m, 5, -1.0, 1.0)?;
    let source = s.get_raw(m)?;
    let before = s.fabric().stats();
    s.replicate_sync(m)?;
    let after = s.fabric().stats().since(&before);
    let replicas = s.read_replicas(m)?;
    if let Err(e) = check(replicas.iter().all(|r| *r == source), || "replica differs from source".into()) {
        return Ok(Err(e));
    }
    let data = after.total(MessageKind::Data).bytes;
    let want = ((p - 1) * source.len()) as u64;
    let header = (after.total(MessageKind::Data).messages * crate::replication::CHUNK_HEADER as u64) as i64;
    let payload = data as i64 - header;
    Ok(check(payload == want as i64, || format!("replication payload {payload} bytes, expected {want}"))
        .map(|_| format!("{p} replicas equal, {want} payload bytes")))
}

fn cache() -> R {
    let mut s = session(4)?;
    let ws = s.worker_ids().to_vec();
    let a = s.create_matrix(16, 16, Precision::Single, Layout::row_block(16, 16, &ws)?)?;
    s.set_scalar(a, 0.5)?;
    let ops = |s: &mut Session| -> crate::Result<()> {
        for _ in 0..20 {
            s.mul_scalar(a, 1.0)?;
        }
        Ok(())
    };
    let base = s.fabric().stats();
    for _ in 0..10 {
        ops(&mut s)?;
    }
    let uncached = s.fabric().stats().since(&base).total(MessageKind::Control).bytes;
    let id = s.begin_record()?;
    ops(&mut s)?;
    s.end_record()?;
    let base = s.fabric().stats();
    for _ in 0..10 {
        s.replay(id)?;
    }
    let cached = s.fabric().stats().since(&base).total(MessageKind::Control).bytes;
    let ratio = cached as f64 / uncached as f64;
    Ok(check(ratio <= 0.10, || format!("replay control bytes {ratio:.3} of uncached")).map(|_| format!("control ratio {ratio:.4}")))
}

fn small_net(s: &mut Session, precision: Precision) -> crate::Result<dnn::TrainState> {
    let cfg = TrainConfig { batch: 16, learning_rate: 0.3, precision, seed: 4 };
    dnn::build_network(s, &dnn::mlp(&[6, 10, 3]), &cfg)
}

fn pooling() -> R {
    let mut s = session(2)?;
    let mut st = small_net(&mut s, Precision::Single)?;
    let data = Dataset::synthetic(64, 6, 3, 0.3, 1);
    dnn::train(&mut s, &mut st, &data, 1)?;
    let count = |s: &mut Session| -> crate::Result<u64> { Ok(s.pool_stats()?.iter().map(|w| w.pool.allocations_from_os).sum()) };
    let warm = count(&mut s)?;
    dnn::train(&mut s, &mut st, &data, 100)?;
    let extra = count(&mut s)? - warm;
    Ok(check(extra == 0, || format!("{extra} allocations after warmup")).map(|_| "0 allocations in 100 steps".into()))
}

fn checkpoint() -> R {
    let dir = std::env::temp_dir().join(format!("gridmath-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("ck.dmck");
    let mut s = session(4)?;
    let ws = s.worker_ids().to_vec();
    let ms: Vec<DistMatrix> = vec![
        s.create_matrix(9, 5, Precision::Half, Layout::grid(9, 5, 2, 2, &ws)?)?,
        s.create_matrix(4, 12, Precision::Double, Layout::col_block(4, 12, &ws)?)?,
    ];
    for (i, &m) in ms.iter().enumerate() {
        s.fill_uniform(m, i as u64, -2.0, 2.0)?;
    }
    let raw: Vec<Vec<u8>> = ms.iter().map(|&m| s.get_raw(m)).collect::<crate::Result<_>>()?;
    s.checkpoint(&path)?;
    let mut r = Session::restore(&path, Fabric::new(2, Backend::InProcess)?)?;
    let back: Vec<Vec<u8>> = ms.iter().map(|&m| r.get_raw(m)).collect::<crate::Result<_>>()?;
    let _ = std::fs::remove_dir_all(&dir);
    Ok(check(raw == back, || "restored bytes differ".into()).map(|_| "4 -> 2 workers bitwise identical".into()))
}

fn tuner() -> R {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 1.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=5);
        let stages = (0..n)
            .map(|_| {
                let host = rng.gen_range(0.1..10.0);
                StageCost { host, device: host * rng.gen_range(0.02..3.0) }
            })
            .collect();
        let table = CostTable { stages, transfer: rng.gen_range(0.0..3.0), thread_overhead: rng.gen_range(0.0..0.5) };
        let t = rng.gen_range(1..=8);
        let ratio = modeled_latency(&table, &tune(&table, t)) / modeled_latency(&table, &exhaustive_best(&table, t));
        worst = worst.max(ratio);
    }
    Ok(check(worst <= 1.10, || format!("worst ratio {worst:.4}")).map(|_| format!("worst ratio {worst:.4}")))
}

fn half() -> R {
    let cases: [(f32, u16); 6] =
        [(1.0, 0x3C00), (-2.0, 0xC000), (65504.0, 0x7BFF), (65520.0, 0x7C00), (5.960_464_5e-8, 0x0001), (0.333_333_34, 0x3555)];
    for (v, b) in cases {
        let got = f32_to_half_bits(v);
        if got != b {
            return Ok(Err(format!("{v} -> {got:#06x}, expected {b:#06x}")));
        }
    }
    for b in (0..=u16::MAX).filter(|b| b & 0x7C00 != 0x7C00) {
        if f32_to_half_bits(half_bits_to_f32(b)) != b {
            return Ok(Err(format!("{b:#06x} does not round-trip")));
        }
    }
    Ok(Ok("spot values and all finite round-trips".into()))
}

fn gradient() -> R {
    let data = Dataset::synthetic(16, 6, 3, 0.4, 21);
    let (x, y) = data.batch(0, 16);
    let mut out = Vec::new();
    for (p, eps, bound) in [(Precision::Single, 1e-5, 1e-3), (Precision::Double, 1e-4, 1e-7)] {
        let mut s = session(2)?;
        let mut st = small_net(&mut s, p)?;
        let err = dnn::gradient_check(&mut s, &mut st, &x, &y, eps, 1e-4)?.max_relative_error;
        if err > bound {
            return Ok(Err(format!("{p:?}: relative error {err:e} > {bound:e}")));
        }
        out.push(format!("{p:?} {err:.2e}"));
    }
    Ok(Ok(out.join(", ")))
}

fn scaling() -> R {
    let cost = CostModel::default();
    let ps = sim::doubling(64);
    let g: Vec<_> = ps.iter().map(|&p| sim::simulate_gemm(4096, p, &cost)).collect::<crate::Result<_>>()?;
    let t: Vec<_> = ps.iter().map(|&p| sim::simulate_training(&sim::TrainingAnalog::default(), p, &cost)).collect::<crate::Result<_>>()?;
    for (name, pts) in [("gemm", &g), ("training", &t)] {
        let shape = sim::shape(pts);
        if !(shape.monotone && shape.diminishing) {
            return Ok(Err(format!("{name} curve: {shape:?}")));
        }
    }
    Ok(Ok("gemm and training curves monotone with diminishing gains".into()))
}
