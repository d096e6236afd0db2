//! Strong-scaling analogs evaluated on the alpha-beta cost model.
//!
//! Nothing is computed or sent: the same transfer plans the workers use are
//! charged to per-endpoint counters exactly as the simulated fabric would,
//! which makes a 4096^3 GEMM at 64 workers cheap to evaluate.

use crate::descriptor::{MatrixDescriptor, MatrixId};
use crate::kernels::plan::{GemmPlan, DEFAULT_PANEL};
use crate::layout::{worker_range, Layout, WorkerId};
use crate::precision::Precision;
use crate::replication::{chunk_plan, CHUNK_HEADER};
use crate::transport::CostModel;
use crate::Result;

/// Bytes of a data-piece header ahead of the payload.
pub const PIECE_HEADER: usize = 46;
/// Nominal size of one control or completion message.
pub const CONTROL_BYTES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimPoint {
    pub workers: usize,
    pub seconds: f64,
    /// Work units per simulated second (flops for GEMM, samples for training).
    pub throughput: f64,
}

/// Per-endpoint message, byte and compute counters; slot 0 is the master.
#[derive(Debug, Clone)]
pub struct Ledger {
    messages: Vec<u64>,
    bytes: Vec<u64>,
    compute: Vec<u64>,
}

impl Ledger {
    pub fn new(workers: usize) -> Ledger {
        Ledger { messages: vec![0; workers + 1], bytes: vec![0; workers + 1], compute: vec![0; workers + 1] }
    }

    fn slot(w: Option<WorkerId>) -> usize {
        w.map_or(0, |w| w.index() + 1)
    }

    /// A message is charged to both its sender and its receiver.
    pub fn message(&mut self, src: Option<WorkerId>, dst: Option<WorkerId>, bytes: usize) {
        for e in [Self::slot(src), Self::slot(dst)] {
            self.messages[e] += 1;
            self.bytes[e] += bytes as u64;
        }
    }

    pub fn compute(&mut self, w: WorkerId, work: usize) {
        self.compute[w.index() + 1] += work as u64;
    }

    /// One control message out and one completion back per worker.
    pub fn op(&mut self) {
        for w in 0..self.messages.len() - 1 {
            let w = Some(WorkerId(w as u32));
            self.message(None, w, CONTROL_BYTES);
            self.message(w, None, CONTROL_BYTES);
        }
    }

    pub fn elapsed(&self, cost: &CostModel) -> f64 {
        (0..self.messages.len())
            .map(|e| {
                self.messages[e] as f64 * cost.latency
                    + self.bytes[e] as f64 * cost.inverse_bandwidth
                    + self.compute[e] as f64 / cost.compute_rate
            })
            .fold(0.0, f64::max)
    }

    /// Charges a distributed gemm: remote panel pieces plus 2*k flops per
    /// element of every C tile.
    pub fn gemm(&mut self, a: &MatrixDescriptor, b: &MatrixDescriptor, c: &MatrixDescriptor, ta: bool, tb: bool, replicated: &[MatrixId]) {
        self.op();
        let plan = GemmPlan::new(a, b, c, ta, tb, replicated, DEFAULT_PANEL);
        for t in plan.transfers.iter().filter(|t| !t.is_local()) {
            let elem = if t.matrix == a.id { a.precision } else { b.precision }.bytes();
            self.message(Some(t.src), Some(t.dst), PIECE_HEADER + t.rect.len() * elem);
        }
        for w in c.layout.workers() {
            let work: usize = c.layout.tiles_of(w).map(|(_, e)| 2 * e.len() * plan.k).sum();
            self.compute(w, work);
        }
    }

    /// Charges an element-local op costing `per_element` units per element.
    pub fn local(&mut self, m: &MatrixDescriptor, per_element: usize) {
        self.op();
        for w in m.layout.workers() {
            let n: usize = m.layout.tiles_of(w).map(|(_, e)| e.len()).sum();
            self.compute(w, n * per_element);
        }
    }

    /// Master scatters (`to_workers`) or gathers every tile.
    pub fn host_transfer(&mut self, m: &MatrixDescriptor, to_workers: bool) {
        self.op();
        for w in m.layout.workers() {
            for (_, e) in m.layout.tiles_of(w) {
                let bytes = PIECE_HEADER + e.len() * m.precision.bytes();
                if to_workers {
                    self.message(None, Some(w), bytes);
                } else {
                    self.message(Some(w), None, bytes);
                }
            }
        }
    }

    /// Owners push their chunks to every other worker.
    pub fn replicate(&mut self, m: &MatrixDescriptor, chunk_bytes: usize) {
        self.op();
        let all = worker_range(self.messages.len() - 1);
        for owner in m.layout.workers() {
            for (_, len) in chunk_plan(m, owner, chunk_bytes) {
                for &peer in all.iter().filter(|&&p| p != owner) {
                    self.message(Some(owner), Some(peer), CHUNK_HEADER + len);
                }
            }
        }
    }
}

/// The most square pr x pc factorisation of `p` with pr <= pc.
pub fn grid_shape(p: usize) -> (usize, usize) {
    let mut pr = (p as f64).sqrt() as usize;
    while pr > 1 && !p.is_multiple_of(pr) {
        pr -= 1;
    }
    let pr = pr.max(1);
    (pr, p / pr)
}

fn desc(id: u64, rows: usize, cols: usize, precision: Precision, layout: Layout) -> MatrixDescriptor {
    MatrixDescriptor { id: MatrixId(id), rows, cols, precision, layout, version: 0 }
}

/// n x n x n Single GEMM with A, B and C on the same near-square grid.
pub fn simulate_gemm(n: usize, p: usize, cost: &CostModel) -> Result<SimPoint> {
    let ws = worker_range(p);
    let (pr, pc) = grid_shape(p);
    let grid = Layout::grid(n, n, pr, pc, &ws)?;
    let a = desc(1, n, n, Precision::Single, grid.clone());
    let b = desc(2, n, n, Precision::Single, grid.clone());
    let c = desc(3, n, n, Precision::Single, grid);
    let mut l = Ledger::new(p);
    l.gemm(&a, &b, &c, false, false, &[]);
    let seconds = l.elapsed(cost);
    Ok(SimPoint { workers: p, seconds, throughput: 2.0 * (n as f64).powi(3) / seconds })
}

/// One iteration of the hybrid-parallel MLP trainer: batch rows split across
/// workers, weights split by output column and replicated after the update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingAnalog {
    pub batch: usize,
    pub sizes: Vec<usize>,
    pub chunk_bytes: usize,
}

impl Default for TrainingAnalog {
    fn default() -> Self {
        TrainingAnalog { batch: 256, sizes: vec![4096, 4096, 4096, 1000], chunk_bytes: 1 << 20 }
    }
}

pub fn simulate_training(t: &TrainingAnalog, p: usize, cost: &CostModel) -> Result<SimPoint> {
    let ws = worker_range(p);
    let sp = Precision::Single;
    let n = t.batch;
    let mut id = 0;
    let mut next = |r: usize, c: usize, by_rows: bool| -> Result<MatrixDescriptor> {
        id += 1;
        let layout = if by_rows { Layout::row_block(r, c, &ws)? } else { Layout::col_block(r, c, &ws)? };
        Ok(desc(id, r, c, sp, layout))
    };
    let x = next(n, t.sizes[0], true)?;
    let y = next(n, *t.sizes.last().unwrap(), true)?;
    let ones = next(n, 1, true)?;
    struct L {
        w: MatrixDescriptor,
        b: MatrixDescriptor,
        dw: MatrixDescriptor,
        db: MatrixDescriptor,
        z: MatrixDescriptor,
        dz: MatrixDescriptor,
        scratch: MatrixDescriptor,
    }
    let mut layers = Vec::new();
    for pair in t.sizes.windows(2) {
        let (i, o) = (pair[0], pair[1]);
        layers.push(L {
            w: next(i, o, false)?,
            b: next(1, o, false)?,
            dw: next(i, o, false)?,
            db: next(1, o, false)?,
            z: next(n, o, true)?,
            dz: next(n, o, true)?,
            scratch: next(n, 1, true)?,
        });
    }
    let mut l = Ledger::new(p);
    l.host_transfer(&x, true);
    l.host_transfer(&y, true);
    for (i, layer) in layers.iter().enumerate() {
        let input = if i == 0 { &x } else { &layers[i - 1].z };
        l.gemm(input, &layer.w, &layer.z, false, false, &[layer.w.id]);
        l.gemm(&ones, &layer.b, &layer.z, false, false, &[layer.b.id]);
        l.local(&layer.z, 1);
    }
    let last = layers.last().unwrap();
    l.host_transfer(&last.z, false);
    for _ in 0..3 {
        l.local(&last.dz, 1);
    }
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let input = if i == 0 { &x } else { &layers[i - 1].z };
        l.gemm(input, &layer.dz, &layer.dw, true, false, &[]);
        l.local(&layer.db, 1);
        l.local(&layer.scratch, 1);
        // Column partial sums travel to the owners of db.
        l.local(&layer.dz, 2);
        for src in &ws {
            for dst in layer.db.layout.workers().into_iter().filter(|d| d != src) {
                let cols: usize = layer.db.layout.tiles_of(dst).map(|(_, e)| e.len()).sum();
                l.message(Some(*src), Some(dst), PIECE_HEADER + cols * 8);
            }
        }
        if i > 0 {
            let prev = &layers[i - 1];
            l.gemm(&layer.dz, &layer.w, &prev.dz, false, true, &[layer.w.id]);
            l.local(&prev.dz, 1);
        }
    }
    for layer in &layers {
        l.local(&layer.w, 2);
        l.local(&layer.b, 2);
        l.replicate(&layer.w, t.chunk_bytes);
        l.replicate(&layer.b, t.chunk_bytes);
    }
    let seconds = l.elapsed(cost);
    Ok(SimPoint { workers: p, seconds, throughput: n as f64 / seconds })
}

/// Worker counts used for scaling curves: powers of two up to `max`.
pub fn doubling(max: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |p| Some(p * 2)).take_while(|&p| p <= max).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    /// Throughput gained per added worker between consecutive points.
    pub marginal: Vec<f64>,
    pub monotone: bool,
    pub diminishing: bool,
}

/// Strong-scaling shape: throughput never drops, and the gain per added
/// worker strictly shrinks from one point to the next.
pub fn shape(points: &[SimPoint]) -> Shape {
    let marginal: Vec<f64> =
        points.windows(2).map(|w| (w[1].throughput - w[0].throughput) / (w[1].workers - w[0].workers) as f64).collect();
    Shape {
        monotone: points.windows(2).all(|w| w[1].throughput >= w[0].throughput),
        diminishing: marginal.windows(2).all(|m| m[1] < m[0]),
        marginal,
    }
}
