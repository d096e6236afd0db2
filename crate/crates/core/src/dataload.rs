//! Parallel, auto-tuned data augmentation.
//!
//! Samples are byte tensors in planar C,H,W order. Each stage works at the
//! narrowest element type it needs, and the buffer is promoted the first time a
//! stage needs a wider one. Per-sample randomness is drawn from a stream keyed by
//! (sample seed, stage index), so output never depends on thread count or
//! placement.

use std::fs;
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::local::splitmix64;
use crate::precision::{f32_to_half_bits, half_bits_to_f32};
use crate::wire::{Reader, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ElementType {
    Byte,
    Half,
    Single,
}

impl ElementType {
    pub fn bytes(self) -> usize {
        match self {
            ElementType::Byte => 1,
            ElementType::Half => 2,
            ElementType::Single => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageKind {
    /// Validates and copies the raw byte tensor.
    Decode,
    /// Random window of the given size.
    Crop {
        out_h: usize,
        out_w: usize,
    },
    /// Horizontal flip with probability one half.
    Mirror,
    /// Subtracts a per-channel (length C) or per-element mean.
    MeanSubtract(Vec<f32>),
    Scale(f32),
}

impl StageKind {
    pub fn required(&self) -> ElementType {
        match self {
            StageKind::Decode | StageKind::Crop { .. } | StageKind::Mirror => ElementType::Byte,
            StageKind::Scale(_) => ElementType::Half,
            StageKind::MeanSubtract(_) => ElementType::Single,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StageKind::Decode => "decode",
            StageKind::Crop { .. } => "crop",
            StageKind::Mirror => "mirror",
            StageKind::MeanSubtract(_) => "mean",
            StageKind::Scale(_) => "scale",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    Host,
    Device,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub kind: StageKind,
    pub placement: Placement,
}

impl Stage {
    pub fn host(kind: StageKind) -> Stage {
        Stage { kind, placement: Placement::Host }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Byte(Vec<u8>),
    Half(Vec<u16>),
    Single(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_bytes(c: usize, h: usize, w: usize, bytes: Vec<u8>) -> Result<Tensor> {
        if bytes.len() != c * h * w {
            return Err(Error::Pipeline(format!("{c}x{h}x{w} sample needs {} bytes, got {}", c * h * w, bytes.len())));
        }
        Ok(Tensor { c, h, w, data: TensorData::Byte(bytes) })
    }

    pub fn element_type(&self) -> ElementType {
        match self.data {
            TensorData::Byte(_) => ElementType::Byte,
            TensorData::Half(_) => ElementType::Half,
            TensorData::Single(_) => ElementType::Single,
        }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f64> {
        match &self.data {
            TensorData::Byte(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::Half(v) => v.iter().map(|&x| half_bits_to_f32(x) as f64).collect(),
            TensorData::Single(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Widens to `to`; never narrows.
    pub fn promote(&mut self, to: ElementType) {
        if to <= self.element_type() {
            return;
        }
        let as_f32: Vec<f32> = match &self.data {
            TensorData::Byte(v) => v.iter().map(|&x| x as f32).collect(),
            TensorData::Half(v) => v.iter().map(|&x| half_bits_to_f32(x)).collect(),
            TensorData::Single(v) => v.clone(),
        };
        self.data = match to {
            ElementType::Half => TensorData::Half(as_f32.iter().map(|&x| f32_to_half_bits(x)).collect()),
            _ => TensorData::Single(as_f32),
        };
    }

    /// Rearranges elements; `src_of(c, y, x)` gives the source index.
    fn remap(&mut self, h: usize, w: usize, src_of: impl Fn(usize, usize, usize) -> usize) {
        let c = self.c;
        fn gather<T: Copy>(v: &[T], c: usize, h: usize, w: usize, f: &dyn Fn(usize, usize, usize) -> usize) -> Vec<T> {
            let mut out = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.push(v[f(ch, y, x)]);
                    }
                }
            }
            out
        }
        self.data = match &self.data {
            TensorData::Byte(v) => TensorData::Byte(gather(v, c, h, w, &src_of)),
            TensorData::Half(v) => TensorData::Half(gather(v, c, h, w, &src_of)),
            TensorData::Single(v) => TensorData::Single(gather(v, c, h, w, &src_of)),
        };
        self.h = h;
        self.w = w;
    }
}

fn stage_rng(sample_seed: u64, stage: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(sample_seed ^ splitmix64(stage as u64 + 1)))
}

/// Applies one stage to one sample.
pub fn apply_stage(kind: &StageKind, index: usize, t: &mut Tensor, seed: u64) -> Result<()> {
    t.promote(kind.required());
    let (c, h, w) = (t.c, t.h, t.w);
    match kind {
        StageKind::Decode => {
            if t.is_empty() {
                return Err(Error::Pipeline("empty sample".into()));
            }
        }
        StageKind::Crop { out_h, out_w } => {
            if *out_h > h || *out_w > w || *out_h == 0 || *out_w == 0 {
                return Err(Error::CropTooLarge { crop_h: *out_h, crop_w: *out_w, h, w });
            }
            let mut rng = stage_rng(seed, index);
            let y0 = rng.gen_range(0..=h - out_h);
            let x0 = rng.gen_range(0..=w - out_w);
            t.remap(*out_h, *out_w, |ch, y, x| ch * h * w + (y0 + y) * w + x0 + x);
        }
        StageKind::Mirror => {
            if stage_rng(seed, index).gen_bool(0.5) {
                t.remap(h, w, |ch, y, x| ch * h * w + y * w + (w - 1 - x));
            }
        }
        StageKind::MeanSubtract(mean) => {
            let TensorData::Single(v) = &mut t.data else { unreachable!("promoted above") };
            if mean.len() == c {
                for (i, x) in v.iter_mut().enumerate() {
                    *x -= mean[i / (h * w)];
                }
            } else if mean.len() == v.len() {
                v.iter_mut().zip(mean).for_each(|(x, m)| *x -= m);
            } else {
                return Err(Error::Pipeline(format!("mean has {} values; need {c} or {}", mean.len(), v.len())));
            }
        }
        StageKind::Scale(f) => match &mut t.data {
            TensorData::Half(v) => v.iter_mut().for_each(|x| *x = f32_to_half_bits(half_bits_to_f32(*x) * f)),
            TensorData::Single(v) => v.iter_mut().for_each(|x| *x *= f),
            TensorData::Byte(_) => unreachable!("promoted above"),
        },
    }
    Ok(())
}

/// Runs every stage over every sample using `threads` host threads.
/// Device-placed stages run on the modeled device executor, which computes
/// the same function.
pub fn run_pipeline(stages: &[Stage], threads: usize, batch: &[Tensor], seeds: &[u64]) -> Result<Vec<Tensor>> {
    if seeds.len() != batch.len() {
        return Err(Error::Pipeline(format!("{} seeds for {} samples", seeds.len(), batch.len())));
    }
    let run_one = |t: &Tensor, seed: u64| -> Result<Tensor> {
        let mut t = t.clone();
        for (i, s) in stages.iter().enumerate() {
            apply_stage(&s.kind, i, &mut t, seed)?;
        }
        Ok(t)
    };
    let threads = threads.clamp(1, batch.len().max(1));
    if threads == 1 {
        return batch.iter().zip(seeds).map(|(t, &s)| run_one(t, s)).collect();
    }
    let per = batch.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Tensor>>> = std::thread::scope(|sc| {
        let handles: Vec<_> = batch
            .chunks(per)
            .zip(seeds.chunks(per))
            .map(|(ts, ss)| sc.spawn(move || ts.iter().zip(ss).map(|(t, &s)| run_one(t, s)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("pipeline thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(batch.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Flattens a batch into row-major N x (C*H*W) values.
pub fn batch_rows(batch: &[Tensor]) -> Vec<f64> {
    batch.iter().flat_map(Tensor::values).collect()
}

// ---- tuning ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageCost {
    /// Seconds per batch on one host thread.
    pub host: f64,
    pub device: f64,
}

/// Modeled per-batch cost inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub stages: Vec<StageCost>,
    /// Seconds per Host/Device boundary crossing, including the final hand-off
    /// to the device that trains.
    pub transfer: f64,
    /// Seconds of fixed overhead per extra host thread.
    pub thread_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Choice {
    pub threads: usize,
    pub placements: Vec<Placement>,
}

impl Choice {
    pub fn all_host(stages: usize) -> Choice {
        Choice { threads: 1, placements: vec![Placement::Host; stages] }
    }
}

/// Boundary crossings: data starts on the host and ends on the device.
pub fn crossings(placements: &[Placement]) -> usize {
    let mut prev = Placement::Host;
    let mut n = 0;
    for &p in placements.iter().chain(std::iter::once(&Placement::Device)) {
        if p != prev {
            n += 1;
        }
        prev = p;
    }
    n
}

/// Modeled per-batch latency: host work (split across threads, plus a fixed
/// overhead per extra thread), device work and boundary transfers in sequence.
pub fn modeled_latency(table: &CostTable, choice: &Choice) -> f64 {
    let mut host = 0.0;
    let mut device = 0.0;
    for (c, p) in table.stages.iter().zip(&choice.placements) {
        match p {
            Placement::Host => host += c.host,
            Placement::Device => device += c.device,
        }
    }
    let t = choice.threads.max(1) as f64;
    let host = if host > 0.0 { host / t + table.thread_overhead * (t - 1.0) } else { 0.0 };
    let transfer = table.transfer * crossings(&choice.placements) as f64;
    host + device + transfer
}

const EPS: f64 = 1e-12;

/// Orders candidates by latency, then fewer threads, then fewer Device stages.
fn preferred(table: &CostTable, a: &Choice, b: &Choice) -> bool {
    let (la, lb) = (modeled_latency(table, a), modeled_latency(table, b));
    if la < lb * (1.0 - EPS) {
        return true;
    }
    if la > lb * (1.0 + EPS) {
        return false;
    }
    let devices = |c: &Choice| c.placements.iter().filter(|&&p| p == Placement::Device).count();
    (a.threads, devices(a)) < (b.threads, devices(b))
}

/// Coordinate descent from all-Host with one thread. Each round considers a
/// new thread count, or flipping the placement of one stage or of a pair of
/// stages, and takes the best move; it stops when nothing improves. Ties go
/// to fewer threads, then to Host. Pair flips let a run of stages move to the
/// device together when a single move would pay an extra transfer.
pub fn tune(table: &CostTable, max_threads: usize) -> Choice {
    let max_threads = max_threads.max(1);
    let mut cur = Choice::all_host(table.stages.len());
    loop {
        let mut best = cur.clone();
        for t in 1..=max_threads {
            let cand = Choice { threads: t, ..cur.clone() };
            if preferred(table, &cand, &best) {
                best = cand;
            }
        }
        let n = table.stages.len();
        for i in 0..n {
            for j in i..n {
                let mut cand = cur.clone();
                for s in [i, j].into_iter().take(if i == j { 1 } else { 2 }) {
                    cand.placements[s] = match cand.placements[s] {
                        Placement::Host => Placement::Device,
                        Placement::Device => Placement::Host,
                    };
                }
                if preferred(table, &cand, &best) {
                    best = cand;
                }
            }
        }
        if best == cur {
            return cur;
        }
        cur = best;
    }
}

/// Times each stage on the host over `batch` and derives device costs from
/// per-stage speedups.
pub fn measure_costs(stages: &[Stage], batch: &[Tensor], seeds: &[u64], device_speedup: &[f64]) -> Result<Vec<StageCost>> {
    let mut current: Vec<Tensor> = batch.to_vec();
    let mut out = Vec::with_capacity(stages.len());
    for (i, s) in stages.iter().enumerate() {
        let start = Instant::now();
        for (t, &seed) in current.iter_mut().zip(seeds) {
            apply_stage(&s.kind, i, t, seed)?;
        }
        let host = start.elapsed().as_secs_f64();
        let speedup = device_speedup.get(i).copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
        out.push(StageCost { host, device: host / speedup });
    }
    Ok(out)
}

/// Applies a tuned choice to a stage list.
pub fn with_choice(stages: &[Stage], choice: &Choice) -> Vec<Stage> {
    stages.iter().zip(&choice.placements).map(|(s, &p)| Stage { kind: s.kind.clone(), placement: p }).collect()
}

// ---- prefetch --------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct PrefetchStats {
    /// Time the producer spent blocked because both buffers were full.
    pub producer_idle: Duration,
    /// Time the consumer waited for each batch.
    pub consumer_waits: Vec<Duration>,
}

/// A bounded producer/consumer hand-off: while the consumer holds batch k,
/// the producer builds batch k+1. The stream ends after the first error.
pub struct Prefetch<T: Send + 'static> {
    rx: Option<Receiver<Result<T>>>,
    producer: Option<JoinHandle<Duration>>,
    waits: Vec<Duration>,
    failed: bool,
}

pub fn prefetch<S, T, F>(source: S, depth: usize, mut build: F) -> Result<Prefetch<T>>
where
    S: IntoIterator + Send + 'static,
    S::IntoIter: Send,
    S::Item: Send,
    T: Send + 'static,
    F: FnMut(S::Item) -> Result<T> + Send + 'static,
{
    if depth < 2 {
        return Err(Error::Config(format!("prefetch depth must be at least 2, got {depth}")));
    }
    // One batch in the consumer's hands plus depth-1 queued.
    let (tx, rx) = sync_channel::<Result<T>>(depth - 1);
    let producer = std::thread::Builder::new().name("gridmath-prefetch".into()).spawn(move || {
        let mut idle = Duration::ZERO;
        for item in source {
            let built = build(item);
            let stop = built.is_err();
            let start = Instant::now();
            if tx.send(built).is_err() {
                break;
            }
            idle += start.elapsed();
            if stop {
                break;
            }
        }
        idle
    })?;
    Ok(Prefetch { rx: Some(rx), producer: Some(producer), waits: Vec::new(), failed: false })
}

impl<T: Send + 'static> Iterator for Prefetch<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Result<T>> {
        if self.failed {
            return None;
        }
        let start = Instant::now();
        let got = self.rx.as_ref()?.recv().ok();
        self.waits.push(start.elapsed());
        if matches!(got, Some(Err(_))) {
            self.failed = true;
        }
        got
    }
}

impl<T: Send + 'static> Prefetch<T> {
    /// Stops the producer and returns timing.
    pub fn finish(mut self) -> PrefetchStats {
        self.rx.take();
        let idle = self.producer.take().map(|h| h.join().unwrap_or_default()).unwrap_or_default();
        PrefetchStats { producer_idle: idle, consumer_waits: std::mem::take(&mut self.waits) }
    }
}

impl<T: Send + 'static> Drop for Prefetch<T> {
    fn drop(&mut self) {
        self.rx.take();
        if let Some(h) = self.producer.take() {
            let _ = h.join();
        }
    }
}

// ---- files -----------------------------------------------------------------

/// Encodes samples as consecutive (u32 C, u32 H, u32 W, C*H*W bytes) records.
pub fn encode_samples(samples: &[Tensor]) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    for s in samples {
        let TensorData::Byte(b) = &s.data else {
            return Err(Error::Pipeline("sample files hold byte tensors".into()));
        };
        w.u32(s.c as u32).u32(s.h as u32).u32(s.w as u32).bytes(b);
    }
    Ok(w.finish())
}

pub fn decode_samples(data: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader::new(data);
    let mut out = Vec::new();
    while r.remaining() > 0 {
        let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n = c.checked_mul(h).and_then(|x| x.checked_mul(w)).ok_or_else(|| Error::Decode("sample too large".into()))?;
        out.push(Tensor::from_bytes(c, h, w, r.take(n)?.to_vec())?);
    }
    Ok(out)
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    decode_samples(&fs::read(path)?)
}

pub fn write_samples(path: impl AsRef<Path>, samples: &[Tensor]) -> Result<()> {
    fs::write(path, encode_samples(samples)?)?;
    Ok(())
}

/// Mean files are raw little-endian f32 values.
pub fn read_mean(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let data = fs::read(path)?;
    if data.len() % 4 != 0 {
        return Err(Error::Decode(format!("mean file length {} is not a multiple of 4", data.len())));
    }
    Ok(data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_mean(path: impl AsRef<Path>, mean: &[f32]) -> Result<()> {
    fs::write(path, mean.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())?;
    Ok(())
}

/// Deterministic synthetic byte samples.
pub fn synthetic_samples(count: usize, c: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut b = vec![0u8; c * h * w];
            rng.fill(&mut b[..]);
            Tensor { c, h, w, data: TensorData::Byte(b) }
        })
        .collect()
}

/// The optimal choice by enumerating every placement and thread count.
/// Exponential in the stage count; meant as a reference for small tables.
pub fn exhaustive_best(table: &CostTable, max_threads: usize) -> Choice {
    let n = table.stages.len();
    let mut best = Choice::all_host(n);
    let mut best_cost = modeled_latency(table, &best);
    for mask in 0..(1u64 << n) {
        let placements: Vec<Placement> = (0..n).map(|i| if mask >> i & 1 == 1 { Placement::Device } else { Placement::Host }).collect();
        for threads in 1..=max_threads.max(1) {
            let c = Choice { threads, placements: placements.clone() };
            let cost = modeled_latency(table, &c);
            if cost < best_cost {
                best = c;
                best_cost = cost;
            }
        }
    }
    best
}
