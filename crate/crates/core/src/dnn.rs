//! A small hybrid-parallel MLP trained through the session API.
//!
//! Weights and biases are split by output column across workers; activations
//! are split by batch row. Parameters are replicated after each update, and the
//! next forward pass waits on each layer's replicas only when it reaches that
//! layer, so replication of later layers overlaps with earlier-layer compute.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::local::splitmix64;
use crate::layout::Layout;
use crate::ops::PipelineId;
use crate::precision::Precision;
use crate::session::{DistMatrix, ReplicationHandle, Session};
use crate::wire::{Reader, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    FullyConnected { input: usize, output: usize },
    Relu,
    SoftmaxLoss,
}

/// FullyConnected/Relu pairs between the given sizes, ending in SoftmaxLoss.
pub fn mlp(sizes: &[usize]) -> Vec<LayerSpec> {
    let mut v = Vec::new();
    for (i, pair) in sizes.windows(2).enumerate() {
        v.push(LayerSpec::FullyConnected { input: pair[0], output: pair[1] });
        v.push(if i + 2 == sizes.len() { LayerSpec::SoftmaxLoss } else { LayerSpec::Relu });
    }
    v
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch: usize,
    pub learning_rate: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch: 32, learning_rate: 0.1, precision: Precision::Single, seed: 1 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: DistMatrix,
    b: DistMatrix,
    dw: DistMatrix,
    db: DistMatrix,
    /// Pre-activation, then activation in place.
    z: DistMatrix,
    dz: DistMatrix,
    row_scratch: DistMatrix,
    relu: bool,
    input: usize,
    output: usize,
}

#[derive(Debug)]
pub struct TrainState {
    layers: Vec<Layer>,
    x: DistMatrix,
    y: DistMatrix,
    ones: DistMatrix,
    batch: usize,
    pub learning_rate: f64,
    pub iteration: u64,
    precision: Precision,
    forward: Vec<Option<PipelineId>>,
    backward: Option<PipelineId>,
    /// Replication handles started by the most recent step.
    pub handles: Vec<ReplicationHandle>,
}

/// Seed for parameter `index` under `root`.
pub fn param_seed(root: u64, index: usize) -> u64 {
    splitmix64(root ^ splitmix64(0xD1B5_4A32_D192_ED03 ^ index as u64))
}

impl TrainState {
    pub fn parameters(&self) -> Vec<DistMatrix> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn weights(&self) -> Vec<DistMatrix> {
        self.layers.iter().map(|l| l.w).collect()
    }

    pub fn biases(&self) -> Vec<DistMatrix> {
        self.layers.iter().map(|l| l.b).collect()
    }

    pub fn gradients(&self) -> Vec<DistMatrix> {
        self.layers.iter().flat_map(|l| [l.dw, l.db]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.input * l.output + l.output).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().output
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn forward_pipelines(&self) -> Vec<PipelineId> {
        self.forward.iter().flatten().copied().collect()
    }

    pub fn backward_pipeline(&self) -> Option<PipelineId> {
        self.backward
    }
}

fn check_specs(specs: &[LayerSpec]) -> Result<Vec<(usize, usize, bool)>> {
    let mut out = Vec::new();
    let mut it = specs.iter().peekable();
    let mut prev: Option<usize> = None;
    while let Some(s) = it.next() {
        let LayerSpec::FullyConnected { input, output } = *s else {
            return Err(Error::ShapeMismatch(format!("expected a fully connected layer, found {s:?}")));
        };
        if input == 0 || output == 0 || prev.is_some_and(|p| p != input) {
            return Err(Error::ShapeMismatch(format!("layer {input}->{output} does not follow {prev:?}")));
        }
        prev = Some(output);
        match it.next() {
            Some(LayerSpec::Relu) => out.push((input, output, true)),
            Some(LayerSpec::SoftmaxLoss) if it.peek().is_none() => out.push((input, output, false)),
            other => return Err(Error::ShapeMismatch(format!("unexpected {other:?} after a fully connected layer"))),
        }
    }
    if out.is_empty() || out.last().unwrap().2 {
        return Err(Error::ShapeMismatch("network must end in SoftmaxLoss".into()));
    }
    Ok(out)
}

/// Allocates all matrices, initialises weights uniformly in +-1/sqrt(fan_in)
/// from the root seed, zeroes biases and replicates every parameter.
pub fn build_network(s: &mut Session, specs: &[LayerSpec], cfg: &TrainConfig) -> Result<TrainState> {
    let shapes = check_specs(specs)?;
    if cfg.batch == 0 {
        return Err(Error::ShapeMismatch("batch size must be positive".into()));
    }
    let workers = s.worker_ids().to_vec();
    let p = cfg.precision;
    let n = cfg.batch;
    let rows = |s: &mut Session, r: usize, c: usize| -> Result<DistMatrix> {
        let l = Layout::row_block(r, c, &workers)?;
        s.create_matrix(r, c, p, l)
    };
    let cols = |s: &mut Session, r: usize, c: usize| -> Result<DistMatrix> {
        let l = Layout::col_block(r, c, &workers)?;
        s.create_matrix(r, c, p, l)
    };
    s.distribute_seeds(cfg.seed)?;
    let x = rows(s, n, shapes[0].0)?;
    let y = rows(s, n, shapes.last().unwrap().1)?;
    let ones = rows(s, n, 1)?;
    s.set_scalar(ones, 1.0)?;
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, &(input, output, relu)) in shapes.iter().enumerate() {
        let w = cols(s, input, output)?;
        let bound = 1.0 / (input as f64).sqrt();
        s.fill_uniform(w, param_seed(cfg.seed, i), -bound, bound)?;
        let layer = Layer {
            w,
            b: cols(s, 1, output)?,
            dw: cols(s, input, output)?,
            db: cols(s, 1, output)?,
            z: rows(s, n, output)?,
            dz: rows(s, n, output)?,
            row_scratch: rows(s, n, 1)?,
            relu,
            input,
            output,
        };
        layers.push(layer);
    }
    let state = TrainState {
        forward: vec![None; layers.len()],
        layers,
        x,
        y,
        ones,
        batch: n,
        learning_rate: cfg.learning_rate,
        iteration: 0,
        precision: p,
        backward: None,
        handles: Vec::new(),
    };
    for m in state.parameters() {
        s.replicate_sync(m)?;
    }
    Ok(state)
}

fn forward_layer(s: &mut Session, st: &TrainState, i: usize) -> Result<()> {
    let l = st.layers[i];
    let input = if i == 0 { st.x } else { st.layers[i - 1].z };
    s.gemm(input, l.w, l.z, 1.0, 0.0, false, false)?;
    s.gemm(st.ones, l.b, l.z, 1.0, 1.0, false, false)?;
    if l.relu {
        s.relu(l.z)
    } else {
        s.softmax_rows(l.z)
    }
}

/// dZ_L = (P - Y)/N, then per layer dW = A^T dZ, db = column sums of dZ,
/// dA = dZ W^T masked by the ReLU.
fn gradient_ops(s: &mut Session, st: &TrainState) -> Result<()> {
    let last = st.layers.last().unwrap();
    s.cast_precision(last.z, last.dz)?;
    s.sub(last.dz, st.y)?;
    s.mul_scalar(last.dz, 1.0 / st.batch as f64)?;
    let det = s.deterministic();
    for i in (0..st.layers.len()).rev() {
        let l = st.layers[i];
        let input = if i == 0 { st.x } else { st.layers[i - 1].z };
        s.gemm(input, l.dz, l.dw, 1.0, 0.0, true, false)?;
        s.set_scalar(l.db, 0.0)?;
        s.set_scalar(l.row_scratch, 0.0)?;
        s.add_row_col_sum(l.dz, l.row_scratch, l.db, 1.0, det)?;
        if i > 0 {
            let prev = st.layers[i - 1];
            s.gemm(l.dz, l.w, prev.dz, 1.0, 0.0, false, true)?;
            s.relu_grad(prev.dz, prev.z)?;
        }
    }
    Ok(())
}

fn update_ops(s: &mut Session, st: &TrainState) -> Result<()> {
    for l in &st.layers {
        s.axpy(-st.learning_rate, l.dw, l.w)?;
        s.axpy(-st.learning_rate, l.db, l.b)?;
    }
    Ok(())
}

fn one_hot(labels: &[u32], classes: usize) -> Result<Vec<f64>> {
    let mut y = vec![0.0; labels.len() * classes];
    for (i, &c) in labels.iter().enumerate() {
        if c as usize >= classes {
            return Err(Error::ShapeMismatch(format!("label {c} out of range for {classes} classes")));
        }
        y[i * classes + c as usize] = 1.0;
    }
    Ok(y)
}

/// Mean cross-entropy of row-major probabilities.
pub fn cross_entropy(probs: &[f64], labels: &[u32], classes: usize) -> f64 {
    let total: f64 = labels.iter().enumerate().map(|(i, &c)| -probs[i * classes + c as usize].max(f64::MIN_POSITIVE).ln()).sum();
    total / labels.len() as f64
}

fn load_batch(s: &mut Session, st: &TrainState, batch: &[f64], labels: &[u32]) -> Result<()> {
    if labels.len() != st.batch || batch.len() != st.batch * st.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} values / {} labels; network expects {} x {}",
            batch.len(),
            labels.len(),
            st.batch,
            st.input_dim()
        )));
    }
    s.set_data(st.x, batch)?;
    s.set_data(st.y, &one_hot(labels, st.classes())?)
}

fn run_recorded(s: &mut Session, slot: &mut Option<PipelineId>, body: impl FnOnce(&mut Session) -> Result<()>) -> Result<()> {
    match *slot {
        Some(id) => s.replay(id),
        None => {
            let id = s.begin_record()?;
            let res = body(s);
            s.end_record()?;
            res?;
            *slot = Some(id);
            Ok(())
        }
    }
}

fn forward_all(s: &mut Session, st: &mut TrainState) -> Result<()> {
    for i in 0..st.layers.len() {
        let mut slot = st.forward[i];
        run_recorded(s, &mut slot, |s| forward_layer(s, st, i))?;
        st.forward[i] = slot;
    }
    Ok(())
}

/// One SGD step. Returns the batch loss computed before the update.
pub fn train_step(s: &mut Session, st: &mut TrainState, batch: &[f64], labels: &[u32]) -> Result<f64> {
    load_batch(s, st, batch, labels)?;
    forward_all(s, st)?;
    let probs = s.get_data(st.layers.last().unwrap().z)?;
    let loss = cross_entropy(&probs, labels, st.classes());
    let mut slot = st.backward;
    run_recorded(s, &mut slot, |s| {
        gradient_ops(s, st)?;
        update_ops(s, st)
    })?;
    st.backward = slot;
    st.iteration += 1;
    let mut handles = Vec::with_capacity(st.layers.len() * 2);
    for m in st.parameters() {
        handles.push(s.replicate_async(m)?);
    }
    st.handles = handles;
    Ok(loss)
}

/// Runs forward and gradient computation without updating; returns the loss.
pub fn compute_gradients(s: &mut Session, st: &mut TrainState, batch: &[f64], labels: &[u32]) -> Result<f64> {
    load_batch(s, st, batch, labels)?;
    for m in st.parameters() {
        s.wait_matrix(m)?;
    }
    for i in 0..st.layers.len() {
        forward_layer(s, st, i)?;
    }
    let probs = s.get_data(st.layers.last().unwrap().z)?;
    gradient_ops(s, st)?;
    Ok(cross_entropy(&probs, labels, st.classes()))
}

pub type HostLayer = (Vec<f64>, Vec<f64>, usize, usize, bool);

/// Host-side reference loss in f64 for gathered parameters.
pub fn reference_loss(params: &[HostLayer], batch: &[f64], labels: &[u32]) -> f64 {
    reference_forward(params, batch, labels).0
}

/// Loss plus the on/off pattern of every ReLU unit.
fn reference_forward(params: &[HostLayer], batch: &[f64], labels: &[u32]) -> (f64, Vec<bool>) {
    let n = labels.len();
    let mut act = batch.to_vec();
    let mut width = params[0].2;
    let mut pattern = Vec::new();
    for (w, b, input, output, relu) in params {
        debug_assert_eq!(width, *input);
        let mut z = vec![0.0; n * output];
        for r in 0..n {
            for o in 0..*output {
                let mut acc = 0.0;
                for k in 0..*input {
                    acc += act[r * input + k] * w[k * output + o];
                }
                let v = acc + b[o];
                if *relu {
                    pattern.push(v > 0.0);
                }
                z[r * output + o] = if *relu { v.max(0.0) } else { v };
            }
        }
        act = z;
        width = *output;
    }
    for r in 0..n {
        let row = &mut act[r * width..(r + 1) * width];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
    }
    (cross_entropy(&act, labels, width), pattern)
}

fn param_mut(p: &mut [HostLayer], li: usize, which: usize, k: usize) -> &mut f64 {
    if which == 0 {
        &mut p[li].0[k]
    } else {
        &mut p[li].1[k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor).
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters whose +-epsilon perturbation flipped a ReLU unit, where a
    /// central difference does not estimate the derivative.
    pub skipped_kinks: usize,
}

/// Compares the distributed analytic gradients with central differences of
/// the f64 reference loss.
pub fn gradient_check(
    s: &mut Session,
    st: &mut TrainState,
    batch: &[f64],
    labels: &[u32],
    epsilon: f64,
    floor: f64,
) -> Result<GradientCheck> {
    compute_gradients(s, st, batch, labels)?;
    let mut params = Vec::new();
    let mut grads = Vec::new();
    for l in st.layers.clone() {
        params.push((s.get_data(l.w)?, s.get_data(l.b)?, l.input, l.output, l.relu));
        grads.push((s.get_data(l.dw)?, s.get_data(l.db)?));
    }
    let (_, base) = reference_forward(&params, batch, labels);
    let mut out = GradientCheck { max_relative_error: 0.0, checked: 0, skipped_kinks: 0 };
    for li in 0..params.len() {
        for which in 0..2 {
            let len = if which == 0 { params[li].0.len() } else { params[li].1.len() };
            for k in 0..len {
                let orig = *param_mut(&mut params, li, which, k);
                *param_mut(&mut params, li, which, k) = orig + epsilon;
                let (up, up_pattern) = reference_forward(&params, batch, labels);
                *param_mut(&mut params, li, which, k) = orig - epsilon;
                let (down, down_pattern) = reference_forward(&params, batch, labels);
                *param_mut(&mut params, li, which, k) = orig;
                if up_pattern != base || down_pattern != base {
                    out.skipped_kinks += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * epsilon);
                let analytic = if which == 0 { grads[li].0[k] } else { grads[li].1[k] };
                let scale = analytic.abs().max(numeric.abs()).max(floor);
                out.max_relative_error = out.max_relative_error.max((analytic - numeric).abs() / scale);
                out.checked += 1;
            }
        }
    }
    Ok(out)
}

/// Predicted classes for `batch` (row-major, rows x input_dim). With `half`,
/// parameters are cast to Half storage and the forward pass runs in the
/// mixed mode (Half storage, Single arithmetic).
pub fn infer(s: &mut Session, st: &TrainState, batch: &[f64], half: bool) -> Result<Vec<usize>> {
    let dim = st.input_dim();
    if !batch.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch(format!("{} values is not a multiple of {dim}", batch.len())));
    }
    let n = batch.len() / dim;
    if n == 0 {
        return Ok(Vec::new());
    }
    for m in st.parameters() {
        s.wait_matrix(m)?;
    }
    let workers = s.worker_ids().to_vec();
    let act_prec = if st.precision == Precision::Double { Precision::Double } else { Precision::Single };
    let mut temps = Vec::new();
    let res = (|| {
        let mut mk = |s: &mut Session, r: usize, c: usize, p: Precision, l: Layout| -> Result<DistMatrix> {
            let m = s.create_matrix(r, c, p, l)?;
            temps.push(m);
            Ok(m)
        };
        let x = mk(s, n, dim, act_prec, Layout::row_block(n, dim, &workers)?)?;
        s.set_data(x, batch)?;
        let ones = mk(s, n, 1, act_prec, Layout::row_block(n, 1, &workers)?)?;
        s.set_scalar(ones, 1.0)?;
        let mut input = x;
        for l in &st.layers {
            let (w, b) = if half {
                let w = mk(s, l.input, l.output, Precision::Half, s.descriptor(l.w)?.layout.clone())?;
                let b = mk(s, 1, l.output, Precision::Half, s.descriptor(l.b)?.layout.clone())?;
                s.cast_precision(l.w, w)?;
                s.cast_precision(l.b, b)?;
                (w, b)
            } else {
                (l.w, l.b)
            };
            let z = mk(s, n, l.output, act_prec, Layout::row_block(n, l.output, &workers)?)?;
            s.gemm(input, w, z, 1.0, 0.0, false, false)?;
            s.gemm(ones, b, z, 1.0, 1.0, false, false)?;
            if l.relu {
                s.relu(z)?;
            } else {
                s.softmax_rows(z)?;
            }
            input = z;
        }
        let probs = s.get_data(input)?;
        let c = st.classes();
        Ok(probs.chunks(c).map(|row| row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best })).collect())
    })();
    for m in temps {
        let _ = s.destroy(m);
    }
    res
}

/// Shorthand for the mixed-half inference path.
pub fn infer_mixed_half(s: &mut Session, st: &TrainState, batch: &[f64]) -> Result<Vec<usize>> {
    infer(s, st, batch, true)
}

pub fn accuracy(pred: &[usize], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count() as f64 / labels.len() as f64
}

// ---- datasets and logs -----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gaussian-ish clusters around random class centroids.
    pub fn synthetic(count: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centroids: Vec<f64> = (0..classes * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut features = Vec::with_capacity(count * dim);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let c = rng.gen_range(0..classes);
            for d in 0..dim {
                // Sum of uniforms approximates a normal draw.
                let noise: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * 0.5;
                features.push((centroids[c * dim + d] + spread * noise) as f32);
            }
            labels.push(c as u32);
        }
        Dataset { dim, classes, features, labels }
    }

    /// Rows `start..start+n`, wrapping around the end.
    pub fn batch(&self, start: usize, n: usize) -> (Vec<f64>, Vec<u32>) {
        let mut x = Vec::with_capacity(n * self.dim);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let r = (start + i) % self.len();
            x.extend(self.features[r * self.dim..(r + 1) * self.dim].iter().map(|&v| v as f64));
            y.push(self.labels[r]);
        }
        (x, y)
    }

    pub fn all(&self) -> (Vec<f64>, Vec<u32>) {
        (self.features.iter().map(|&v| v as f64).collect(), self.labels.clone())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.len() as u32).u32(self.dim as u32).u32(self.classes as u32);
        for f in &self.features {
            w.bytes(&f.to_le_bytes());
        }
        for l in &self.labels {
            w.u32(*l);
        }
        w.finish()
    }

    pub fn decode(data: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(data);
        let (count, dim, classes) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let raw =
            r.take(count.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Decode("dataset too large".into()))?)?;
        let features = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let labels = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        if labels.iter().any(|&l| l as usize >= classes) {
            return Err(Error::Decode("label out of range".into()));
        }
        Ok(Dataset { dim, classes, features, labels })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: f64,
    pub elapsed_seconds: f64,
    pub fps: f64,
}

pub const LOG_HEADER: &str = "iteration,loss,elapsedSeconds,fps";

pub fn write_log(out: &mut impl Write, rows: &[LogRow]) -> Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.3}", r.iteration, r.loss, r.elapsed_seconds, r.fps)?;
    }
    Ok(())
}

/// Trains for `steps` iterations over `data`, batches prepared ahead by the
/// prefetch hand-off. Returns one log row per step.
pub fn train(s: &mut Session, st: &mut TrainState, data: &Dataset, steps: usize) -> Result<Vec<LogRow>> {
    if data.is_empty() || data.dim != st.input_dim() || data.classes != st.classes() {
        return Err(Error::ShapeMismatch("dataset does not match the network".into()));
    }
    let n = st.batch();
    let source = data.clone();
    let batches = crate::dataload::prefetch(0..steps, 2, move |i| Ok(source.batch(i * n, n)))?;
    let start = Instant::now();
    let mut rows = Vec::with_capacity(steps);
    for b in batches {
        let (x, y) = b?;
        let loss = train_step(s, st, &x, &y)?;
        let elapsed = start.elapsed().as_secs_f64();
        let done = st.iteration as f64 * n as f64;
        rows.push(LogRow { iteration: st.iteration, loss, elapsed_seconds: elapsed, fps: done / elapsed.max(1e-9) });
    }
    Ok(rows)
}
