//! Per-worker state and the op-execution loop.
//!
//! A worker owns its tile store, buffer pool, replica cache and metadata
//! cache, and touches them only from its own thread. Peer data is exchanged
//! push-style: every worker derives the same transfer plan from its
//! descriptor table, sends what it owns, then collects what it needs.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::descriptor::{MatrixDescriptor, MatrixId};
use crate::error::{Error, Result};
use crate::kernels::local::{self, GemmOperands, Real};
use crate::kernels::plan::{self, GemmPlan, IndexMap, Transfer, DEFAULT_PANEL, SLOT_A, SLOT_B};
use crate::layout::{Layout, TileExtent, WorkerId};
use crate::ops::{Accumulation, ConvGeometry, Envelope, EwOp, Op, OpCode, PipelineId};
use crate::pool::{PoolAllocator, PoolBuffer, PoolStats};
use crate::precision::{read_element, write_element, ComputePrecision, Precision};
use crate::replication::{decode_chunk, encode_chunk, replication_tag, REPLICATION_TAG};
use crate::transport::{Endpoint, EndpointId, FabricHandle, Message, MessageKind, TraceKind};
use crate::wire::{Reader, Writer};

pub const STATUS_OK: u8 = 0;
pub const STATUS_ERR: u8 = 1;

/// Mixes the root seed with the worker rank.
pub fn derived_seed(root: u64, worker: WorkerId) -> u64 {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    local::splitmix64(root ^ (worker.0 as u64 + 1).wrapping_mul(GOLDEN))
}

#[derive(Debug)]
pub struct StoredTile {
    pub index: usize,
    pub extent: TileExtent,
    pub buf: PoolBuffer,
}

/// Tiles resident on one worker, in layout order per matrix.
#[derive(Debug, Default)]
pub struct TileStore {
    tiles: HashMap<MatrixId, Vec<StoredTile>>,
    resident: usize,
}

impl TileStore {
    pub fn resident_bytes(&self) -> usize {
        self.resident
    }

    pub fn tiles(&self, id: MatrixId) -> &[StoredTile] {
        self.tiles.get(&id).map_or(&[], Vec::as_slice)
    }

    /// Sorted (matrix, extent) pairs currently resident.
    pub fn inventory(&self) -> Vec<(MatrixId, TileExtent)> {
        let mut v: Vec<_> = self.tiles.iter().flat_map(|(id, ts)| ts.iter().map(move |t| (*id, t.extent))).collect();
        v.sort();
        v
    }

    fn insert(&mut self, id: MatrixId, tiles: Vec<StoredTile>) {
        self.resident += tiles.iter().map(|t| t.buf.len()).sum::<usize>();
        self.tiles.insert(id, tiles);
    }

    fn remove(&mut self, id: MatrixId) -> Vec<StoredTile> {
        let ts = self.tiles.remove(&id).unwrap_or_default();
        self.resident -= ts.iter().map(|t| t.buf.len()).sum::<usize>();
        ts
    }

    fn get_mut(&mut self, id: MatrixId) -> &mut [StoredTile] {
        self.tiles.get_mut(&id).map_or(&mut [], Vec::as_mut_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicaState {
    Pending,
    Valid,
    Stale,
    Failed,
}

/// A full local copy of a matrix, row-major in its storage precision.
#[derive(Debug)]
pub struct ReplicaEntry {
    pub matrix: MatrixId,
    pub version: u64,
    pub state: ReplicaState,
    buf: PoolBuffer,
    received: usize,
    expected: usize,
    tag: u32,
}

impl ReplicaEntry {
    pub fn bytes(&self) -> &[u8] {
        self.buf.as_slice()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetadataCacheEntry {
    pub pipeline: PipelineId,
    pub steps: Vec<Envelope>,
}

#[derive(Debug)]
struct PushJob {
    matrix: MatrixId,
    version: u64,
    tag: u32,
    chunk: usize,
    /// Position in this worker's own tile list and byte offset inside it.
    tile: usize,
    offset: usize,
}

/// A rectangle of matrix values received from (or copied locally for) an exchange.
#[derive(Debug, Clone)]
pub struct Piece {
    pub slot: u8,
    pub matrix: MatrixId,
    pub rect: TileExtent,
    pub panel: u32,
    pub values: Vec<f64>,
}

fn encode_piece(slot: u8, matrix: MatrixId, rect: &TileExtent, panel: u32, precision: Precision, data: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(slot).u64(matrix.0).u32(panel);
    w.u64(rect.row_start as u64).u64(rect.row_count as u64).u64(rect.col_start as u64).u64(rect.col_count as u64);
    w.u8(precision.tag()).bytes(data);
    w.finish()
}

fn decode_piece(payload: &[u8]) -> Result<Piece> {
    let mut r = Reader::new(payload);
    let slot = r.u8()?;
    let matrix = MatrixId(r.u64()?);
    let panel = r.u32()?;
    let rect = TileExtent::new(r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let p = Precision::from_tag(r.u8()?)?;
    let data = r.rest();
    if data.len() != rect.len() * p.bytes() {
        return Err(Error::Decode(format!("piece carries {} bytes for {} elements", data.len(), rect.len())));
    }
    Ok(Piece { slot, matrix, rect, panel, values: crate::precision::decode_all(data, p) })
}

fn completion(status: u8, body: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(body.len() + 1);
    v.push(status);
    v.extend_from_slice(body);
    v
}

fn values_of(buf: &[u8], p: Precision) -> Vec<f64> {
    crate::precision::decode_all(buf, p)
}

fn store_values(buf: &mut [u8], p: Precision, values: &[f64]) {
    for (i, &v) in values.iter().enumerate() {
        write_element(buf, p, i, v);
    }
}

/// Dispatches a generic computation on the compute precision.
macro_rules! with_real {
    ($cp:expr, $f:ident :: <T> ($($arg:expr),*)) => {
        match $cp {
            ComputePrecision::Single => $f::<f32>($($arg),*),
            ComputePrecision::Double => $f::<f64>($($arg),*),
        }
    };
}

pub struct Worker {
    id: WorkerId,
    workers: usize,
    endpoint: Endpoint,
    fabric: FabricHandle,
    descriptors: BTreeMap<MatrixId, MatrixDescriptor>,
    store: TileStore,
    pool: PoolAllocator,
    replicas: HashMap<MatrixId, ReplicaEntry>,
    jobs: VecDeque<PushJob>,
    pipelines: HashMap<PipelineId, MetadataCacheEntry>,
    recording: Option<MetadataCacheEntry>,
    seed: u64,
    stash: HashMap<u32, VecDeque<Message>>,
    deferred: VecDeque<Message>,
    memory_limit: Option<usize>,
}

impl Worker {
    pub fn new(endpoint: Endpoint, memory_limit: Option<usize>) -> Worker {
        let EndpointId::Worker(id) = endpoint.id() else {
            panic!("worker constructed on the master endpoint");
        };
        let fabric = endpoint.fabric();
        Worker {
            id,
            workers: fabric.workers(),
            endpoint,
            fabric,
            descriptors: BTreeMap::new(),
            store: TileStore::default(),
            pool: PoolAllocator::new(),
            replicas: HashMap::new(),
            jobs: VecDeque::new(),
            pipelines: HashMap::new(),
            recording: None,
            seed: 0,
            stash: HashMap::new(),
            deferred: VecDeque::new(),
            memory_limit,
        }
    }

    pub fn id(&self) -> WorkerId {
        self.id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn descriptor(&self, id: MatrixId) -> Option<&MatrixDescriptor> {
        self.descriptors.get(&id)
    }

    pub fn store(&self) -> &TileStore {
        &self.store
    }

    pub fn pool_stats(&self) -> PoolStats {
        self.pool.stats()
    }

    pub fn pipeline(&self, id: PipelineId) -> Option<&MetadataCacheEntry> {
        self.pipelines.get(&id)
    }

    pub fn replica(&self, id: MatrixId) -> Option<&ReplicaEntry> {
        self.replicas.get(&id)
    }

    /// Serves Control and Data messages until shutdown or the fabric closes.
    pub fn run(mut self) {
        while let Ok(true) = self.step() {}
    }

    /// Handles one incoming message. Returns `false` after a shutdown request.
    pub fn step(&mut self) -> Result<bool> {
        let msg = match self.deferred.pop_front() {
            Some(m) => m,
            None => self.endpoint.recv()?,
        };
        match msg.kind {
            MessageKind::Control => {
                let env = Envelope::decode(&msg.payload)?;
                if env.op == Op::Shutdown {
                    self.reply(msg.tag, Ok(Vec::new()))?;
                    return Ok(false);
                }
                let res = self.execute(&env, msg.tag);
                self.reply(msg.tag, res)?;
                if env.op.code() != OpCode::ReplicateStart {
                    self.progress_job()?;
                }
            }
            MessageKind::Data => self.handle_data(msg)?,
            MessageKind::Completion => {}
        }
        Ok(true)
    }

    fn reply(&self, tag: u32, res: Result<Vec<u8>>) -> Result<()> {
        let payload = match res {
            Ok(body) => completion(STATUS_OK, &body),
            Err(e) => completion(STATUS_ERR, e.to_string().as_bytes()),
        };
        self.endpoint.send(EndpointId::Master, MessageKind::Completion, tag, payload)?;
        Ok(())
    }

    // ---- metadata cache ------------------------------------------------

    pub fn record_pipeline(&mut self, id: PipelineId) -> Result<()> {
        if self.recording.is_some() {
            return Err(Error::NestedRecording);
        }
        self.recording = Some(MetadataCacheEntry { pipeline: id, steps: Vec::new() });
        Ok(())
    }

    pub fn end_record(&mut self) -> Result<PipelineId> {
        let rec = self.recording.take().ok_or(Error::NotRecording)?;
        let id = rec.pipeline;
        self.pipelines.insert(id, rec);
        Ok(id)
    }

    fn close_recording(&mut self) {
        if self.recording.is_some() {
            let _ = self.end_record();
        }
    }

    /// Runs every recorded step; step `i` exchanges data under tag `tag + 1 + i`.
    pub fn execute_cached(&mut self, id: PipelineId, tag: u32) -> Result<Vec<u8>> {
        let steps = self.pipelines.get(&id).ok_or(Error::UnknownPipeline(id.0))?.steps.clone();
        for (i, step) in steps.iter().enumerate() {
            let t = tag.wrapping_add(1 + i as u32) & !REPLICATION_TAG;
            self.execute_op(&step.op, &step.replicated, t)?;
            if i + 1 < steps.len() {
                self.progress_job()?;
            }
        }
        Ok(Vec::new())
    }

    /// Executes one envelope, appending it to the open recording if it names one.
    pub fn execute(&mut self, env: &Envelope, tag: u32) -> Result<Vec<u8>> {
        if let Op::Replay(p) = env.op {
            self.close_recording();
            return self.execute_cached(p, tag);
        }
        match env.record {
            Some(p) if self.recording.as_ref().map(|r| r.pipeline) != Some(p) => {
                self.close_recording();
                self.record_pipeline(p)?;
            }
            Some(_) => {}
            None => self.close_recording(),
        }
        let out = self.execute_op(&env.op, &env.replicated, tag)?;
        if let (Some(_), Some(rec), true) = (env.record, self.recording.as_mut(), env.op.recordable()) {
            rec.steps.push(Envelope { record: None, replicated: env.replicated.clone(), op: env.op.clone() });
        }
        Ok(out)
    }

    pub fn execute_op(&mut self, op: &Op, replicated: &[MatrixId], tag: u32) -> Result<Vec<u8>> {
        let code = op.code();
        if code.is_compute() {
            self.fabric.core.trace(self.id, TraceKind::OpBegin { op: code, tag });
        }
        let out = self.dispatch(op, replicated, tag);
        if out.is_ok() {
            for id in op.writes() {
                if let Some(d) = self.descriptors.get_mut(&id) {
                    d.version += 1;
                }
                self.invalidate_replica(id)?;
            }
        }
        if code.is_compute() {
            self.fabric.core.trace(self.id, TraceKind::OpEnd { op: code, tag });
        }
        out
    }

    fn desc(&self, id: MatrixId) -> Result<&MatrixDescriptor> {
        self.descriptors.get(&id).ok_or(Error::UnknownMatrix(id.0))
    }

    fn dispatch(&mut self, op: &Op, replicated: &[MatrixId], tag: u32) -> Result<Vec<u8>> {
        match op {
            Op::DefineMatrix(d) => self.define(d.clone()).map(|_| Vec::new()),
            Op::DestroyMatrix(id) => self.destroy(*id).map(|_| Vec::new()),
            Op::SetData(id) => self.set_data(*id, tag).map(|_| Vec::new()),
            Op::GetData(id) => self.get_data(*id, tag).map(|_| Vec::new()),
            Op::Reshape { id, precision, layout } => self.reshape(*id, *precision, layout, tag).map(|_| Vec::new()),
            Op::Gemm { a, b, c, alpha, beta, trans_a, trans_b, order } => {
                self.gemm(*a, *b, *c, *alpha, *beta, *trans_a, *trans_b, *order, replicated, tag).map(|_| Vec::new())
            }
            Op::RowColSum { a, row_acc, col_acc, alpha, deterministic } => {
                self.row_col_sum(*a, *row_acc, *col_acc, *alpha, *deterministic, replicated, tag).map(|_| Vec::new())
            }
            Op::Elementwise { op, dst, src, scalar } => self.elementwise(*op, *dst, *src, *scalar, replicated, tag).map(|_| Vec::new()),
            Op::Softmax(id) => self.softmax(*id, replicated, tag).map(|_| Vec::new()),
            Op::Im2col { input, patches, geom } => self.im2col(*input, *patches, geom, replicated, tag).map(|_| Vec::new()),
            Op::ConvScatter { columns, output, geom } => self.conv_scatter(*columns, *output, geom, replicated, tag).map(|_| Vec::new()),
            Op::Cast { src, dst } => self.cast(*src, *dst, replicated, tag).map(|_| Vec::new()),
            Op::Fill { id, seed, lo, hi } => self.fill(*id, *seed, *lo, *hi).map(|_| Vec::new()),
            Op::ReplicateStart { id, version, chunk } => {
                self.start_replication(*id, *version, *chunk, replication_tag(tag)).map(|_| Vec::new())
            }
            Op::ReplicateDrain { id, version } => self.drain_replication(*id, *version).map(|_| Vec::new()),
            Op::ReadReplica(id) => self.read_replica(*id).map(<[u8]>::to_vec),
            Op::SetSeed(root) => {
                self.seed = derived_seed(*root, self.id);
                Ok(self.seed.to_le_bytes().to_vec())
            }
            Op::Replay(p) => self.execute_cached(*p, tag),
            Op::Checksum => Ok(self.descriptor_checksum().to_le_bytes().to_vec()),
            Op::PoolStats => {
                let s = self.pool.stats();
                let mut w = Writer::new();
                w.u64(s.allocations_from_os).u64(s.reuses).u64(s.frees).u64(s.pooled_bytes as u64);
                w.u64(self.store.resident_bytes() as u64);
                Ok(w.finish())
            }
            Op::Shutdown => Ok(Vec::new()),
        }
    }

    pub fn descriptor_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for d in self.descriptors.values() {
            h.update(&d.encode());
        }
        h.finalize()
    }

    // ---- tile store ----------------------------------------------------

    pub fn alloc_tile(&mut self, bytes: usize) -> Result<PoolBuffer> {
        if let Some(limit) = self.memory_limit {
            let resident = self.store.resident_bytes() + self.replica_bytes();
            if resident + bytes > limit {
                return Err(Error::OutOfMemory { worker: self.id, requested: bytes, resident, limit });
            }
        }
        self.pool.alloc(bytes)
    }

    pub fn free_tile(&mut self, buf: PoolBuffer) {
        self.pool.free(buf);
    }

    fn replica_bytes(&self) -> usize {
        self.replicas.values().map(|r| r.buf.len()).sum()
    }

    fn alloc_tiles(&mut self, layout: &Layout, precision: Precision) -> Result<Vec<StoredTile>> {
        let mine: Vec<(usize, TileExtent)> = layout.tiles_of(self.id).map(|(i, e)| (i, *e)).collect();
        let mut out = Vec::with_capacity(mine.len());
        for (index, extent) in mine {
            match self.alloc_tile(extent.len() * precision.bytes()) {
                Ok(buf) => out.push(StoredTile { index, extent, buf }),
                Err(e) => {
                    for t in out {
                        self.pool.free(t.buf);
                    }
                    return Err(e);
                }
            }
        }
        Ok(out)
    }

    fn define(&mut self, d: MatrixDescriptor) -> Result<()> {
        if self.descriptors.contains_key(&d.id) {
            return Err(Error::ShapeMismatch(format!("matrix {} already defined", d.id)));
        }
        let tiles = self.alloc_tiles(&d.layout, d.precision)?;
        self.store.insert(d.id, tiles);
        self.descriptors.insert(d.id, d);
        Ok(())
    }

    fn destroy(&mut self, id: MatrixId) -> Result<()> {
        self.desc(id)?;
        self.invalidate_replica(id)?;
        if let Some(r) = self.replicas.remove(&id) {
            self.pool.free(r.buf);
        }
        for t in self.store.remove(id) {
            self.pool.free(t.buf);
        }
        self.descriptors.remove(&id);
        Ok(())
    }

    fn set_data(&mut self, id: MatrixId, tag: u32) -> Result<()> {
        let expected = self.store.tiles(id).len();
        self.desc(id)?;
        let msgs = self.collect(tag, expected)?;
        for m in msgs {
            let mut r = Reader::new(&m.payload);
            let index = r.u32()? as usize;
            let data = r.rest();
            let tile = self
                .store
                .get_mut(id)
                .iter_mut()
                .find(|t| t.index == index)
                .ok_or_else(|| Error::ShapeMismatch(format!("tile {index} of {id} is not resident here")))?;
            if tile.buf.len() != data.len() {
                return Err(Error::ShapeMismatch(format!("tile {index} expects {} bytes, got {}", tile.buf.len(), data.len())));
            }
            tile.buf.as_mut_slice().copy_from_slice(data);
        }
        Ok(())
    }

    fn get_data(&mut self, id: MatrixId, tag: u32) -> Result<()> {
        self.desc(id)?;
        for t in self.store.tiles(id) {
            let mut w = Writer::new();
            w.u32(t.index as u32).bytes(t.buf.as_slice());
            self.endpoint.send(EndpointId::Master, MessageKind::Data, tag, w.finish())?;
        }
        Ok(())
    }

    // ---- exchange ------------------------------------------------------

    fn handle_data(&mut self, msg: Message) -> Result<()> {
        if msg.tag & REPLICATION_TAG != 0 {
            self.apply_chunk(&msg)
        } else {
            self.stash.entry(msg.tag).or_default().push_back(msg);
            Ok(())
        }
    }

    /// Waits for `expected` Data messages under `tag`, servicing replication
    /// chunks and deferring Control messages meanwhile.
    fn collect(&mut self, tag: u32, expected: usize) -> Result<Vec<Message>> {
        let mut got: Vec<Message> = Vec::with_capacity(expected);
        if let Some(q) = self.stash.remove(&tag) {
            got.extend(q);
        }
        while got.len() < expected {
            let m = self.endpoint.recv()?;
            match m.kind {
                MessageKind::Data if m.tag == tag => got.push(m),
                MessageKind::Data => self.handle_data(m)?,
                MessageKind::Control => self.deferred.push_back(m),
                MessageKind::Completion => {}
            }
        }
        if got.len() > expected {
            let extra: VecDeque<Message> = got.drain(expected..).collect();
            self.stash.insert(tag, extra);
        }
        Ok(got)
    }

    fn read_rect(&self, id: MatrixId, rect: &TileExtent) -> Result<(Precision, Vec<u8>)> {
        let d = self.desc(id)?;
        let p = d.precision;
        let bytes = p.bytes();
        let tile = self
            .store
            .tiles(id)
            .iter()
            .find(|t| t.extent.intersect(rect) == Some(*rect))
            .ok_or_else(|| Error::ShapeMismatch(format!("{id} rect {rect:?} not resident on {}", self.id)))?;
        let mut out = Vec::with_capacity(rect.len() * bytes);
        for i in rect.row_start..rect.row_end() {
            let s = tile.extent.local_index(i, rect.col_start) * bytes;
            out.extend_from_slice(&tile.buf.as_slice()[s..s + rect.col_count * bytes]);
        }
        Ok((p, out))
    }

    /// Sends every planned transfer this worker sources and returns the pieces
    /// it consumes: local copies first, then remote pieces in arrival order.
    fn exchange(&mut self, tag: u32, transfers: &[Transfer]) -> Result<Vec<Piece>> {
        let me = self.id;
        let mut pieces = Vec::new();
        for t in transfers.iter().filter(|t| t.src == me) {
            let (p, data) = self.read_rect(t.matrix, &t.rect)?;
            if t.dst == me {
                pieces.push(Piece {
                    slot: t.slot,
                    matrix: t.matrix,
                    rect: t.rect,
                    panel: t.panel,
                    values: crate::precision::decode_all(&data, p),
                });
            } else {
                let payload = encode_piece(t.slot, t.matrix, &t.rect, t.panel, p, &data);
                self.endpoint.send(EndpointId::Worker(t.dst), MessageKind::Data, tag, payload)?;
            }
        }
        let expected = transfers.iter().filter(|t| t.dst == me && t.src != me).count();
        for m in self.collect(tag, expected)? {
            pieces.push(decode_piece(&m.payload)?);
        }
        Ok(pieces)
    }

    fn replica_view(&self, id: MatrixId) -> Result<&[u8]> {
        let d = self.desc(id)?;
        match self.replicas.get(&id) {
            Some(r) if r.state == ReplicaState::Valid && r.version == d.version => Ok(r.buf.as_slice()),
            Some(r) if r.state == ReplicaState::Pending => Err(Error::ReplicaPending(id.0)),
            Some(_) => Err(Error::ReplicaStale(id.0)),
            None => Err(Error::NoReplica(id.0)),
        }
    }

    /// Dense rows `rows` x all columns of `id`, from pieces of `slot` or the replica.
    fn dense_rows(&self, id: MatrixId, slot: u8, rows: &IndexMap, pieces: &[Piece], replicated: &[MatrixId]) -> Result<Vec<f64>> {
        let d = self.desc(id)?;
        let cols = d.cols;
        let mut out = vec![0.0; rows.len() * cols];
        if replicated.contains(&id) {
            let buf = self.replica_view(id)?;
            for &(s, n) in rows.intervals() {
                for i in s..s + n {
                    let li = rows.local(i).unwrap();
                    for j in 0..cols {
                        out[li * cols + j] = read_element(buf, d.precision, i * cols + j);
                    }
                }
            }
        } else {
            for p in pieces.iter().filter(|p| p.slot == slot && p.matrix == id) {
                let r = &p.rect;
                for i in r.row_start..r.row_end() {
                    let li = rows.local(i).expect("piece row within requested rows");
                    let src = &p.values[(i - r.row_start) * r.col_count..(i - r.row_start + 1) * r.col_count];
                    out[li * cols + r.col_start..li * cols + r.col_end()].copy_from_slice(src);
                }
            }
        }
        Ok(out)
    }

    /// Values of `src` over `extent`, assembled from pieces or the replica.
    fn aligned_values(&self, src: MatrixId, extent: &TileExtent, pieces: &[Piece], replicated: &[MatrixId]) -> Result<Vec<f64>> {
        let d = self.desc(src)?;
        let mut out = vec![0.0; extent.len()];
        if replicated.contains(&src) {
            let buf = self.replica_view(src)?;
            for i in extent.row_start..extent.row_end() {
                for j in extent.col_start..extent.col_end() {
                    out[extent.local_index(i, j)] = read_element(buf, d.precision, i * d.cols + j);
                }
            }
        } else {
            for p in pieces.iter().filter(|p| p.matrix == src && extent.intersect(&p.rect) == Some(p.rect)) {
                let r = &p.rect;
                for i in r.row_start..r.row_end() {
                    for j in r.col_start..r.col_end() {
                        out[extent.local_index(i, j)] = p.values[r.local_index(i, j)];
                    }
                }
            }
        }
        Ok(out)
    }

    fn transfers_unless_replicated(&self, id: MatrixId, replicated: &[MatrixId], t: Vec<Transfer>) -> Vec<Transfer> {
        if replicated.contains(&id) {
            Vec::new()
        } else {
            t
        }
    }

    fn record_compute(&self, elements: usize) {
        self.fabric.record_compute(EndpointId::Worker(self.id), elements as u64);
    }

    /// Rewrites every owned tile of `id` through `f(extent, values)`.
    fn update_tiles(&mut self, id: MatrixId, mut f: impl FnMut(&TileExtent, &mut Vec<f64>) -> Result<()>) -> Result<()> {
        let p = self.desc(id)?.precision;
        let mut tiles = self.store.remove(id);
        let mut res = Ok(());
        for t in tiles.iter_mut() {
            let mut vals = values_of(t.buf.as_slice(), p);
            if let Err(e) = f(&t.extent, &mut vals) {
                res = Err(e);
                break;
            }
            store_values(t.buf.as_mut_slice(), p, &vals);
        }
        self.store.insert(id, tiles);
        res
    }

    // ---- kernels -------------------------------------------------------

    fn reshape(&mut self, id: MatrixId, precision: Precision, layout: &Layout, tag: u32) -> Result<()> {
        let old = self.desc(id)?.clone();
        let group = crate::layout::worker_range(self.workers);
        layout.validate(old.rows, old.cols, &group).map_err(Error::InvalidLayout)?;
        let new = MatrixDescriptor { precision, layout: layout.clone(), ..old.clone() };
        let transfers = plan::plan_aligned(&old, &new, 0);
        let pieces = self.exchange(tag, &transfers)?;
        let mut tiles = self.alloc_tiles(layout, precision)?;
        for t in tiles.iter_mut() {
            let vals = self.aligned_values(id, &t.extent, &pieces, &[])?;
            store_values(t.buf.as_mut_slice(), precision, &vals);
        }
        for t in self.store.remove(id) {
            self.pool.free(t.buf);
        }
        self.store.insert(id, tiles);
        self.descriptors.insert(id, new);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm(
        &mut self,
        a: MatrixId,
        b: MatrixId,
        c: MatrixId,
        alpha: f64,
        beta: f64,
        trans_a: bool,
        trans_b: bool,
        order: Accumulation,
        replicated: &[MatrixId],
        tag: u32,
    ) -> Result<()> {
        let (da, db, dc) = (self.desc(a)?.clone(), self.desc(b)?.clone(), self.desc(c)?.clone());
        let plan = GemmPlan::new(&da, &db, &dc, trans_a, trans_b, replicated, DEFAULT_PANEL);
        let kb = if trans_b { db.cols } else { db.rows };
        if plan.k != kb || plan.m != dc.rows || plan.n != dc.cols {
            return Err(Error::ShapeMismatch(format!(
                "gemm op(A) {}x{}, op(B) {}x{}, C {}x{}",
                plan.m, plan.k, kb, plan.n, dc.rows, dc.cols
            )));
        }
        let pieces = self.exchange(tag, &plan.transfers)?;
        if self.store.tiles(c).is_empty() {
            return Ok(());
        }
        let k = plan.k;
        let (rows, cols) = plan::owned_spans(&dc, self.id);
        let a_rows = IndexMap::new(rows);
        let b_cols = IndexMap::new(cols);
        let mut a_dense = vec![0.0; a_rows.len() * k];
        let mut bt_dense = vec![0.0; b_cols.len() * k];
        self.fill_operand(&da, SLOT_A, trans_a, &a_rows, k, &pieces, replicated, &mut a_dense, true)?;
        self.fill_operand(&db, SLOT_B, trans_b, &b_cols, k, &pieces, replicated, &mut bt_dense, false)?;

        let panel_order: Option<Vec<usize>> = match order {
            Accumulation::AscendingK => None,
            Accumulation::ArrivalOrder => {
                let panels = plan.panels();
                let mut last = vec![0usize; panels];
                for (pos, p) in pieces.iter().enumerate() {
                    last[p.panel as usize] = last[p.panel as usize].max(pos);
                }
                let mut idx: Vec<usize> = (0..panels).collect();
                idx.sort_by_key(|&p| (last[p], p));
                Some(idx)
            }
        };
        let cp = ComputePrecision::of(&[da.precision, db.precision, dc.precision]);
        let width = plan.panel_width;
        let work: usize = self.store.tiles(c).iter().map(|t| 2 * t.extent.len() * k).sum();
        fn run<T: Real>(
            a: &[f64],
            bt: &[f64],
            a_rows: IndexMap,
            b_cols: IndexMap,
            k: usize,
            w: &mut Worker,
            c: MatrixId,
            alpha: f64,
            beta: f64,
            order: Option<(&[usize], usize)>,
        ) -> Result<()> {
            let ops = GemmOperands::<T> { a: local::to_real(a), a_rows, bt: local::to_real(bt), b_cols, k };
            w.update_tiles(c, |e, vals| {
                ops.tile(e, vals, alpha, beta, order);
                Ok(())
            })
        }
        let order_ref = panel_order.as_deref().map(|o| (o, width));
        with_real!(cp, run::<T>(&a_dense, &bt_dense, a_rows, b_cols, k, self, c, alpha, beta, order_ref))?;
        self.record_compute(work);
        Ok(())
    }

    /// Fills a dense operand laid out as `[local index][k]`. For A the local
    /// index is an op(A) row; for B it is an op(B) column.
    #[allow(clippy::too_many_arguments)]
    fn fill_operand(
        &self,
        d: &MatrixDescriptor,
        slot: u8,
        trans: bool,
        map: &IndexMap,
        k: usize,
        pieces: &[Piece],
        replicated: &[MatrixId],
        out: &mut [f64],
        is_a: bool,
    ) -> Result<()> {
        // Storage (i, j) -> (local index, k index).
        let place = |i: usize, j: usize| -> Option<(usize, usize)> {
            let (idx, kk) = match (is_a, trans) {
                (true, false) => (i, j),
                (true, true) => (j, i),
                (false, false) => (j, i),
                (false, true) => (i, j),
            };
            map.local(idx).map(|l| (l, kk))
        };
        if replicated.contains(&d.id) {
            let buf = self.replica_view(d.id)?;
            for &(s, n) in map.intervals() {
                for g in s..s + n {
                    let l = map.local(g).unwrap();
                    for kk in 0..k {
                        let (i, j) = match (is_a, trans) {
                            (true, false) | (false, true) => (g, kk),
                            _ => (kk, g),
                        };
                        out[l * k + kk] = read_element(buf, d.precision, i * d.cols + j);
                    }
                }
            }
            return Ok(());
        }
        for p in pieces.iter().filter(|p| p.slot == slot && p.matrix == d.id) {
            let r = &p.rect;
            for i in r.row_start..r.row_end() {
                for j in r.col_start..r.col_end() {
                    let (l, kk) = place(i, j).expect("piece within operand window");
                    out[l * k + kk] = p.values[r.local_index(i, j)];
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn row_col_sum(
        &mut self,
        a: MatrixId,
        row_acc: MatrixId,
        col_acc: MatrixId,
        alpha: f64,
        deterministic: bool,
        replicated: &[MatrixId],
        tag: u32,
    ) -> Result<()> {
        let (da, dr, dcol) = (self.desc(a)?.clone(), self.desc(row_acc)?.clone(), self.desc(col_acc)?.clone());
        if dr.rows != da.rows || dr.cols != 1 || dcol.rows != 1 || dcol.cols != da.cols {
            return Err(Error::ShapeMismatch(format!(
                "row/col sum of {}x{} into {}x{} and {}x{}",
                da.rows, da.cols, dr.rows, dr.cols, dcol.rows, dcol.cols
            )));
        }
        let cp = ComputePrecision::of(&[da.precision, dr.precision, dcol.precision]);
        if deterministic {
            with_real!(cp, row_col_sum_ordered::<T>(self, &da, &dr, &dcol, alpha, replicated, tag))
        } else {
            with_real!(cp, row_col_sum_arrival::<T>(self, &da, &dr, &dcol, alpha, tag))
        }
    }

    fn elementwise(
        &mut self,
        op: EwOp,
        dst: MatrixId,
        src: Option<MatrixId>,
        scalar: f64,
        replicated: &[MatrixId],
        tag: u32,
    ) -> Result<()> {
        let dd = self.desc(dst)?.clone();
        let mut precisions = vec![dd.precision];
        let pieces = match (op.is_binary(), src) {
            (true, Some(s)) => {
                let ds = self.desc(s)?.clone();
                if (ds.rows, ds.cols) != (dd.rows, dd.cols) {
                    return Err(Error::ShapeMismatch(format!("{}x{} vs {}x{}", ds.rows, ds.cols, dd.rows, dd.cols)));
                }
                precisions.push(ds.precision);
                let t = self.transfers_unless_replicated(s, replicated, plan::plan_aligned(&ds, &dd, 0));
                self.exchange(tag, &t)?
            }
            (true, None) => return Err(Error::ShapeMismatch("binary elementwise op without a source".into())),
            (false, _) => Vec::new(),
        };
        let cp = ComputePrecision::of(&precisions);
        let sources: Vec<Option<Vec<f64>>> = match src.filter(|_| op.is_binary()) {
            Some(s) => self
                .store
                .tiles(dst)
                .iter()
                .map(|t| self.aligned_values(s, &t.extent, &pieces, replicated).map(Some))
                .collect::<Result<_>>()?,
            None => vec![None; self.store.tiles(dst).len()],
        };
        let mut i = 0;
        let mut work = 0;
        self.update_tiles(dst, |_, vals| {
            let s = sources[i].as_deref();
            i += 1;
            work += vals.len();
            match cp {
                ComputePrecision::Single => local::elementwise::<f32>(op, vals, s, scalar),
                ComputePrecision::Double => local::elementwise::<f64>(op, vals, s, scalar),
            }
            Ok(())
        })?;
        self.record_compute(work);
        Ok(())
    }

    fn softmax(&mut self, id: MatrixId, replicated: &[MatrixId], tag: u32) -> Result<()> {
        let d = self.desc(id)?.clone();
        let t = self.transfers_unless_replicated(id, replicated, plan::plan_rows(&d, &d, 0, |e| (e.row_start, e.row_count)));
        let pieces = self.exchange(tag, &t)?;
        let (rows, _) = plan::owned_spans(&d, self.id);
        let rows = IndexMap::new(rows);
        let mut dense = self.dense_rows(id, 0, &rows, &pieces, replicated)?;
        let cols = d.cols;
        for r in dense.chunks_mut(cols.max(1)) {
            match d.precision.compute() {
                ComputePrecision::Single => local::softmax_row::<f32>(r),
                ComputePrecision::Double => local::softmax_row::<f64>(r),
            }
        }
        self.record_compute(dense.len() * 3);
        self.update_tiles(id, |e, vals| {
            for i in e.row_start..e.row_end() {
                let li = rows.local(i).unwrap();
                for j in e.col_start..e.col_end() {
                    vals[e.local_index(i, j)] = dense[li * cols + j];
                }
            }
            Ok(())
        })
    }

    fn im2col(&mut self, input: MatrixId, patches: MatrixId, g: &ConvGeometry, replicated: &[MatrixId], tag: u32) -> Result<()> {
        g.validate()?;
        let (di, dp) = (self.desc(input)?.clone(), self.desc(patches)?.clone());
        let positions = g.positions();
        if (di.rows, di.cols) != (g.n, g.c * g.h * g.w) || (dp.rows, dp.cols) != (g.n * positions, g.patch_len()) {
            return Err(Error::Geometry(format!(
                "input {}x{} / patches {}x{} inconsistent with {g:?}",
                di.rows, di.cols, dp.rows, dp.cols
            )));
        }
        let rows_for = |e: &TileExtent| {
            let first = e.row_start / positions;
            let last = (e.row_end() - 1) / positions;
            (first, last - first + 1)
        };
        let t = self.transfers_unless_replicated(input, replicated, plan::plan_rows(&di, &dp, 0, rows_for));
        let pieces = self.exchange(tag, &t)?;
        let spans = plan::merge_intervals(dp.layout.tiles_of(self.id).map(|(_, e)| rows_for(e)).collect());
        let samples = IndexMap::new(spans);
        let dense = self.dense_rows(input, 0, &samples, &pieces, replicated)?;
        let (in_cols, rs, out_w) = (di.cols, g.r * g.s, g.out_w());
        let mut work = 0;
        self.update_tiles(patches, |e, vals| {
            for row in e.row_start..e.row_end() {
                let n = row / positions;
                let pos = row % positions;
                let (oy, ox) = (pos / out_w, pos % out_w);
                let base = samples.local(n).unwrap() * in_cols;
                for col in e.col_start..e.col_end() {
                    let (ch, rem) = (col / rs, col % rs);
                    let (ry, sx) = (rem / g.s, rem % g.s);
                    let iy = (oy * g.stride + ry) as isize - g.pad as isize;
                    let ix = (ox * g.stride + sx) as isize - g.pad as isize;
                    let v = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                        dense[base + ch * g.h * g.w + iy as usize * g.w + ix as usize]
                    } else {
                        0.0
                    };
                    vals[e.local_index(row, col)] = v;
                }
            }
            work += e.len();
            Ok(())
        })?;
        self.record_compute(work);
        Ok(())
    }

    fn conv_scatter(&mut self, columns: MatrixId, output: MatrixId, g: &ConvGeometry, replicated: &[MatrixId], tag: u32) -> Result<()> {
        g.validate()?;
        let (dc, dout) = (self.desc(columns)?.clone(), self.desc(output)?.clone());
        let positions = g.positions();
        if (dc.rows, dc.cols) != (g.n * positions, g.k) || (dout.rows, dout.cols) != (g.n, g.k * positions) {
            return Err(Error::Geometry(format!(
                "columns {}x{} / output {}x{} inconsistent with {g:?}",
                dc.rows, dc.cols, dout.rows, dout.cols
            )));
        }
        let rows_for = |e: &TileExtent| (e.row_start * positions, e.row_count * positions);
        let t = self.transfers_unless_replicated(columns, replicated, plan::plan_rows(&dc, &dout, 0, rows_for));
        let pieces = self.exchange(tag, &t)?;
        let spans = plan::merge_intervals(dout.layout.tiles_of(self.id).map(|(_, e)| rows_for(e)).collect());
        let rows = IndexMap::new(spans);
        let dense = self.dense_rows(columns, 0, &rows, &pieces, replicated)?;
        let k = g.k;
        self.update_tiles(output, |e, vals| {
            for n in e.row_start..e.row_end() {
                for col in e.col_start..e.col_end() {
                    let (kk, pos) = (col / positions, col % positions);
                    let li = rows.local(n * positions + pos).unwrap();
                    vals[e.local_index(n, col)] = dense[li * k + kk];
                }
            }
            Ok(())
        })
    }

    fn cast(&mut self, src: MatrixId, dst: MatrixId, replicated: &[MatrixId], tag: u32) -> Result<()> {
        let (ds, dd) = (self.desc(src)?.clone(), self.desc(dst)?.clone());
        if (ds.rows, ds.cols) != (dd.rows, dd.cols) {
            return Err(Error::ShapeMismatch(format!("cast {}x{} into {}x{}", ds.rows, ds.cols, dd.rows, dd.cols)));
        }
        let t = self.transfers_unless_replicated(src, replicated, plan::plan_aligned(&ds, &dd, 0));
        let pieces = self.exchange(tag, &t)?;
        let values: Vec<Vec<f64>> =
            self.store.tiles(dst).iter().map(|t| self.aligned_values(src, &t.extent, &pieces, replicated)).collect::<Result<_>>()?;
        let mut i = 0;
        self.update_tiles(dst, |_, vals| {
            vals.copy_from_slice(&values[i]);
            i += 1;
            Ok(())
        })
    }

    fn fill(&mut self, id: MatrixId, seed: u64, lo: f64, hi: f64) -> Result<()> {
        let cols = self.desc(id)?.cols;
        self.update_tiles(id, |e, vals| {
            for i in e.row_start..e.row_end() {
                for j in e.col_start..e.col_end() {
                    vals[e.local_index(i, j)] = local::fill_value(seed, (i * cols + j) as u64, lo, hi);
                }
            }
            Ok(())
        })
    }

    // ---- replication ---------------------------------------------------

    /// Installs a full local copy directly, bypassing the fabric.
    pub fn store_replica(&mut self, id: MatrixId, payload: &[u8], version: u64) -> Result<()> {
        let d = self.desc(id)?;
        if payload.len() != d.byte_len() {
            return Err(Error::ShapeMismatch(format!("replica of {id} needs {} bytes, got {}", d.byte_len(), payload.len())));
        }
        if let Some(r) = self.replicas.get(&id) {
            if r.version > version {
                return Err(Error::VersionRegression { matrix: id.0, have: r.version, got: version });
            }
        }
        let mut buf = self.replica_buffer(id, payload.len())?;
        buf.as_mut_slice().copy_from_slice(payload);
        self.replicas.insert(id, ReplicaEntry { matrix: id, version, state: ReplicaState::Valid, buf, received: 0, expected: 0, tag: 0 });
        Ok(())
    }

    /// Returns the replica's bytes if it is valid at the matrix's current version.
    pub fn read_replica(&self, id: MatrixId) -> Result<&[u8]> {
        self.replica_view(id)
    }

    fn replica_buffer(&mut self, id: MatrixId, bytes: usize) -> Result<PoolBuffer> {
        match self.replicas.remove(&id) {
            Some(r) if r.buf.len() == bytes => Ok(r.buf),
            Some(r) => {
                self.pool.free(r.buf);
                self.alloc_tile(bytes)
            }
            None => self.alloc_tile(bytes),
        }
    }

    fn send_status(&self, tag: u32, ok: bool) -> Result<()> {
        let payload = completion(if ok { STATUS_OK } else { STATUS_ERR }, &[]);
        self.endpoint.send(EndpointId::Master, MessageKind::Completion, tag, payload)?;
        Ok(())
    }

    /// Creates a Pending entry for `version` holding this worker's own tiles.
    fn ensure_replica(&mut self, id: MatrixId, version: u64, tag: u32) -> Result<()> {
        if let Some(r) = self.replicas.get(&id) {
            if r.version >= version {
                return Ok(());
            }
        }
        let d = self.desc(id)?.clone();
        let mut buf = self.replica_buffer(id, d.byte_len())?;
        let bytes = d.precision.bytes();
        for t in self.store.tiles(id) {
            let e = &t.extent;
            for i in e.row_start..e.row_end() {
                let src = e.local_index(i, e.col_start) * bytes;
                let dst = (i * d.cols + e.col_start) * bytes;
                buf.as_mut_slice()[dst..dst + e.col_count * bytes].copy_from_slice(&t.buf.as_slice()[src..src + e.col_count * bytes]);
            }
        }
        let expected = d.byte_len() - d.owned_bytes(self.id);
        let mut entry = ReplicaEntry { matrix: id, version, state: ReplicaState::Pending, buf, received: 0, expected, tag };
        if expected == 0 {
            entry.state = ReplicaState::Valid;
            self.fabric.core.trace(self.id, TraceKind::ReplicaValid { matrix: id, version });
            self.send_status(tag, true)?;
        }
        self.replicas.insert(id, entry);
        Ok(())
    }

    fn start_replication(&mut self, id: MatrixId, version: u64, chunk: usize, tag: u32) -> Result<()> {
        let d = self.desc(id)?;
        if d.version != version {
            return Err(Error::VersionRegression { matrix: id.0, have: d.version, got: version });
        }
        let owns = !self.store.tiles(id).is_empty();
        self.fabric.core.trace(self.id, TraceKind::ReplicationStarted { matrix: id, version });
        self.ensure_replica(id, version, tag)?;
        let queued = self.jobs.iter().any(|j| j.matrix == id && j.version == version);
        if owns && self.workers > 1 && !queued {
            self.jobs.push_back(PushJob { matrix: id, version, tag, chunk: chunk.max(1), tile: 0, offset: 0 });
        }
        Ok(())
    }

    /// Pushes at most one chunk of the oldest in-flight job to every peer.
    pub fn progress_job(&mut self) -> Result<()> {
        let Some(job) = self.jobs.front() else { return Ok(()) };
        let (id, version, tag) = (job.matrix, job.version, job.tag);
        let Some(d) = self.descriptors.get(&id).cloned() else {
            self.jobs.pop_front();
            return Ok(());
        };
        let elem = d.precision.bytes();
        let tiles = self.store.tiles(id);
        let job = self.jobs.front_mut().unwrap();
        let Some(tile) = tiles.get(job.tile) else {
            self.jobs.pop_front();
            return Ok(());
        };
        let chunk = (job.chunk / elem).max(1) * elem;
        let start = job.offset;
        let end = (start + chunk).min(tile.buf.len());
        let prefix: usize = d.layout.tiles[..tile.index].iter().map(|(e, _)| e.len() * elem).sum();
        let payload = encode_chunk(id, version, (prefix + start) as u64, &tile.buf.as_slice()[start..end]);
        if end == tile.buf.len() {
            job.tile += 1;
            job.offset = 0;
        } else {
            job.offset = end;
        }
        let done = job.tile >= tiles.len();
        for w in 0..self.workers as u32 {
            if w != self.id.0 {
                self.endpoint.send(EndpointId::Worker(WorkerId(w)), MessageKind::Data, tag, payload.clone())?;
            }
        }
        self.fabric.core.trace(self.id, TraceKind::ChunkSent { matrix: id, version, bytes: end - start });
        if done {
            self.jobs.pop_front();
        }
        Ok(())
    }

    fn drain_replication(&mut self, id: MatrixId, version: u64) -> Result<()> {
        while let Some(pos) = self.jobs.iter().position(|j| j.matrix == id && j.version == version) {
            if pos != 0 {
                let job = self.jobs.remove(pos).unwrap();
                self.jobs.push_front(job);
            }
            self.progress_job()?;
        }
        Ok(())
    }

    fn apply_chunk(&mut self, msg: &Message) -> Result<()> {
        let (id, version, offset, data) = decode_chunk(&msg.payload)?;
        let Some(d) = self.descriptors.get(&id).cloned() else { return Ok(()) };
        if version < d.version {
            return Ok(());
        }
        self.ensure_replica(id, version, msg.tag)?;
        let entry = self.replicas.get_mut(&id).unwrap();
        if entry.version != version || entry.state != ReplicaState::Pending {
            return Ok(());
        }
        let elem = d.precision.bytes();
        let off = offset as usize;
        let mut tile_start = 0;
        let mut placed = false;
        for (e, _) in &d.layout.tiles {
            let tile_bytes = e.len() * elem;
            if off < tile_start + tile_bytes {
                let first = (off - tile_start) / elem;
                for (n, bytes) in data.chunks_exact(elem).enumerate() {
                    let local = first + n;
                    let (i, j) = (e.row_start + local / e.col_count, e.col_start + local % e.col_count);
                    let at = (i * d.cols + j) * elem;
                    entry.buf.as_mut_slice()[at..at + elem].copy_from_slice(bytes);
                }
                placed = true;
                break;
            }
            tile_start += tile_bytes;
        }
        if !placed {
            return Err(Error::Decode(format!("chunk offset {offset} outside {id}")));
        }
        entry.received += data.len();
        if entry.received >= entry.expected {
            entry.state = ReplicaState::Valid;
            let tag = entry.tag;
            self.fabric.core.trace(self.id, TraceKind::ReplicaValid { matrix: id, version });
            self.send_status(tag, true)?;
        }
        Ok(())
    }

    /// Source mutation: pending copies fail, valid copies go stale.
    fn invalidate_replica(&mut self, id: MatrixId) -> Result<()> {
        self.jobs.retain(|j| j.matrix != id);
        let Some(entry) = self.replicas.get_mut(&id) else { return Ok(()) };
        match entry.state {
            ReplicaState::Pending => {
                entry.state = ReplicaState::Failed;
                let (tag, version) = (entry.tag, entry.version);
                self.fabric.core.trace(self.id, TraceKind::ReplicationFailed { matrix: id, version });
                self.send_status(tag, false)?;
            }
            ReplicaState::Valid => entry.state = ReplicaState::Stale,
            _ => {}
        }
        Ok(())
    }
}

fn row_col_sum_ordered<T: Real>(
    w: &mut Worker,
    da: &MatrixDescriptor,
    dr: &MatrixDescriptor,
    dcol: &MatrixDescriptor,
    alpha: f64,
    replicated: &[MatrixId],
    tag: u32,
) -> Result<()> {
    let row_needs: Vec<(WorkerId, Vec<TileExtent>)> = plan::consumers(dr)
        .into_iter()
        .map(|c| {
            let (rows, _) = plan::owned_spans(dr, c);
            (c, rows.into_iter().map(|(s, n)| TileExtent::new(s, n, 0, da.cols)).collect())
        })
        .collect();
    let col_needs: Vec<(WorkerId, Vec<TileExtent>)> = plan::consumers(dcol)
        .into_iter()
        .map(|c| {
            let (_, cols) = plan::owned_spans(dcol, c);
            (c, cols.into_iter().map(|(s, n)| TileExtent::new(0, da.rows, s, n)).collect())
        })
        .collect();
    let mut transfers = plan::plan_fetch(da, 0, &row_needs, None);
    transfers.extend(plan::plan_fetch(da, 1, &col_needs, None));
    let transfers = w.transfers_unless_replicated(da.id, replicated, transfers);
    let pieces = w.exchange(tag, &transfers)?;

    let (rows, _) = plan::owned_spans(dr, w.id);
    let rows = IndexMap::new(rows);
    let dense_rows = w.dense_rows(da.id, 0, &rows, &pieces, replicated)?;
    let cols = da.cols;
    w.update_tiles(dr.id, |e, vals| {
        for i in e.row_start..e.row_end() {
            let li = rows.local(i).unwrap();
            let s: T = local::sum_ascending(dense_rows[li * cols..(li + 1) * cols].iter().copied());
            let idx = e.local_index(i, 0);
            vals[idx] = local::accumulate(vals[idx], alpha, s);
        }
        Ok(())
    })?;

    let (_, col_spans) = plan::owned_spans(dcol, w.id);
    let col_map = IndexMap::new(col_spans);
    let mut dense_cols = vec![0.0; col_map.len() * da.rows];
    if replicated.contains(&da.id) {
        let buf = w.replica_view(da.id)?;
        for &(s, n) in col_map.intervals() {
            for j in s..s + n {
                let lj = col_map.local(j).unwrap();
                for i in 0..da.rows {
                    dense_cols[lj * da.rows + i] = read_element(buf, da.precision, i * cols + j);
                }
            }
        }
    } else {
        for p in pieces.iter().filter(|p| p.slot == 1) {
            let r = &p.rect;
            for i in r.row_start..r.row_end() {
                for j in r.col_start..r.col_end() {
                    dense_cols[col_map.local(j).unwrap() * da.rows + i] = p.values[r.local_index(i, j)];
                }
            }
        }
    }
    let nrows = da.rows;
    w.update_tiles(dcol.id, |e, vals| {
        for j in e.col_start..e.col_end() {
            let lj = col_map.local(j).unwrap();
            let s: T = local::sum_ascending(dense_cols[lj * nrows..(lj + 1) * nrows].iter().copied());
            let idx = e.local_index(0, j);
            vals[idx] = local::accumulate(vals[idx], alpha, s);
        }
        Ok(())
    })?;
    w.record_compute(2 * da.len());
    Ok(())
}

/// Partial sums per A tile, accumulated into the owners' tiles in whatever
/// order they arrive.
fn row_col_sum_arrival<T: Real>(
    w: &mut Worker,
    da: &MatrixDescriptor,
    dr: &MatrixDescriptor,
    dcol: &MatrixDescriptor,
    alpha: f64,
    tag: u32,
) -> Result<()> {
    let me = w.id;
    let mut local_parts: Vec<Piece> = Vec::new();
    for t in w.store.tiles(da.id) {
        let e = t.extent;
        let vals = values_of(t.buf.as_slice(), da.precision);
        let row_sums: Vec<f64> = (0..e.row_count)
            .map(|r| local::sum_ascending::<T>(vals[r * e.col_count..(r + 1) * e.col_count].iter().copied()).to_f64())
            .collect();
        let col_sums: Vec<f64> =
            (0..e.col_count).map(|c| local::sum_ascending::<T>((0..e.row_count).map(|r| vals[r * e.col_count + c])).to_f64()).collect();
        let row_rect = TileExtent::new(e.row_start, e.row_count, 0, 1);
        let col_rect = TileExtent::new(0, 1, e.col_start, e.col_count);
        for (slot, acc, rect, sums) in [(2u8, dr, row_rect, &row_sums), (3u8, dcol, col_rect, &col_sums)] {
            for (tile, owner) in &acc.layout.tiles {
                let Some(x) = tile.intersect(&rect) else { continue };
                let part: Vec<f64> = if slot == 2 {
                    (x.row_start..x.row_end()).map(|i| sums[i - e.row_start]).collect()
                } else {
                    (x.col_start..x.col_end()).map(|j| sums[j - e.col_start]).collect()
                };
                if *owner == me {
                    local_parts.push(Piece { slot, matrix: acc.id, rect: x, panel: 0, values: part });
                } else {
                    let data = crate::precision::encode_all(&part, Precision::Double);
                    let payload = encode_piece(slot, acc.id, &x, 0, Precision::Double, &data);
                    w.endpoint.send(EndpointId::Worker(*owner), MessageKind::Data, tag, payload)?;
                }
            }
        }
    }
    let mut expected = 0;
    for (e, src) in &da.layout.tiles {
        if *src == me {
            continue;
        }
        let row_rect = TileExtent::new(e.row_start, e.row_count, 0, 1);
        let col_rect = TileExtent::new(0, 1, e.col_start, e.col_count);
        expected += dr.layout.tiles_of(me).filter(|(_, t)| t.intersect(&row_rect).is_some()).count();
        expected += dcol.layout.tiles_of(me).filter(|(_, t)| t.intersect(&col_rect).is_some()).count();
    }
    let remote = w.collect(tag, expected)?;
    let mut parts = local_parts;
    for m in remote {
        parts.push(decode_piece(&m.payload)?);
    }
    for (acc, slot) in [(dr, 2u8), (dcol, 3u8)] {
        w.update_tiles(acc.id, |e, vals| {
            for p in parts.iter().filter(|p| p.slot == slot) {
                let Some(x) = e.intersect(&p.rect) else { continue };
                for i in x.row_start..x.row_end() {
                    for j in x.col_start..x.col_end() {
                        let idx = e.local_index(i, j);
                        vals[idx] = local::accumulate(vals[idx], alpha, T::from_f64(p.values[p.rect.local_index(i, j)]));
                    }
                }
            }
            Ok(())
        })?;
    }
    w.record_compute(2 * w.store.tiles(da.id).iter().map(|t| t.extent.len()).sum::<usize>());
    Ok(())
}
