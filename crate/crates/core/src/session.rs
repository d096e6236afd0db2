//! The master-side library surface.
//!
//! A `Session` owns the master endpoint and the authoritative descriptor
//! table. Each call becomes one Control broadcast; the master then waits for
//! a completion from every worker before returning, so worker tables never
//! drift from the master's.

use std::collections::{BTreeMap, HashMap};
use std::thread::JoinHandle;

use crate::descriptor::{MatrixDescriptor, MatrixId};
use crate::error::{Error, Result};
use crate::layout::{worker_range, Layout, WorkerId};
use crate::ops::{Envelope, Op, PipelineId};
use crate::pool::PoolStats;
use crate::precision::{decode_all, encode_all, Precision};
use crate::replication::{replication_tag, REPLICATION_TAG};
use crate::transport::{Endpoint, EndpointId, Fabric, FabricHandle, Message, MessageKind};
use crate::wire::{Reader, Writer};
use crate::worker::{Worker, STATUS_OK};

pub use crate::replication::{ReplicationHandle, ReplicationState};

pub use crate::worker::derived_seed;

pub const DEFAULT_CHUNK: usize = 1 << 20;

#[derive(Debug, Clone)]
pub struct SessionConfig {
    /// Fixed reduction orders everywhere (ascending k in gemm).
    pub deterministic: bool,
    /// Replication chunk size in bytes.
    pub chunk_bytes: usize,
    /// Per-worker cap on resident tile and replica bytes.
    pub memory_limit: Option<usize>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig { deterministic: true, chunk_bytes: DEFAULT_CHUNK, memory_limit: None }
    }
}

/// Handle to a distributed matrix. Valid while its session lives and the
/// matrix has not been destroyed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DistMatrix {
    pub id: MatrixId,
}

#[derive(Debug)]
struct Job {
    version: u64,
    tag: u32,
    ok: usize,
    failed: bool,
}

#[derive(Debug, Default)]
struct PipelineInfo {
    steps: usize,
    /// One entry per recorded write, in step order.
    writes: Vec<MatrixId>,
    replicated: Vec<MatrixId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerPoolStats {
    pub pool: PoolStats,
    pub resident_bytes: usize,
}

pub struct Session {
    endpoint: Endpoint,
    fabric: FabricHandle,
    workers: Vec<WorkerId>,
    descriptors: BTreeMap<MatrixId, MatrixDescriptor>,
    root_seed: u64,
    next_matrix: u64,
    next_pipeline: u64,
    next_tag: u32,
    config: SessionConfig,
    recording: Option<(PipelineId, PipelineInfo)>,
    pipelines: HashMap<PipelineId, PipelineInfo>,
    jobs: HashMap<MatrixId, Job>,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("workers", &self.workers.len()).field("matrices", &self.descriptors.len()).finish()
    }
}

impl Session {
    pub fn new(fabric: Fabric) -> Result<Session> {
        Session::with_config(fabric, SessionConfig::default())
    }

    /// Spawns one thread per worker endpoint of `fabric`.
    pub fn with_config(mut fabric: Fabric, config: SessionConfig) -> Result<Session> {
        let p = fabric.workers();
        if p == 0 {
            return Err(Error::NoWorkers);
        }
        let endpoint = fabric.take_master().ok_or_else(|| Error::EndpointClosed("master endpoint already taken".into()))?;
        let mut threads = Vec::with_capacity(p);
        for w in worker_range(p) {
            let ep = fabric.take_worker(w).ok_or_else(|| Error::EndpointClosed(format!("{w} endpoint already taken")))?;
            let limit = config.memory_limit;
            let handle = std::thread::Builder::new().name(format!("gridmath-{w}")).spawn(move || Worker::new(ep, limit).run())?;
            threads.push(handle);
        }
        Ok(Session {
            fabric: fabric.handle(),
            endpoint,
            workers: worker_range(p),
            descriptors: BTreeMap::new(),
            root_seed: 0,
            next_matrix: 1,
            next_pipeline: 1,
            next_tag: 1,
            config,
            recording: None,
            pipelines: HashMap::new(),
            jobs: HashMap::new(),
            threads,
        })
    }

    pub fn workers(&self) -> usize {
        self.workers.len()
    }

    pub fn worker_ids(&self) -> &[WorkerId] {
        &self.workers
    }

    pub fn fabric(&self) -> &FabricHandle {
        &self.fabric
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn deterministic(&self) -> bool {
        self.config.deterministic
    }

    pub fn set_deterministic(&mut self, on: bool) {
        self.config.deterministic = on;
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn descriptor(&self, m: DistMatrix) -> Result<&MatrixDescriptor> {
        self.descriptors.get(&m.id).ok_or(Error::UnknownMatrix(m.id.0))
    }

    pub fn matrices(&self) -> Vec<DistMatrix> {
        self.descriptors.keys().map(|&id| DistMatrix { id }).collect()
    }

    pub fn shape(&self, m: DistMatrix) -> Result<(usize, usize)> {
        self.descriptor(m).map(|d| (d.rows, d.cols))
    }

    // ---- message plumbing ---------------------------------------------

    fn alloc_tags(&mut self, n: u32) -> u32 {
        if self.next_tag.saturating_add(n) >= REPLICATION_TAG {
            self.next_tag = 1;
        }
        let t = self.next_tag;
        self.next_tag += n;
        t
    }

    fn handle_status(&mut self, msg: &Message) {
        let Some((_, job)) = self.jobs.iter_mut().find(|(_, j)| j.tag == msg.tag) else { return };
        if msg.payload.first() == Some(&STATUS_OK) {
            job.ok += 1;
        } else {
            job.failed = true;
        }
    }

    /// Waits for one completion per worker under `tag`, returning their bodies
    /// and any Data messages that arrived under the same tag.
    fn gather(&mut self, tag: u32) -> Result<(Vec<Vec<u8>>, Vec<Message>)> {
        let p = self.workers.len();
        let mut bodies: Vec<Option<Vec<u8>>> = vec![None; p];
        let mut errors = Vec::new();
        let mut data = Vec::new();
        let mut remaining = p;
        while remaining > 0 {
            let m = self.endpoint.recv()?;
            match m.kind {
                MessageKind::Completion if m.tag == tag => {
                    let EndpointId::Worker(w) = m.source else { continue };
                    let (status, body) = m.payload.split_first().ok_or_else(|| Error::Decode("empty completion".into()))?;
                    if *status != STATUS_OK {
                        errors.push(Error::Worker { worker: w, message: String::from_utf8_lossy(body).into_owned() });
                    }
                    bodies[w.index()] = Some(body.to_vec());
                    remaining -= 1;
                }
                MessageKind::Completion if m.tag & REPLICATION_TAG != 0 => self.handle_status(&m),
                MessageKind::Data if m.tag == tag => data.push(m),
                _ => {}
            }
        }
        if let Some(e) = errors.into_iter().next() {
            return Err(e);
        }
        Ok((bodies.into_iter().map(Option::unwrap_or_default).collect(), data))
    }

    fn replicated_for(&self, op: &Op) -> Vec<MatrixId> {
        let mut v: Vec<MatrixId> = op.reads().into_iter().filter(|&id| self.replica_ready(id)).collect();
        v.sort();
        v.dedup();
        v
    }

    fn replica_ready(&self, id: MatrixId) -> bool {
        match (self.jobs.get(&id), self.descriptors.get(&id)) {
            (Some(j), Some(d)) => !j.failed && j.ok == self.workers.len() && j.version == d.version,
            _ => false,
        }
    }

    fn after_write(&mut self, id: MatrixId) {
        if let Some(d) = self.descriptors.get_mut(&id) {
            d.version += 1;
        }
        if let Some(j) = self.jobs.get_mut(&id) {
            if j.ok < self.workers.len() {
                j.failed = true;
            }
        }
    }

    /// Broadcasts `op`, optionally sending per-worker Data right after, and
    /// waits for every worker to finish it.
    fn issue_with(&mut self, op: Op, tag: u32, data: Vec<(WorkerId, Vec<u8>)>) -> Result<(Vec<Vec<u8>>, Vec<Message>)> {
        let replicated = self.replicated_for(&op);
        let record = self.recording.as_ref().map(|(id, _)| *id);
        let env = Envelope { record, replicated: replicated.clone(), op: op.clone() };
        self.endpoint.broadcast_control(tag, &env.encode())?;
        for (w, payload) in data {
            self.endpoint.send(EndpointId::Worker(w), MessageKind::Data, tag, payload)?;
        }
        let out = self.gather(tag)?;
        for id in op.writes() {
            self.after_write(id);
        }
        if let (Some((_, info)), true) = (self.recording.as_mut(), op.recordable()) {
            info.steps += 1;
            info.writes.extend(op.writes());
            info.replicated.extend(replicated);
        }
        Ok(out)
    }

    pub(crate) fn issue(&mut self, op: Op) -> Result<Vec<Vec<u8>>> {
        let tag = self.alloc_tags(1);
        self.issue_with(op, tag, Vec::new()).map(|(b, _)| b)
    }

    fn forbid_recording(&self, what: &'static str) -> Result<()> {
        if self.recording.is_some() {
            return Err(Error::NotRecordable(what));
        }
        Ok(())
    }

    // ---- matrix lifecycle ---------------------------------------------

    pub fn create_matrix(&mut self, rows: usize, cols: usize, precision: Precision, layout: Layout) -> Result<DistMatrix> {
        self.forbid_recording("createMatrix")?;
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch(format!("empty matrix {rows}x{cols}")));
        }
        layout.validate(rows, cols, &self.workers).map_err(Error::InvalidLayout)?;
        let id = MatrixId(self.next_matrix);
        self.next_matrix += 1;
        let desc = MatrixDescriptor { id, rows, cols, precision, layout, version: 0 };
        self.define(desc)
    }

    fn define(&mut self, desc: MatrixDescriptor) -> Result<DistMatrix> {
        let id = desc.id;
        match self.issue(Op::DefineMatrix(desc.clone())) {
            Ok(_) => {
                self.descriptors.insert(id, desc);
                Ok(DistMatrix { id })
            }
            Err(e) => {
                // Roll back the workers that did allocate.
                self.descriptors.insert(id, desc);
                let _ = self.issue(Op::DestroyMatrix(id));
                self.descriptors.remove(&id);
                Err(e)
            }
        }
    }

    pub fn destroy(&mut self, m: DistMatrix) -> Result<()> {
        self.forbid_recording("destroy")?;
        self.descriptor(m)?;
        self.issue(Op::DestroyMatrix(m.id))?;
        self.descriptors.remove(&m.id);
        if let Some(j) = self.jobs.get_mut(&m.id) {
            if j.ok < self.workers.len() {
                j.failed = true;
            }
        }
        Ok(())
    }

    /// Scatters row-major storage bytes (already in the matrix precision).
    pub fn set_raw(&mut self, m: DistMatrix, bytes: &[u8]) -> Result<()> {
        self.forbid_recording("setData")?;
        let d = self.descriptor(m)?.clone();
        if bytes.len() != d.byte_len() {
            return Err(Error::ShapeMismatch(format!("{} expects {} bytes, got {}", m.id, d.byte_len(), bytes.len())));
        }
        let eb = d.precision.bytes();
        let mut data = Vec::with_capacity(d.layout.tiles.len());
        for (index, (e, owner)) in d.layout.tiles.iter().enumerate() {
            let mut w = Writer::new();
            w.u32(index as u32);
            for i in e.row_start..e.row_end() {
                let s = (i * d.cols + e.col_start) * eb;
                w.bytes(&bytes[s..s + e.col_count * eb]);
            }
            data.push((*owner, w.finish()));
        }
        let tag = self.alloc_tags(1);
        self.issue_with(Op::SetData(m.id), tag, data)?;
        Ok(())
    }

    /// Gathers row-major storage bytes.
    pub fn get_raw(&mut self, m: DistMatrix) -> Result<Vec<u8>> {
        self.forbid_recording("getData")?;
        let d = self.descriptor(m)?.clone();
        let tag = self.alloc_tags(1);
        let (_, msgs) = self.issue_with(Op::GetData(m.id), tag, Vec::new())?;
        let eb = d.precision.bytes();
        let mut out = vec![0u8; d.byte_len()];
        let mut seen = 0;
        for msg in msgs {
            let mut r = Reader::new(&msg.payload);
            let index = r.u32()? as usize;
            let (e, _) = d.layout.tiles.get(index).ok_or_else(|| Error::Decode(format!("tile index {index}")))?;
            let body = r.rest();
            if body.len() != e.len() * eb {
                return Err(Error::Decode(format!("tile {index} carries {} bytes", body.len())));
            }
            for (r, i) in (e.row_start..e.row_end()).enumerate() {
                let s = (i * d.cols + e.col_start) * eb;
                out[s..s + e.col_count * eb].copy_from_slice(&body[r * e.col_count * eb..(r + 1) * e.col_count * eb]);
            }
            seen += 1;
        }
        if seen != d.layout.tiles.len() {
            return Err(Error::Decode(format!("gathered {seen} of {} tiles", d.layout.tiles.len())));
        }
        Ok(out)
    }

    /// Scatters row-major values, rounding into the matrix precision.
    pub fn set_data(&mut self, m: DistMatrix, values: &[f64]) -> Result<()> {
        let d = self.descriptor(m)?;
        if values.len() != d.len() {
            return Err(Error::ShapeMismatch(format!("{} expects {} values, got {}", m.id, d.len(), values.len())));
        }
        let bytes = encode_all(values, d.precision);
        self.set_raw(m, &bytes)
    }

    pub fn get_data(&mut self, m: DistMatrix) -> Result<Vec<f64>> {
        let p = self.descriptor(m)?.precision;
        Ok(decode_all(&self.get_raw(m)?, p))
    }

    /// Moves `m` onto a new layout (any subset of the session's workers)
    /// and optionally a new precision.
    pub fn reshape(&mut self, m: DistMatrix, layout: Layout, precision: Option<Precision>) -> Result<()> {
        self.forbid_recording("reshape")?;
        let d = self.descriptor(m)?.clone();
        layout.validate(d.rows, d.cols, &self.workers).map_err(Error::InvalidLayout)?;
        let precision = precision.unwrap_or(d.precision);
        self.issue(Op::Reshape { id: m.id, precision, layout: layout.clone() })?;
        let nd = self.descriptors.get_mut(&m.id).unwrap();
        nd.layout = layout;
        nd.precision = precision;
        Ok(())
    }

    // ---- replication --------------------------------------------------

    pub fn replicate_async(&mut self, m: DistMatrix) -> Result<ReplicationHandle> {
        self.forbid_recording("replicate")?;
        let version = self.descriptor(m)?.version;
        let handle = ReplicationHandle { matrix: m.id, version };
        if let Some(j) = self.jobs.get(&m.id) {
            if j.version == version && !j.failed {
                return Ok(handle);
            }
        }
        let tag = self.alloc_tags(1);
        self.jobs.insert(m.id, Job { version, tag: replication_tag(tag), ok: 0, failed: false });
        let chunk = self.config.chunk_bytes;
        self.issue_with(Op::ReplicateStart { id: m.id, version, chunk }, tag, Vec::new())?;
        self.poll_statuses()?;
        Ok(handle)
    }

    pub fn replicate_sync(&mut self, m: DistMatrix) -> Result<()> {
        let h = self.replicate_async(m)?;
        self.wait(&h)
    }

    fn poll_statuses(&mut self) -> Result<()> {
        while let Some(m) = self.endpoint.try_recv()? {
            if m.kind == MessageKind::Completion && m.tag & REPLICATION_TAG != 0 {
                self.handle_status(&m);
            }
        }
        Ok(())
    }

    pub fn replication_state(&self, h: &ReplicationHandle) -> ReplicationState {
        match self.jobs.get(&h.matrix) {
            Some(j) if j.version == h.version => {
                if j.failed {
                    ReplicationState::Failed
                } else if j.ok == self.workers.len() {
                    ReplicationState::Done
                } else {
                    ReplicationState::InFlight
                }
            }
            // Superseded by a newer job or destroyed.
            _ => ReplicationState::Failed,
        }
    }

    /// Blocks until the job is Done; owners flush any unsent chunks first.
    pub fn wait(&mut self, h: &ReplicationHandle) -> Result<()> {
        match self.replication_state(h) {
            ReplicationState::Done => return Ok(()),
            ReplicationState::Failed => return Err(Error::ReplicationFailed(h.matrix.0)),
            ReplicationState::InFlight => {}
        }
        self.issue(Op::ReplicateDrain { id: h.matrix, version: h.version })?;
        let p = self.workers.len();
        loop {
            let j = &self.jobs[&h.matrix];
            if j.failed {
                return Err(Error::ReplicationFailed(h.matrix.0));
            }
            if j.ok == p {
                return Ok(());
            }
            let m = self.endpoint.recv()?;
            if m.kind == MessageKind::Completion && m.tag & REPLICATION_TAG != 0 {
                self.handle_status(&m);
            }
        }
    }

    /// Waits on the in-flight job of `m`, if any.
    pub fn wait_matrix(&mut self, m: DistMatrix) -> Result<()> {
        match self.jobs.get(&m.id) {
            Some(j) => {
                let h = ReplicationHandle { matrix: m.id, version: j.version };
                self.wait(&h)
            }
            None => Ok(()),
        }
    }

    /// Per-worker replica bytes of `m`; errors unless valid at the current version.
    pub fn read_replicas(&mut self, m: DistMatrix) -> Result<Vec<Vec<u8>>> {
        self.descriptor(m)?;
        self.issue(Op::ReadReplica(m.id))
    }

    // ---- seeds, recording, diagnostics --------------------------------

    /// Sends every worker its derived seed; returns them in rank order.
    pub fn distribute_seeds(&mut self, root: u64) -> Result<Vec<u64>> {
        self.forbid_recording("distributeSeeds")?;
        self.root_seed = root;
        let bodies = self.issue(Op::SetSeed(root))?;
        bodies.iter().map(|b| Reader::new(b).u64()).collect()
    }

    pub fn begin_record(&mut self) -> Result<PipelineId> {
        if self.recording.is_some() {
            return Err(Error::NestedRecording);
        }
        let id = PipelineId(self.next_pipeline);
        self.next_pipeline += 1;
        self.recording = Some((id, PipelineInfo::default()));
        Ok(id)
    }

    pub fn end_record(&mut self) -> Result<PipelineId> {
        let (id, mut info) = self.recording.take().ok_or(Error::NotRecording)?;
        info.replicated.sort();
        info.replicated.dedup();
        self.pipelines.insert(id, info);
        Ok(id)
    }

    pub fn is_recording(&self) -> bool {
        self.recording.is_some()
    }

    /// Re-runs a recorded pipeline with one Control message per worker.
    pub fn replay(&mut self, id: PipelineId) -> Result<()> {
        if matches!(self.recording, Some((r, _)) if r == id) {
            return Err(Error::NotRecording);
        }
        self.forbid_recording("replay")?;
        let info = self.pipelines.get(&id).ok_or(Error::UnknownPipeline(id.0))?;
        let (steps, writes, replicated) = (info.steps, info.writes.clone(), info.replicated.clone());
        if steps == 0 {
            return Ok(());
        }
        for r in &replicated {
            self.wait_matrix(DistMatrix { id: *r })?;
            if !self.replica_ready(*r) {
                return Err(Error::ReplicaStale(r.0));
            }
        }
        let tag = self.alloc_tags(steps as u32 + 1);
        let env = Envelope::new(Op::Replay(id));
        self.endpoint.broadcast_control(tag, &env.encode())?;
        self.gather(tag)?;
        for m in writes {
            self.after_write(m);
        }
        Ok(())
    }

    /// Compares the master's descriptor checksum with every worker's.
    pub fn check_metadata_consistency(&mut self) -> Result<bool> {
        let mine = self.descriptor_checksum();
        let bodies = self.issue(Op::Checksum)?;
        let mut ok = true;
        for b in bodies {
            ok &= Reader::new(&b).u32()? == mine;
        }
        Ok(ok)
    }

    pub fn descriptor_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for d in self.descriptors.values() {
            h.update(&d.encode());
        }
        h.finalize()
    }

    pub fn pool_stats(&mut self) -> Result<Vec<WorkerPoolStats>> {
        let bodies = self.issue(Op::PoolStats)?;
        bodies
            .iter()
            .map(|b| {
                let mut r = Reader::new(b);
                let pool = PoolStats { allocations_from_os: r.u64()?, reuses: r.u64()?, frees: r.u64()?, pooled_bytes: r.usize()? };
                Ok(WorkerPoolStats { pool, resident_bytes: r.usize()? })
            })
            .collect()
    }

    pub(crate) fn define_restored(&mut self, desc: MatrixDescriptor) -> Result<DistMatrix> {
        desc.layout.validate(desc.rows, desc.cols, &self.workers).map_err(Error::InvalidLayout)?;
        self.next_matrix = self.next_matrix.max(desc.id.0 + 1);
        self.define(desc)
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> Result<()> {
        if self.threads.is_empty() {
            return Ok(());
        }
        let tag = self.alloc_tags(1);
        let env = Envelope::new(Op::Shutdown);
        let sent = self.endpoint.broadcast_control(tag, &env.encode());
        let gathered = sent.and_then(|_| self.gather(tag).map(|_| ()));
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        gathered
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}
