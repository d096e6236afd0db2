//! Message fabric between the master and workers.
//!
//! One unbounded channel per destination endpoint gives FIFO delivery per
//! (source, destination) pair for every kind. Traffic counters are atomic and
//! readable from any thread. The simulated backend additionally charges every
//! message and compute step to an alpha-beta virtual clock.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender, TryRecvError};

use crate::descriptor::MatrixId;
use crate::error::{Error, Result};
use crate::layout::WorkerId;
use crate::ops::{Envelope, OpCode};
use crate::wire::{Reader, Writer};

pub const DEFAULT_MAX_FRAME: usize = 64 << 20;
pub const MAX_FRAME_ENV: &str = "GRIDMATH_MAX_FRAME";
const MASTER_RANK: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EndpointId {
    Master,
    Worker(WorkerId),
}

impl EndpointId {
    pub fn rank(self) -> u32 {
        match self {
            EndpointId::Master => MASTER_RANK,
            EndpointId::Worker(w) => w.0,
        }
    }

    pub fn from_rank(r: u32) -> Self {
        if r == MASTER_RANK {
            EndpointId::Master
        } else {
            EndpointId::Worker(WorkerId(r))
        }
    }

    fn slot(self) -> usize {
        match self {
            EndpointId::Master => 0,
            EndpointId::Worker(w) => w.index() + 1,
        }
    }
}

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EndpointId::Master => write!(f, "master"),
            EndpointId::Worker(w) => write!(f, "{w}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    Control = 0,
    Data = 1,
    Completion = 2,
}

impl MessageKind {
    pub const ALL: [MessageKind; 3] = [MessageKind::Control, MessageKind::Data, MessageKind::Completion];

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(MessageKind::Control),
            1 => Ok(MessageKind::Data),
            2 => Ok(MessageKind::Completion),
            k => Err(Error::Decode(format!("message kind {k}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub source: EndpointId,
    pub dest: EndpointId,
    pub tag: u32,
    pub payload: Vec<u8>,
}

impl Message {
    /// Frame: u8 kind, u32 source, u32 dest, u32 tag, u64 length, payload.
    pub fn encode_frame(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.kind as u8).u32(self.source.rank()).u32(self.dest.rank()).u32(self.tag);
        w.u64(self.payload.len() as u64).bytes(&self.payload);
        w.finish()
    }

    pub fn decode_frame(frame: &[u8]) -> Result<Message> {
        let mut r = Reader::new(frame);
        let kind = MessageKind::from_u8(r.u8()?)?;
        let source = EndpointId::from_rank(r.u32()?);
        let dest = EndpointId::from_rank(r.u32()?);
        let tag = r.u32()?;
        let len = r.usize()?;
        let payload = r.take(len)?.to_vec();
        r.expect_end()?;
        Ok(Message { kind, source, dest, tag, payload })
    }
}

/// Alpha-beta communication model plus a per-worker compute rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub latency: f64,
    pub inverse_bandwidth: f64,
    pub compute_rate: f64,
}

impl CostModel {
    pub fn new(latency: f64, inverse_bandwidth: f64, compute_rate: f64) -> Result<Self> {
        if !(latency >= 0.0 && inverse_bandwidth >= 0.0 && compute_rate > 0.0) {
            return Err(Error::Config(format!(
                "cost model needs alpha >= 0, beta >= 0, rate > 0 (got {latency}, {inverse_bandwidth}, {compute_rate})"
            )));
        }
        Ok(CostModel { latency, inverse_bandwidth, compute_rate })
    }

    pub fn message_time(&self, bytes: usize) -> f64 {
        self.latency + self.inverse_bandwidth * bytes as f64
    }
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { latency: 5e-6, inverse_bandwidth: 5e-10, compute_rate: 1e10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Backend {
    InProcess,
    Simulated(CostModel),
}

/// Integer event counts per endpoint, so the virtual clock does not depend on
/// the order in which concurrent senders charged it.
#[derive(Debug, Default)]
struct ClockSlot {
    messages: AtomicU64,
    bytes: AtomicU64,
    compute: AtomicU64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LinkStats {
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Default)]
struct LinkCounters {
    sent_messages: AtomicU64,
    sent_bytes: AtomicU64,
    recv_messages: AtomicU64,
    recv_bytes: AtomicU64,
}

/// Snapshot of the fabric's per-link counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FabricStats {
    pub sent: BTreeMap<(EndpointId, EndpointId, MessageKind), LinkStats>,
    pub received: BTreeMap<(EndpointId, EndpointId, MessageKind), LinkStats>,
}

impl FabricStats {
    fn sum<F: Fn(&(EndpointId, EndpointId, MessageKind)) -> bool>(
        map: &BTreeMap<(EndpointId, EndpointId, MessageKind), LinkStats>,
        f: F,
    ) -> LinkStats {
        map.iter()
            .filter(|(k, _)| f(k))
            .fold(LinkStats::default(), |acc, (_, s)| LinkStats { messages: acc.messages + s.messages, bytes: acc.bytes + s.bytes })
    }

    pub fn total(&self, kind: MessageKind) -> LinkStats {
        Self::sum(&self.sent, |k| k.2 == kind)
    }

    pub fn total_received(&self, kind: MessageKind) -> LinkStats {
        Self::sum(&self.received, |k| k.2 == kind)
    }

    pub fn to_endpoint(&self, dest: EndpointId, kind: MessageKind) -> LinkStats {
        Self::sum(&self.sent, |k| k.1 == dest && k.2 == kind)
    }

    pub fn link(&self, src: EndpointId, dest: EndpointId, kind: MessageKind) -> LinkStats {
        self.sent.get(&(src, dest, kind)).copied().unwrap_or_default()
    }

    /// Counter-wise difference `self - earlier`.
    pub fn since(&self, earlier: &FabricStats) -> FabricStats {
        let diff = |now: &BTreeMap<_, LinkStats>, then: &BTreeMap<_, LinkStats>| {
            now.iter()
                .map(|(k, s)| {
                    let t = then.get(k).copied().unwrap_or_default();
                    (*k, LinkStats { messages: s.messages - t.messages, bytes: s.bytes - t.bytes })
                })
                .filter(|(_, s)| s.messages > 0)
                .collect()
        };
        FabricStats { sent: diff(&self.sent, &earlier.sent), received: diff(&self.received, &earlier.received) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceKind {
    OpBegin { op: OpCode, tag: u32 },
    OpEnd { op: OpCode, tag: u32 },
    ReplicationStarted { matrix: MatrixId, version: u64 },
    ChunkSent { matrix: MatrixId, version: u64, bytes: usize },
    ReplicaValid { matrix: MatrixId, version: u64 },
    ReplicationFailed { matrix: MatrixId, version: u64 },
}

/// One entry of the global event trace; `seq` is a total order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub worker: WorkerId,
    pub kind: TraceKind,
}

pub(crate) struct FabricCore {
    senders: Vec<Sender<Message>>,
    links: Vec<LinkCounters>,
    clock: Vec<ClockSlot>,
    backend: Backend,
    max_frame: usize,
    tracing: AtomicBool,
    trace: Mutex<Vec<TraceEvent>>,
}

impl FabricCore {
    fn endpoints(&self) -> usize {
        self.senders.len()
    }

    fn link_index(&self, src: EndpointId, dst: EndpointId, kind: MessageKind) -> usize {
        (src.slot() * self.endpoints() + dst.slot()) * 3 + kind as usize
    }

    fn endpoint_of_slot(slot: usize) -> EndpointId {
        if slot == 0 {
            EndpointId::Master
        } else {
            EndpointId::Worker(WorkerId(slot as u32 - 1))
        }
    }

    fn check_endpoint(&self, e: EndpointId) -> Result<()> {
        if e.slot() >= self.endpoints() {
            return Err(Error::EndpointClosed(e.to_string()));
        }
        Ok(())
    }

    fn send(&self, msg: Message) -> Result<Receipt> {
        self.check_endpoint(msg.dest)?;
        if msg.payload.len() > self.max_frame {
            return Err(Error::FrameTooLarge { len: msg.payload.len(), max: self.max_frame });
        }
        if msg.kind == MessageKind::Control {
            Envelope::decode(&msg.payload)?;
        }
        let len = msg.payload.len() as u64;
        let (src, dst, kind) = (msg.source, msg.dest, msg.kind);
        self.senders[dst.slot()].send(msg).map_err(|_| Error::EndpointClosed(dst.to_string()))?;
        let link = &self.links[self.link_index(src, dst, kind)];
        link.sent_messages.fetch_add(1, Ordering::Relaxed);
        link.sent_bytes.fetch_add(len, Ordering::Relaxed);
        if matches!(self.backend, Backend::Simulated(_)) {
            for e in [src, dst] {
                let c = &self.clock[e.slot()];
                c.messages.fetch_add(1, Ordering::Relaxed);
                c.bytes.fetch_add(len, Ordering::Relaxed);
            }
        }
        Ok(Receipt { dest: dst, bytes: len as usize })
    }

    fn note_received(&self, msg: &Message) {
        let link = &self.links[self.link_index(msg.source, msg.dest, msg.kind)];
        link.recv_messages.fetch_add(1, Ordering::Relaxed);
        link.recv_bytes.fetch_add(msg.payload.len() as u64, Ordering::Relaxed);
    }

    pub(crate) fn record_compute(&self, e: EndpointId, elements: u64) {
        if matches!(self.backend, Backend::Simulated(_)) {
            self.clock[e.slot()].compute.fetch_add(elements, Ordering::Relaxed);
        }
    }

    pub(crate) fn trace(&self, worker: WorkerId, kind: TraceKind) {
        if self.tracing.load(Ordering::Relaxed) {
            let mut t = self.trace.lock().unwrap();
            let seq = t.len() as u64;
            t.push(TraceEvent { seq, worker, kind });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub dest: EndpointId,
    pub bytes: usize,
}

/// Shared handle to the fabric; cheap to clone.
#[derive(Clone)]
pub struct FabricHandle {
    pub(crate) core: Arc<FabricCore>,
}

impl fmt::Debug for FabricHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FabricHandle").field("workers", &self.workers()).field("backend", &self.core.backend).finish()
    }
}

impl FabricHandle {
    pub fn workers(&self) -> usize {
        self.core.endpoints() - 1
    }

    pub fn backend(&self) -> Backend {
        self.core.backend
    }

    pub fn max_frame(&self) -> usize {
        self.core.max_frame
    }

    pub fn stats(&self) -> FabricStats {
        let n = self.core.endpoints();
        let mut out = FabricStats::default();
        for s in 0..n {
            for d in 0..n {
                for kind in MessageKind::ALL {
                    let (src, dst) = (FabricCore::endpoint_of_slot(s), FabricCore::endpoint_of_slot(d));
                    let c = &self.core.links[self.core.link_index(src, dst, kind)];
                    let sent = LinkStats { messages: c.sent_messages.load(Ordering::Relaxed), bytes: c.sent_bytes.load(Ordering::Relaxed) };
                    let recv = LinkStats { messages: c.recv_messages.load(Ordering::Relaxed), bytes: c.recv_bytes.load(Ordering::Relaxed) };
                    if sent.messages > 0 {
                        out.sent.insert((src, dst, kind), sent);
                    }
                    if recv.messages > 0 {
                        out.received.insert((src, dst, kind), recv);
                    }
                }
            }
        }
        out
    }

    /// Virtual wall time: the maximum over endpoints of modeled compute plus
    /// serialized link time for every message sent or received there.
    pub fn simulated_elapsed(&self) -> Result<f64> {
        let Backend::Simulated(cost) = self.core.backend else {
            return Err(Error::NotSimulated);
        };
        Ok(self
            .core
            .clock
            .iter()
            .map(|c| {
                c.messages.load(Ordering::Relaxed) as f64 * cost.latency
                    + c.bytes.load(Ordering::Relaxed) as f64 * cost.inverse_bandwidth
                    + c.compute.load(Ordering::Relaxed) as f64 / cost.compute_rate
            })
            .fold(0.0, f64::max))
    }

    pub fn record_compute(&self, e: EndpointId, elements: u64) {
        self.core.record_compute(e, elements);
    }

    /// Zeroes the virtual clock; traffic counters are kept.
    pub fn reset_clock(&self) {
        for c in &self.core.clock {
            c.messages.store(0, Ordering::Relaxed);
            c.bytes.store(0, Ordering::Relaxed);
            c.compute.store(0, Ordering::Relaxed);
        }
    }

    pub fn set_tracing(&self, on: bool) {
        self.core.tracing.store(on, Ordering::Relaxed);
    }

    pub fn trace_events(&self) -> Vec<TraceEvent> {
        self.core.trace.lock().unwrap().clone()
    }

    pub fn clear_trace(&self) {
        self.core.trace.lock().unwrap().clear();
    }
}

/// A fabric before its endpoints have been handed to their owners.
pub struct Fabric {
    handle: FabricHandle,
    endpoints: Vec<Option<Endpoint>>,
}

impl Fabric {
    pub fn new(workers: usize, backend: Backend) -> Result<Fabric> {
        let max_frame = std::env::var(MAX_FRAME_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(DEFAULT_MAX_FRAME);
        Fabric::with_max_frame(workers, backend, max_frame)
    }

    pub fn with_max_frame(workers: usize, backend: Backend, max_frame: usize) -> Result<Fabric> {
        if workers == 0 {
            return Err(Error::NoWorkers);
        }
        let n = workers + 1;
        let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| unbounded()).unzip();
        let core = Arc::new(FabricCore {
            senders,
            links: (0..n * n * 3).map(|_| LinkCounters::default()).collect(),
            clock: (0..n).map(|_| ClockSlot::default()).collect(),
            backend,
            max_frame,
            tracing: AtomicBool::new(false),
            trace: Mutex::new(Vec::new()),
        });
        let endpoints = receivers
            .into_iter()
            .enumerate()
            .map(|(slot, rx)| Some(Endpoint { id: FabricCore::endpoint_of_slot(slot), rx, core: core.clone() }))
            .collect();
        Ok(Fabric { handle: FabricHandle { core }, endpoints })
    }

    pub fn handle(&self) -> FabricHandle {
        self.handle.clone()
    }

    pub fn workers(&self) -> usize {
        self.handle.workers()
    }

    pub fn take(&mut self, id: EndpointId) -> Option<Endpoint> {
        self.endpoints.get_mut(id.slot()).and_then(Option::take)
    }

    pub fn take_master(&mut self) -> Option<Endpoint> {
        self.take(EndpointId::Master)
    }

    pub fn take_worker(&mut self, w: WorkerId) -> Option<Endpoint> {
        self.take(EndpointId::Worker(w))
    }
}

/// The receiving side of one fabric endpoint plus the ability to send.
pub struct Endpoint {
    id: EndpointId,
    rx: Receiver<Message>,
    core: Arc<FabricCore>,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint").field("id", &self.id).finish()
    }
}

impl Endpoint {
    pub fn id(&self) -> EndpointId {
        self.id
    }

    pub fn fabric(&self) -> FabricHandle {
        FabricHandle { core: self.core.clone() }
    }

    pub fn send(&self, dest: EndpointId, kind: MessageKind, tag: u32, payload: Vec<u8>) -> Result<Receipt> {
        self.core.send(Message { kind, source: self.id, dest, tag, payload })
    }

    /// Sends one copy of a Control payload to every worker.
    pub fn broadcast_control(&self, tag: u32, payload: &[u8]) -> Result<Vec<Receipt>> {
        Envelope::decode(payload)?;
        (0..self.core.endpoints() - 1)
            .map(|w| self.send(EndpointId::Worker(WorkerId(w as u32)), MessageKind::Control, tag, payload.to_vec()))
            .collect()
    }

    pub fn recv(&self) -> Result<Message> {
        let m = self.rx.recv().map_err(|_| Error::EndpointClosed(self.id.to_string()))?;
        self.core.note_received(&m);
        Ok(m)
    }

    pub fn try_recv(&self) -> Result<Option<Message>> {
        match self.rx.try_recv() {
            Ok(m) => {
                self.core.note_received(&m);
                Ok(Some(m))
            }
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(Error::EndpointClosed(self.id.to_string())),
        }
    }

    pub fn recv_timeout(&self, d: Duration) -> Result<Option<Message>> {
        match self.rx.recv_timeout(d) {
            Ok(m) => {
                self.core.note_received(&m);
                Ok(Some(m))
            }
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(Error::EndpointClosed(self.id.to_string())),
        }
    }
}
