use std::io;

use thiserror::Error;

use crate::layout::{LayoutViolation, WorkerId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("worker list is empty")]
    EmptyWorkerList,
    #[error("grid {pr}x{pc} does not match {workers} workers")]
    GridMismatch { pr: usize, pc: usize, workers: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(LayoutViolation),
    #[error("index ({row}, {col}) out of range for {rows}x{cols} matrix")]
    IndexOutOfRange { row: usize, col: usize, rows: usize, cols: usize },
    #[error("fabric needs at least one worker")]
    NoWorkers,
    #[error("endpoint {0} is closed")]
    EndpointClosed(String),
    #[error("frame of {len} bytes exceeds maximum {max}")]
    FrameTooLarge { len: usize, max: usize },
    #[error("malformed encoding: {0}")]
    Decode(String),
    #[error("simulated elapsed time requested on an in-process fabric")]
    NotSimulated,
    #[error("zero-byte allocation request")]
    ZeroSizedAlloc,
    #[error("worker {worker} out of memory: {requested} bytes requested, {resident} resident, limit {limit}")]
    OutOfMemory { worker: WorkerId, requested: usize, resident: usize, limit: usize },
    #[error("unknown matrix {0}")]
    UnknownMatrix(u64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown pipeline {0}")]
    UnknownPipeline(u64),
    #[error("a pipeline recording is already open")]
    NestedRecording,
    #[error("no pipeline recording is open")]
    NotRecording,
    #[error("operation cannot be recorded into a pipeline: {0}")]
    NotRecordable(&'static str),
    #[error("replica of matrix {0} is pending; await replication completion")]
    ReplicaPending(u64),
    #[error("replica of matrix {0} is stale")]
    ReplicaStale(u64),
    #[error("no replica of matrix {0}")]
    NoReplica(u64),
    #[error("replica version regression for matrix {matrix}: have {have}, got {got}")]
    VersionRegression { matrix: u64, have: u64, got: u64 },
    #[error("replication of matrix {0} failed")]
    ReplicationFailed(u64),
    #[error("worker {worker}: {message}")]
    Worker { worker: WorkerId, message: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint format version {0}")]
    CheckpointVersion(u32),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("crop {crop_h}x{crop_w} larger than image {h}x{w}")]
    CropTooLarge { crop_h: usize, crop_w: usize, h: usize, w: usize },
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
