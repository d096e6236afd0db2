//! C ABI over the gridmath session.
//!
//! Sessions are opaque `GmSession` pointers; matrices are `uint64_t` ids.
//! Every fallible call returns a `GmStatus`; the message for the most recent
//! failure on the calling thread is available from `gm_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use gridmath::descriptor::MatrixId;
use gridmath::layout::{Layout, WorkerId};
use gridmath::precision::Precision;
use gridmath::session::{DistMatrix, Session, SessionConfig};
use gridmath::transport::{Backend, Fabric};
use gridmath::Error;

/// Opaque session handle.
pub struct GmSession {
    inner: Session,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownMatrix = 3,
    OutOfMemory = 4,
    Replication = 5,
    Io = 6,
    Transport = 7,
    Checkpoint = 8,
    Worker = 9,
    Panic = 10,
    Other = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmPrecision {
    Half = 0,
    Single = 1,
    Double = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmLayout {
    RowBlock = 0,
    ColBlock = 1,
    /// Whole matrix on worker 0.
    Single = 2,
    /// Near-square grid over all workers.
    Grid = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
    });
}

fn status_of(e: &Error) -> GmStatus {
    match e {
        Error::UnknownMatrix(_) => GmStatus::UnknownMatrix,
        Error::OutOfMemory { .. } => GmStatus::OutOfMemory,
        Error::ReplicaPending(_)
        | Error::ReplicaStale(_)
        | Error::NoReplica(_)
        | Error::VersionRegression { .. }
        | Error::ReplicationFailed(_) => GmStatus::Replication,
        Error::Io(_) => GmStatus::Io,
        Error::EndpointClosed(_) | Error::FrameTooLarge { .. } | Error::Decode(_) | Error::NoWorkers => GmStatus::Transport,
        Error::CorruptCheckpoint(_) | Error::CheckpointVersion(_) => GmStatus::Checkpoint,
        Error::Worker { message, .. } if message.contains("out of memory") => GmStatus::OutOfMemory,
        Error::Worker { .. } => GmStatus::Worker,
        Error::EmptyWorkerList
        | Error::GridMismatch { .. }
        | Error::InvalidLayout(_)
        | Error::IndexOutOfRange { .. }
        | Error::ShapeMismatch(_)
        | Error::Geometry(_)
        | Error::Config(_)
        | Error::ZeroSizedAlloc => GmStatus::InvalidArgument,
        _ => GmStatus::Other,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (GmStatus, String)>) -> GmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GmStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            GmStatus::Panic
        }
    }
}

fn lib(e: Error) -> (GmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (GmStatus, String) {
    (GmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn session<'a>(s: *mut GmSession) -> Result<&'a mut Session, (GmStatus, String)> {
    s.as_mut().map(|s| &mut s.inner).ok_or_else(|| null("session"))
}

fn matrix(id: u64) -> DistMatrix {
    DistMatrix { id: MatrixId(id) }
}

fn precision(p: GmPrecision) -> Precision {
    match p {
        GmPrecision::Half => Precision::Half,
        GmPrecision::Single => Precision::Single,
        GmPrecision::Double => Precision::Double,
    }
}

fn new_session(workers: u32, deterministic: bool) -> Result<Session, (GmStatus, String)> {
    let fabric = Fabric::new(workers as usize, Backend::InProcess).map_err(lib)?;
    Session::with_config(fabric, SessionConfig { deterministic, ..SessionConfig::default() }).map_err(lib)
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len` bytes, into `buf`. Returns the full message length
/// excluding the terminator; pass a null `buf` to query it.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn gm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Starts `workers` in-process workers.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn gm_session_new(workers: u32, deterministic: bool, out: *mut *mut GmSession) -> GmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = new_session(workers, deterministic)?;
        *out = Box::into_raw(Box::new(GmSession { inner }));
        Ok(())
    })
}

/// Shuts the workers down and frees the handle. Null is ignored.
///
/// # Safety
/// `s` must come from `gm_session_new` or `gm_session_restore` and not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gm_session_free(s: *mut GmSession) {
    if !s.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(s))));
    }
}

/// Number of workers, or 0 for a null session.
///
/// # Safety
/// `s` must be null or a live session.
#[no_mangle]
pub unsafe extern "C" fn gm_session_workers(s: *const GmSession) -> u32 {
    s.as_ref().map_or(0, |s| s.inner.workers() as u32)
}

/// # Safety
/// `s` must be a live session; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gm_matrix_create(
    s: *mut GmSession,
    rows: usize,
    cols: usize,
    precision_: GmPrecision,
    layout: GmLayout,
    out: *mut u64,
) -> GmStatus {
    guard(|| {
        let s = session(s)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ws = s.worker_ids().to_vec();
        let l = match layout {
            GmLayout::RowBlock => Layout::row_block(rows, cols, &ws),
            GmLayout::ColBlock => Layout::col_block(rows, cols, &ws),
            GmLayout::Single => Ok(Layout::single(rows, cols, WorkerId(0))),
            GmLayout::Grid => {
                let p = ws.len();
                let mut pr = (p as f64).sqrt() as usize;
                while pr > 1 && p % pr != 0 {
                    pr -= 1;
                }
                Layout::grid(rows, cols, pr.max(1), p / pr.max(1), &ws)
            }
        }
        .map_err(lib)?;
        let m = s.create_matrix(rows, cols, precision(precision_), l).map_err(lib)?;
        *out = m.id.0;
        Ok(())
    })
}

/// # Safety
/// `s` must be a live session.
#[no_mangle]
pub unsafe extern "C" fn gm_matrix_destroy(s: *mut GmSession, m: u64) -> GmStatus {
    guard(|| session(s)?.destroy(matrix(m)).map_err(lib))
}

/// Writes the full matrix from `len` row-major doubles.
///
/// # Safety
/// `s` must be a live session; `data` valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn gm_matrix_set(s: *mut GmSession, m: u64, data: *const f64, len: usize) -> GmStatus {
    guard(|| {
        let s = session(s)?;
        if data.is_null() && len > 0 {
            return Err(null("data"));
        }
        let v = if len == 0 { &[][..] } else { slice::from_raw_parts(data, len) };
        let (r, c) = s.shape(matrix(m)).map_err(lib)?;
        if v.len() != r * c {
            return Err((GmStatus::InvalidArgument, format!("expected {} values, got {len}", r * c)));
        }
        s.set_data(matrix(m), v).map_err(lib)
    })
}

/// Reads the full matrix as `len` row-major doubles.
///
/// # Safety
/// `s` must be a live session; `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn gm_matrix_get(s: *mut GmSession, m: u64, out: *mut f64, len: usize) -> GmStatus {
    guard(|| {
        let s = session(s)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = s.get_data(matrix(m)).map_err(lib)?;
        if v.len() != len {
            return Err((GmStatus::InvalidArgument, format!("matrix has {} values, buffer holds {len}", v.len())));
        }
        slice::from_raw_parts_mut(out, len).copy_from_slice(&v);
        Ok(())
    })
}

/// Fills with uniform values in [lo, hi) keyed on the global element index.
///
/// # Safety
/// `s` must be a live session.
#[no_mangle]
pub unsafe extern "C" fn gm_fill_uniform(s: *mut GmSession, m: u64, seed: u64, lo: f64, hi: f64) -> GmStatus {
    guard(|| session(s)?.fill_uniform(matrix(m), seed, lo, hi).map_err(lib))
}

/// C = alpha * op(A) * op(B) + beta * C.
///
/// # Safety
/// `s` must be a live session.
#[no_mangle]
pub unsafe extern "C" fn gm_gemm(
    s: *mut GmSession,
    a: u64,
    b: u64,
    c: u64,
    alpha: f64,
    beta: f64,
    trans_a: bool,
    trans_b: bool,
) -> GmStatus {
    guard(|| session(s)?.gemm(matrix(a), matrix(b), matrix(c), alpha, beta, trans_a, trans_b).map_err(lib))
}

/// Row-wise softmax in place.
///
/// # Safety
/// `s` must be a live session.
#[no_mangle]
pub unsafe extern "C" fn gm_softmax_rows(s: *mut GmSession, m: u64) -> GmStatus {
    guard(|| session(s)?.softmax_rows(matrix(m)).map_err(lib))
}

/// Replicates `m` to every worker and waits.
///
/// # Safety
/// `s` must be a live session.
#[no_mangle]
pub unsafe extern "C" fn gm_replicate(s: *mut GmSession, m: u64) -> GmStatus {
    guard(|| session(s)?.replicate_sync(matrix(m)).map(|_| ()).map_err(lib))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, (GmStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path).to_str().map_err(|_| (GmStatus::InvalidArgument, "path is not UTF-8".into()))
}

/// # Safety
/// `s` must be a live session; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gm_checkpoint(s: *mut GmSession, path: *const c_char) -> GmStatus {
    guard(|| {
        let s = session(s)?;
        s.checkpoint(path_arg(path)?).map_err(lib)
    })
}

/// Restores a checkpoint onto `workers` fresh workers.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gm_session_restore(path: *const c_char, workers: u32, out: *mut *mut GmSession) -> GmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let fabric = Fabric::new(workers as usize, Backend::InProcess).map_err(lib)?;
        let inner = Session::restore(path_arg(path)?, fabric).map_err(lib)?;
        *out = Box::into_raw(Box::new(GmSession { inner }));
        Ok(())
    })
}
