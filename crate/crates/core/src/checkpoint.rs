//! Checkpoint files.
//!
//! Layout: "DMCK", u32 format version, u64 root seed, u32 matrix count, then
//! per matrix its descriptor encoding and row-major payload bytes, and a
//! trailing CRC32 over everything after the magic. Little-endian.

use std::fs;
use std::path::Path;

use crate::descriptor::MatrixDescriptor;
use crate::error::{Error, Result};
use crate::layout::{worker_range, Layout};
use crate::session::{Session, SessionConfig};
use crate::transport::Fabric;
use crate::wire::{Reader, Writer};

pub const MAGIC: &[u8; 4] = b"DMCK";
pub const FORMAT_VERSION: u32 = 1;

impl Session {
    /// Writes every live matrix to `path`. The session must be quiescent.
    pub fn checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new();
        let matrices = self.matrices();
        w.u32(FORMAT_VERSION).u64(self.root_seed()).u32(matrices.len() as u32);
        for m in matrices {
            let d = self.descriptor(m)?.clone();
            let bytes = self.get_raw(m)?;
            d.encode_into(&mut w);
            w.bytes(&bytes);
        }
        let body = w.finish();
        let crc = crc32fast::hash(&body);
        let mut out = Vec::with_capacity(body.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        let tmp = path.as_ref().with_extension("tmp");
        fs::write(&tmp, &out)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Rebuilds a session from a checkpoint. When the fabric's worker count
    /// differs from the one recorded, every matrix is re-laid out row-block.
    pub fn restore(path: impl AsRef<Path>, fabric: Fabric) -> Result<Session> {
        Session::restore_with(path, fabric, SessionConfig::default())
    }

    pub fn restore_with(path: impl AsRef<Path>, fabric: Fabric, config: SessionConfig) -> Result<Session> {
        let (root, matrices) = read_checkpoint(&fs::read(path)?)?;
        let p = fabric.workers();
        let mut s = Session::with_config(fabric, config)?;
        let group = worker_range(p);
        let saved_workers = matrices.iter().flat_map(|(d, _)| d.layout.workers()).map(|w| w.index() + 1).max().unwrap_or(0);
        for (mut d, bytes) in matrices {
            if saved_workers > p || d.layout.validate(d.rows, d.cols, &group).is_err() {
                d.layout = Layout::row_block(d.rows, d.cols, &group)?;
            }
            let m = s.define_restored(d)?;
            s.set_raw(m, &bytes)?;
        }
        s.distribute_seeds(root)?;
        Ok(s)
    }
}

/// Root seed and each matrix with its row-major bytes.
pub type CheckpointContents = (u64, Vec<(MatrixDescriptor, Vec<u8>)>);

/// Parses and verifies a checkpoint image.
pub fn read_checkpoint(data: &[u8]) -> Result<CheckpointContents> {
    if data.len() < MAGIC.len() + 4 + 8 + 4 + 4 || &data[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic or truncated header".into()));
    }
    let (body, tail) = data[4..].split_at(data.len() - 8);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptCheckpoint("CRC mismatch".into()));
    }
    let mut r = Reader::new(body);
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let root = r.u64()?;
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let d = MatrixDescriptor::decode_from(&mut r).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let bytes = r.take(d.byte_len()).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?.to_vec();
        out.push((d, bytes));
    }
    r.expect_end().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok((root, out))
}
