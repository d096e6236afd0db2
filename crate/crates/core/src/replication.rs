//! Versioned, chunked, push-based replication of whole matrices.
//!
//! Owners push their tiles to every other worker, one chunk per handled
//! Control message, so queued compute runs between chunks. A chunk addresses
//! the matrix's tile-major byte stream: tiles in layout order, each tile
//! row-major. Chunks never straddle tiles.

use crate::descriptor::{MatrixDescriptor, MatrixId};
use crate::error::Result;
use crate::layout::WorkerId;
use crate::wire::{Reader, Writer};

/// Tags with this bit set carry replication traffic.
pub const REPLICATION_TAG: u32 = 0x8000_0000;

pub fn replication_tag(op_tag: u32) -> u32 {
    op_tag | REPLICATION_TAG
}

/// Bytes of chunk header preceding the payload.
pub const CHUNK_HEADER: usize = 8 + 8 + 8 + 4;

/// Replication chunk payload: u64 matrix, u64 version, u64 offset, u32 length, bytes.
/// The offset addresses the matrix's tile-major byte stream (tiles in layout order).
pub fn encode_chunk(matrix: MatrixId, version: u64, offset: u64, data: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(matrix.0).u64(version).u64(offset).u32(data.len() as u32).bytes(data);
    w.finish()
}

pub fn decode_chunk(payload: &[u8]) -> Result<(MatrixId, u64, u64, &[u8])> {
    let mut r = Reader::new(payload);
    let m = MatrixId(r.u64()?);
    let v = r.u64()?;
    let off = r.u64()?;
    let len = r.u32()? as usize;
    let data = r.take(len)?;
    r.expect_end()?;
    Ok((m, v, off, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicationState {
    InFlight,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicationHandle {
    pub matrix: MatrixId,
    pub version: u64,
}

/// (offset, length) of every chunk `owner` pushes for `desc`.
pub fn chunk_plan(desc: &MatrixDescriptor, owner: WorkerId, chunk_bytes: usize) -> Vec<(u64, usize)> {
    let elem = desc.precision.bytes();
    let chunk = (chunk_bytes / elem).max(1) * elem;
    let mut out = Vec::new();
    let mut prefix = 0usize;
    for (e, w) in &desc.layout.tiles {
        let bytes = e.len() * elem;
        if *w == owner {
            let mut off = 0;
            while off < bytes {
                let len = chunk.min(bytes - off);
                out.push(((prefix + off) as u64, len));
                off += len;
            }
        }
        prefix += bytes;
    }
    out
}

/// Payload bytes a full replication of `desc` moves over `workers` workers.
pub fn replication_bytes(desc: &MatrixDescriptor, workers: usize) -> u64 {
    (workers.saturating_sub(1) * desc.byte_len()) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Layout;
    use crate::precision::Precision;

    #[test]
    fn chunk_round_trip() {
        let p = encode_chunk(MatrixId(3), 9, 512, &[1, 2, 3]);
        assert_eq!(p.len(), CHUNK_HEADER + 3);
        let (m, v, off, data) = decode_chunk(&p).unwrap();
        assert_eq!((m, v, off, data), (MatrixId(3), 9, 512, &[1u8, 2, 3][..]));
        assert!(decode_chunk(&p[..p.len() - 1]).is_err());
    }

    #[test]
    fn chunks_cover_owned_tiles_once() {
        let w: Vec<WorkerId> = (0..3).map(WorkerId).collect();
        let d = MatrixDescriptor {
            id: MatrixId(1),
            rows: 10,
            cols: 7,
            precision: Precision::Half,
            layout: Layout::row_block(10, 7, &w).unwrap(),
            version: 0,
        };
        let total: usize = w.iter().flat_map(|&o| chunk_plan(&d, o, 10)).map(|(_, l)| l).sum();
        assert_eq!(total, d.byte_len());
        assert!(chunk_plan(&d, WorkerId(1), 10).iter().all(|&(_, l)| l <= 10 && l % 2 == 0));
        assert_eq!(chunk_plan(&d, WorkerId(0), 1 << 20).len(), 1);
        assert_eq!(replication_bytes(&d, 3), 2 * 140);
    }
}
