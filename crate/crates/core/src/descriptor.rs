use std::fmt;

use crate::error::Result;
use crate::layout::{Layout, TileExtent, WorkerId};
use crate::precision::Precision;
use crate::wire::{Reader, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatrixId(pub u64);

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Identity, shape, precision and tile layout of a distributed matrix.
/// Every worker holds an identical copy.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MatrixDescriptor {
    pub id: MatrixId,
    pub rows: usize,
    pub cols: usize,
    pub precision: Precision,
    pub layout: Layout,
    pub version: u64,
}

impl MatrixDescriptor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.precision.bytes()
    }

    pub fn full_extent(&self) -> TileExtent {
        TileExtent::new(0, self.rows, 0, self.cols)
    }

    pub fn owned_bytes(&self, w: WorkerId) -> usize {
        self.layout.tiles_of(w).map(|(_, e)| e.len()).sum::<usize>() * self.precision.bytes()
    }

    /// Wire encoding: u64 id, u64 rows, u64 cols, u8 precision, u64 version,
    /// u32 tile count, then per tile four u64 extent fields and a u32 rank.
    pub fn encode_into(&self, w: &mut Writer) {
        w.u64(self.id.0).u64(self.rows as u64).u64(self.cols as u64);
        w.u8(self.precision.tag()).u64(self.version);
        w.u32(self.layout.tiles.len() as u32);
        for (e, owner) in &self.layout.tiles {
            w.u64(e.row_start as u64).u64(e.row_count as u64);
            w.u64(e.col_start as u64).u64(e.col_count as u64);
            w.u32(owner.0);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        let id = MatrixId(r.u64()?);
        let rows = r.usize()?;
        let cols = r.usize()?;
        let precision = Precision::from_tag(r.u8()?)?;
        let version = r.u64()?;
        let n = r.u32()? as usize;
        let mut tiles = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let e = TileExtent::new(r.usize()?, r.usize()?, r.usize()?, r.usize()?);
            tiles.push((e, WorkerId(r.u32()?)));
        }
        Ok(MatrixDescriptor { id, rows, cols, precision, layout: Layout { tiles }, version })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let d = Self::decode_from(&mut r)?;
        r.expect_end()?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::worker_range;
    use proptest::prelude::*;

    #[test]
    fn encoding_layout_is_fixed() {
        let d = MatrixDescriptor {
            id: MatrixId(7),
            rows: 2,
            cols: 3,
            precision: Precision::Half,
            layout: Layout::single(2, 3, WorkerId(1)),
            version: 9,
        };
        let b = d.encode();
        assert_eq!(b.len(), 8 * 3 + 1 + 8 + 4 + 36);
        assert_eq!(&b[0..8], &7u64.to_le_bytes());
        assert_eq!(b[24], 0);
        assert_eq!(&b[25..33], &9u64.to_le_bytes());
        assert_eq!(&b[33..37], &1u32.to_le_bytes());
        assert_eq!(&b[b.len() - 4..], &1u32.to_le_bytes());
        assert!(MatrixDescriptor::decode(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn descriptor_round_trips(id in any::<u64>(), rows in 1usize..40, cols in 1usize..40,
                                  p in 1usize..6, prec in 0u8..3, version in any::<u64>()) {
            let layout = Layout::row_block(rows, cols, &worker_range(p)).unwrap();
            let d = MatrixDescriptor { id: MatrixId(id), rows, cols,
                precision: Precision::from_tag(prec).unwrap(), layout, version };
            let bytes = d.encode();
            let back = MatrixDescriptor::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &d);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
