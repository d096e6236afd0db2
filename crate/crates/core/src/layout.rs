//! Tile extents and layouts.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkerId(pub u32);

impl WorkerId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

pub fn worker_range(n: usize) -> Vec<WorkerId> {
    (0..n as u32).map(WorkerId).collect()
}

/// A half-open rectangle `[row_start, row_start+row_count) x [col_start, col_start+col_count)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileExtent {
    pub row_start: usize,
    pub row_count: usize,
    pub col_start: usize,
    pub col_count: usize,
}

impl TileExtent {
    pub const fn new(row_start: usize, row_count: usize, col_start: usize, col_count: usize) -> Self {
        TileExtent { row_start, row_count, col_start, col_count }
    }

    pub const fn row_end(&self) -> usize {
        self.row_start + self.row_count
    }

    pub const fn col_end(&self) -> usize {
        self.col_start + self.col_count
    }

    pub const fn len(&self) -> usize {
        self.row_count * self.col_count
    }

    pub const fn is_empty(&self) -> bool {
        self.row_count == 0 || self.col_count == 0
    }

    pub const fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.row_start && i < self.row_end() && j >= self.col_start && j < self.col_end()
    }

    pub fn intersect(&self, other: &TileExtent) -> Option<TileExtent> {
        let r0 = self.row_start.max(other.row_start);
        let r1 = self.row_end().min(other.row_end());
        let c0 = self.col_start.max(other.col_start);
        let c1 = self.col_end().min(other.col_end());
        (r0 < r1 && c0 < c1).then(|| TileExtent::new(r0, r1 - r0, c0, c1 - c0))
    }

    pub fn transposed(&self) -> TileExtent {
        TileExtent::new(self.col_start, self.col_count, self.row_start, self.row_count)
    }

    /// Offset of global element `(i, j)` inside this tile's row-major buffer.
    #[inline]
    pub fn local_index(&self, i: usize, j: usize) -> usize {
        (i - self.row_start) * self.col_count + (j - self.col_start)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Layout {
    pub tiles: Vec<(TileExtent, WorkerId)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayoutViolation {
    EmptyTile { tile: usize },
    OutOfRange { tile: usize },
    Overlap { first: usize, second: usize, row: usize, col: usize },
    Gap { row: usize, col: usize },
    UnknownWorker { tile: usize, worker: WorkerId },
}

impl fmt::Display for LayoutViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutViolation::EmptyTile { tile } => write!(f, "tile {tile} is empty"),
            LayoutViolation::OutOfRange { tile } => write!(f, "tile {tile} exceeds the matrix bounds"),
            LayoutViolation::Overlap { first, second, row, col } => {
                write!(f, "tiles {first} and {second} both cover ({row}, {col})")
            }
            LayoutViolation::Gap { row, col } => write!(f, "element ({row}, {col}) is not covered"),
            LayoutViolation::UnknownWorker { tile, worker } => {
                write!(f, "tile {tile} is owned by {worker}, which is not in the worker group")
            }
        }
    }
}

/// Splits `n` into `parts` contiguous ranges whose sizes differ by at most one,
/// earlier ranges taking the remainder. Parts beyond `n` are omitted.
pub fn split_even(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let parts = parts.min(n);
    if parts == 0 {
        return Vec::new();
    }
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push((start, len));
        start += len;
    }
    out
}

impl Layout {
    pub fn single(rows: usize, cols: usize, owner: WorkerId) -> Layout {
        Layout { tiles: vec![(TileExtent::new(0, rows, 0, cols), owner)] }
    }

    /// Contiguous row panels assigned round-robin over `workers`.
    pub fn row_block(rows: usize, cols: usize, workers: &[WorkerId]) -> Result<Layout> {
        if workers.is_empty() {
            return Err(Error::EmptyWorkerList);
        }
        let tiles = split_even(rows, workers.len())
            .into_iter()
            .enumerate()
            .map(|(p, (start, len))| (TileExtent::new(start, len, 0, cols), workers[p % workers.len()]))
            .collect();
        Ok(Layout { tiles })
    }

    pub fn col_block(rows: usize, cols: usize, workers: &[WorkerId]) -> Result<Layout> {
        let t = Layout::row_block(cols, rows, workers)?;
        Ok(Layout { tiles: t.tiles.into_iter().map(|(e, w)| (e.transposed(), w)).collect() })
    }

    /// A `pr x pc` grid of near-equal tiles, workers assigned in row-major order.
    pub fn grid(rows: usize, cols: usize, pr: usize, pc: usize, workers: &[WorkerId]) -> Result<Layout> {
        if workers.is_empty() {
            return Err(Error::EmptyWorkerList);
        }
        if pr * pc != workers.len() {
            return Err(Error::GridMismatch { pr, pc, workers: workers.len() });
        }
        let rs = split_even(rows, pr);
        let cs = split_even(cols, pc);
        let mut tiles = Vec::with_capacity(rs.len() * cs.len());
        for (bi, &(r0, rn)) in rs.iter().enumerate() {
            for (bj, &(c0, cn)) in cs.iter().enumerate() {
                tiles.push((TileExtent::new(r0, rn, c0, cn), workers[bi * pc + bj]));
            }
        }
        Ok(Layout { tiles })
    }

    /// Returns the first invariant violated, checked in the order: empty tile,
    /// out of range, unknown worker, overlap, gap.
    pub fn validate(&self, rows: usize, cols: usize, group: &[WorkerId]) -> Result<(), LayoutViolation> {
        for (t, (e, w)) in self.tiles.iter().enumerate() {
            if e.is_empty() {
                return Err(LayoutViolation::EmptyTile { tile: t });
            }
            if e.row_end() > rows || e.col_end() > cols {
                return Err(LayoutViolation::OutOfRange { tile: t });
            }
            if !group.contains(w) {
                return Err(LayoutViolation::UnknownWorker { tile: t, worker: *w });
            }
        }
        for a in 0..self.tiles.len() {
            for b in a + 1..self.tiles.len() {
                if let Some(x) = self.tiles[a].0.intersect(&self.tiles[b].0) {
                    return Err(LayoutViolation::Overlap { first: a, second: b, row: x.row_start, col: x.col_start });
                }
            }
        }
        // Disjoint tiles cover everything iff their areas sum to the full area.
        let covered: usize = self.tiles.iter().map(|(e, _)| e.len()).sum();
        if covered != rows * cols {
            let (row, col) = self.first_uncovered(rows, cols);
            return Err(LayoutViolation::Gap { row, col });
        }
        Ok(())
    }

    fn first_uncovered(&self, rows: usize, cols: usize) -> (usize, usize) {
        for i in 0..rows {
            let mut j = 0;
            while j < cols {
                match self.tiles.iter().find(|(e, _)| e.contains(i, j)) {
                    Some((e, _)) => j = e.col_end(),
                    None => return (i, j),
                }
            }
        }
        (rows, cols)
    }

    pub fn tile_index_of(&self, i: usize, j: usize) -> Option<usize> {
        self.tiles.iter().position(|(e, _)| e.contains(i, j))
    }

    pub fn owner(&self, rows: usize, cols: usize, i: usize, j: usize) -> Result<WorkerId> {
        if i >= rows || j >= cols {
            return Err(Error::IndexOutOfRange { row: i, col: j, rows, cols });
        }
        self.tile_index_of(i, j).map(|t| self.tiles[t].1).ok_or(Error::InvalidLayout(LayoutViolation::Gap { row: i, col: j }))
    }

    pub fn tiles_of(&self, w: WorkerId) -> impl Iterator<Item = (usize, &TileExtent)> {
        self.tiles.iter().enumerate().filter(move |(_, (_, o))| *o == w).map(|(t, (e, _))| (t, e))
    }

    pub fn workers(&self) -> Vec<WorkerId> {
        let mut ws: Vec<WorkerId> = self.tiles.iter().map(|(_, w)| *w).collect();
        ws.sort();
        ws.dedup();
        ws
    }
}
