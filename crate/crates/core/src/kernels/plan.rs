//! Communication planning shared by every worker and the cost simulator.
//!
//! All workers hold identical descriptors, so each one computes the same
//! global transfer list and knows exactly what to send and what to expect.

use crate::descriptor::{MatrixDescriptor, MatrixId};
use crate::layout::{TileExtent, WorkerId};

pub const DEFAULT_PANEL: usize = 256;

/// One rectangle of a matrix moving from its owner to a consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    /// Distinguishes multiple fetches of the same matrix within one op.
    pub slot: u8,
    pub matrix: MatrixId,
    pub src: WorkerId,
    pub dst: WorkerId,
    /// Storage coordinates of the source matrix.
    pub rect: TileExtent,
    pub panel: u32,
}

impl Transfer {
    pub fn is_local(&self) -> bool {
        self.src == self.dst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelSplit {
    pub axis: Axis,
    pub width: usize,
}

/// Merges `(start, len)` intervals into a sorted disjoint union.
/// (start, length) intervals.
pub type Spans = Vec<(usize, usize)>;

pub fn merge_intervals(mut v: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    v.retain(|&(_, n)| n > 0);
    v.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(v.len());
    for (s, n) in v {
        match out.last_mut() {
            Some((ls, ln)) if s <= *ls + *ln => *ln = (*ln).max(s + n - *ls),
            _ => out.push((s, n)),
        }
    }
    out
}

pub fn interval_total(v: &[(usize, usize)]) -> usize {
    v.iter().map(|&(_, n)| n).sum()
}

/// Maps global indices in a disjoint interval union to dense local indices.
#[derive(Debug, Clone)]
pub struct IndexMap {
    intervals: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl IndexMap {
    pub fn new(intervals: Vec<(usize, usize)>) -> Self {
        let mut offsets = Vec::with_capacity(intervals.len());
        let mut acc = 0;
        for &(_, n) in &intervals {
            offsets.push(acc);
            acc += n;
        }
        IndexMap { intervals, offsets }
    }

    pub fn len(&self) -> usize {
        interval_total(&self.intervals)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn intervals(&self) -> &[(usize, usize)] {
        &self.intervals
    }

    #[inline]
    pub fn local(&self, g: usize) -> Option<usize> {
        let k = self.intervals.partition_point(|&(s, _)| s <= g);
        if k == 0 {
            return None;
        }
        let (s, n) = self.intervals[k - 1];
        (g < s + n).then(|| self.offsets[k - 1] + g - s)
    }
}

/// Intersects each consumer's needed rectangles with the owner tiles of
/// `desc`. Needed rectangles per consumer must be disjoint, which makes every
/// element travel to a consumer at most once per (slot, panel).
pub fn plan_fetch(desc: &MatrixDescriptor, slot: u8, needs: &[(WorkerId, Vec<TileExtent>)], split: Option<PanelSplit>) -> Vec<Transfer> {
    let mut out = Vec::new();
    for (consumer, rects) in needs {
        for need in rects {
            for (tile, owner) in &desc.layout.tiles {
                let Some(x) = need.intersect(tile) else { continue };
                match split {
                    None => out.push(Transfer { slot, matrix: desc.id, src: *owner, dst: *consumer, rect: x, panel: 0 }),
                    Some(PanelSplit { axis, width }) => {
                        let (start, len) = match axis {
                            Axis::Rows => (x.row_start, x.row_count),
                            Axis::Cols => (x.col_start, x.col_count),
                        };
                        let mut k = start;
                        while k < start + len {
                            let p = k / width;
                            let end = ((p + 1) * width).min(start + len);
                            let rect = match axis {
                                Axis::Rows => TileExtent::new(k, end - k, x.col_start, x.col_count),
                                Axis::Cols => TileExtent::new(x.row_start, x.row_count, k, end - k),
                            };
                            out.push(Transfer { slot, matrix: desc.id, src: *owner, dst: *consumer, rect, panel: p as u32 });
                            k = end;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Row and column interval unions of the tiles `w` owns in `desc`.
pub fn owned_spans(desc: &MatrixDescriptor, w: WorkerId) -> (Spans, Spans) {
    let tiles: Vec<&TileExtent> = desc.layout.tiles_of(w).map(|(_, e)| e).collect();
    let rows = merge_intervals(tiles.iter().map(|e| (e.row_start, e.row_count)).collect());
    let cols = merge_intervals(tiles.iter().map(|e| (e.col_start, e.col_count)).collect());
    (rows, cols)
}

pub fn consumers(desc: &MatrixDescriptor) -> Vec<WorkerId> {
    desc.layout.workers()
}

/// Each consumer of `target` needs `source` over the rectangles it owns in
/// `target` (identical shapes, possibly different layouts).
pub fn plan_aligned(source: &MatrixDescriptor, target: &MatrixDescriptor, slot: u8) -> Vec<Transfer> {
    let needs: Vec<(WorkerId, Vec<TileExtent>)> =
        consumers(target).into_iter().map(|w| (w, target.layout.tiles_of(w).map(|(_, e)| *e).collect())).collect();
    plan_fetch(source, slot, &needs, None)
}

/// Each consumer of `target` needs whole rows of `source` for every row
/// range in `rows_for(target tile)`.
pub fn plan_rows(
    source: &MatrixDescriptor,
    target: &MatrixDescriptor,
    slot: u8,
    rows_for: impl Fn(&TileExtent) -> (usize, usize),
) -> Vec<Transfer> {
    let needs: Vec<(WorkerId, Vec<TileExtent>)> = consumers(target)
        .into_iter()
        .map(|w| {
            let spans = merge_intervals(target.layout.tiles_of(w).map(|(_, e)| rows_for(e)).collect());
            (w, spans.into_iter().map(|(s, n)| TileExtent::new(s, n, 0, source.cols)).collect())
        })
        .collect();
    plan_fetch(source, slot, &needs, None)
}

pub const SLOT_A: u8 = 0;
pub const SLOT_B: u8 = 1;

/// Owner-computes gemm plan: every C-tile owner fetches the rows of op(A)
/// and columns of op(B) its tiles need, split into k-panels.
#[derive(Debug, Clone)]
pub struct GemmPlan {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub transfers: Vec<Transfer>,
    pub panel_width: usize,
}

impl GemmPlan {
    pub fn new(
        a: &MatrixDescriptor,
        b: &MatrixDescriptor,
        c: &MatrixDescriptor,
        trans_a: bool,
        trans_b: bool,
        skip: &[MatrixId],
        panel_width: usize,
    ) -> GemmPlan {
        let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let n = if trans_b { b.rows } else { b.cols };
        let mut a_needs = Vec::new();
        let mut b_needs = Vec::new();
        for w in consumers(c) {
            let (rows, cols) = owned_spans(c, w);
            a_needs.push((
                w,
                rows.iter().map(|&(s, len)| if trans_a { TileExtent::new(0, k, s, len) } else { TileExtent::new(s, len, 0, k) }).collect(),
            ));
            b_needs.push((
                w,
                cols.iter().map(|&(s, len)| if trans_b { TileExtent::new(s, len, 0, k) } else { TileExtent::new(0, k, s, len) }).collect(),
            ));
        }
        let a_axis = if trans_a { Axis::Rows } else { Axis::Cols };
        let b_axis = if trans_b { Axis::Cols } else { Axis::Rows };
        let mut transfers = Vec::new();
        if !skip.contains(&a.id) {
            transfers.extend(plan_fetch(a, SLOT_A, &a_needs, Some(PanelSplit { axis: a_axis, width: panel_width })));
        }
        if !skip.contains(&b.id) {
            transfers.extend(plan_fetch(b, SLOT_B, &b_needs, Some(PanelSplit { axis: b_axis, width: panel_width })));
        }
        GemmPlan { m, n, k, transfers, panel_width }
    }

    pub fn panels(&self) -> usize {
        self.k.div_ceil(self.panel_width).max(1)
    }
}
