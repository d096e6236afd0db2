//! Operation descriptors carried by Control messages.
//!
//! Encoding: u64 recording pipeline id (0 for none), u32 count of operands
//! whose replicas may be read, those ids as u64, then the u8 opcode and its
//! fields, all little-endian.

use crate::descriptor::{MatrixDescriptor, MatrixId};
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::precision::Precision;
use crate::wire::{Reader, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PipelineId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpCode {
    DefineMatrix = 1,
    DestroyMatrix = 2,
    SetData = 3,
    GetData = 4,
    Reshape = 5,
    Gemm = 6,
    RowColSum = 7,
    Elementwise = 8,
    Softmax = 9,
    Im2col = 10,
    ConvScatter = 11,
    Cast = 12,
    Fill = 13,
    ReplicateStart = 14,
    ReplicateDrain = 15,
    ReadReplica = 16,
    SetSeed = 17,
    Replay = 18,
    Checksum = 19,
    PoolStats = 20,
    Shutdown = 21,
}

impl OpCode {
    pub fn is_compute(self) -> bool {
        matches!(
            self,
            OpCode::Gemm
                | OpCode::RowColSum
                | OpCode::Elementwise
                | OpCode::Softmax
                | OpCode::Im2col
                | OpCode::ConvScatter
                | OpCode::Cast
                | OpCode::Fill
        )
    }
}

/// Per-element accumulation order for gemm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accumulation {
    /// Every element sums its k terms in ascending k; bitwise layout-invariant.
    AscendingK,
    /// Per-panel partial sums combined in panel arrival order.
    ArrivalOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwOp {
    /// dst += src
    Add,
    /// dst -= src
    Sub,
    /// dst *= scalar
    MulScalar,
    /// dst = max(dst, 0)
    Relu,
    /// dst *= [src > 0]
    ReluGrad,
    /// dst += scalar * src
    Axpy,
    /// dst = scalar
    Set,
}

impl EwOp {
    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => EwOp::Add,
            1 => EwOp::Sub,
            2 => EwOp::MulScalar,
            3 => EwOp::Relu,
            4 => EwOp::ReluGrad,
            5 => EwOp::Axpy,
            6 => EwOp::Set,
            _ => return Err(Error::Decode(format!("elementwise op {t}"))),
        })
    }

    pub fn is_binary(self) -> bool {
        matches!(self, EwOp::Add | EwOp::Sub | EwOp::ReluGrad | EwOp::Axpy)
    }
}

/// Convolution geometry: input `n x (c*h*w)`, filters `k x (c*r*s)`,
/// output `n x (k*out_h*out_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub r: usize,
    pub s: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Geometry(m.to_string()));
        if [self.n, self.c, self.h, self.w, self.k, self.r, self.s, self.stride].contains(&0) {
            return bad("dimensions and stride must be positive");
        }
        if self.h + 2 * self.pad < self.r || self.w + 2 * self.pad < self.s {
            return bad("filter larger than padded input");
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.r) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.s) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.r * self.s
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn encode(&self, w: &mut Writer) {
        for v in [self.n, self.c, self.h, self.w, self.k, self.r, self.s, self.stride, self.pad] {
            w.u64(v as u64);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(ConvGeometry {
            n: r.usize()?,
            c: r.usize()?,
            h: r.usize()?,
            w: r.usize()?,
            k: r.usize()?,
            r: r.usize()?,
            s: r.usize()?,
            stride: r.usize()?,
            pad: r.usize()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    DefineMatrix(MatrixDescriptor),
    DestroyMatrix(MatrixId),
    SetData(MatrixId),
    GetData(MatrixId),
    Reshape { id: MatrixId, precision: Precision, layout: Layout },
    Gemm { a: MatrixId, b: MatrixId, c: MatrixId, alpha: f64, beta: f64, trans_a: bool, trans_b: bool, order: Accumulation },
    RowColSum { a: MatrixId, row_acc: MatrixId, col_acc: MatrixId, alpha: f64, deterministic: bool },
    Elementwise { op: EwOp, dst: MatrixId, src: Option<MatrixId>, scalar: f64 },
    Softmax(MatrixId),
    Im2col { input: MatrixId, patches: MatrixId, geom: ConvGeometry },
    ConvScatter { columns: MatrixId, output: MatrixId, geom: ConvGeometry },
    Cast { src: MatrixId, dst: MatrixId },
    Fill { id: MatrixId, seed: u64, lo: f64, hi: f64 },
    ReplicateStart { id: MatrixId, version: u64, chunk: usize },
    ReplicateDrain { id: MatrixId, version: u64 },
    ReadReplica(MatrixId),
    SetSeed(u64),
    Replay(PipelineId),
    Checksum,
    PoolStats,
    Shutdown,
}

impl Op {
    pub fn code(&self) -> OpCode {
        match self {
            Op::DefineMatrix(_) => OpCode::DefineMatrix,
            Op::DestroyMatrix(_) => OpCode::DestroyMatrix,
            Op::SetData(_) => OpCode::SetData,
            Op::GetData(_) => OpCode::GetData,
            Op::Reshape { .. } => OpCode::Reshape,
            Op::Gemm { .. } => OpCode::Gemm,
            Op::RowColSum { .. } => OpCode::RowColSum,
            Op::Elementwise { .. } => OpCode::Elementwise,
            Op::Softmax(_) => OpCode::Softmax,
            Op::Im2col { .. } => OpCode::Im2col,
            Op::ConvScatter { .. } => OpCode::ConvScatter,
            Op::Cast { .. } => OpCode::Cast,
            Op::Fill { .. } => OpCode::Fill,
            Op::ReplicateStart { .. } => OpCode::ReplicateStart,
            Op::ReplicateDrain { .. } => OpCode::ReplicateDrain,
            Op::ReadReplica(_) => OpCode::ReadReplica,
            Op::SetSeed(_) => OpCode::SetSeed,
            Op::Replay(_) => OpCode::Replay,
            Op::Checksum => OpCode::Checksum,
            Op::PoolStats => OpCode::PoolStats,
            Op::Shutdown => OpCode::Shutdown,
        }
    }

    pub fn recordable(&self) -> bool {
        self.code().is_compute()
    }

    /// Matrices whose contents (and version) this op mutates.
    pub fn writes(&self) -> Vec<MatrixId> {
        match *self {
            Op::SetData(id) | Op::Softmax(id) | Op::Fill { id, .. } => vec![id],
            Op::Reshape { id, .. } => vec![id],
            Op::Gemm { c, .. } => vec![c],
            Op::RowColSum { row_acc, col_acc, .. } => vec![row_acc, col_acc],
            Op::Elementwise { dst, .. } => vec![dst],
            Op::Im2col { patches, .. } => vec![patches],
            Op::ConvScatter { output, .. } => vec![output],
            Op::Cast { dst, .. } => vec![dst],
            _ => vec![],
        }
    }

    /// Matrices read by this op (other than through a write target).
    pub fn reads(&self) -> Vec<MatrixId> {
        match *self {
            Op::Gemm { a, b, c, beta, .. } => {
                let mut v = vec![a, b];
                if beta != 0.0 {
                    v.push(c);
                }
                v
            }
            Op::RowColSum { a, .. } => vec![a],
            Op::Elementwise { src: Some(s), .. } => vec![s],
            Op::Im2col { input, .. } => vec![input],
            Op::ConvScatter { columns, .. } => vec![columns],
            Op::Cast { src, .. } => vec![src],
            Op::GetData(id) | Op::ReadReplica(id) => vec![id],
            _ => vec![],
        }
    }

    fn encode(&self, w: &mut Writer) {
        w.u8(self.code() as u8);
        match self {
            Op::DefineMatrix(d) => d.encode_into(w),
            Op::DestroyMatrix(id) | Op::SetData(id) | Op::GetData(id) | Op::Softmax(id) | Op::ReadReplica(id) => {
                w.u64(id.0);
            }
            Op::Reshape { id, precision, layout } => {
                w.u64(id.0).u8(precision.tag()).u32(layout.tiles.len() as u32);
                for (e, o) in &layout.tiles {
                    w.u64(e.row_start as u64).u64(e.row_count as u64);
                    w.u64(e.col_start as u64).u64(e.col_count as u64).u32(o.0);
                }
            }
            Op::Gemm { a, b, c, alpha, beta, trans_a, trans_b, order } => {
                w.u64(a.0).u64(b.0).u64(c.0).f64(*alpha).f64(*beta);
                w.u8(*trans_a as u8).u8(*trans_b as u8).u8(matches!(order, Accumulation::ArrivalOrder) as u8);
            }
            Op::RowColSum { a, row_acc, col_acc, alpha, deterministic } => {
                w.u64(a.0).u64(row_acc.0).u64(col_acc.0).f64(*alpha).u8(*deterministic as u8);
            }
            Op::Elementwise { op, dst, src, scalar } => {
                w.u8(op.tag()).u64(dst.0).u64(src.map_or(u64::MAX, |s| s.0)).f64(*scalar);
            }
            Op::Im2col { input, patches, geom } => {
                w.u64(input.0).u64(patches.0);
                geom.encode(w);
            }
            Op::ConvScatter { columns, output, geom } => {
                w.u64(columns.0).u64(output.0);
                geom.encode(w);
            }
            Op::Cast { src, dst } => {
                w.u64(src.0).u64(dst.0);
            }
            Op::Fill { id, seed, lo, hi } => {
                w.u64(id.0).u64(*seed).f64(*lo).f64(*hi);
            }
            Op::ReplicateStart { id, version, chunk } => {
                w.u64(id.0).u64(*version).u64(*chunk as u64);
            }
            Op::ReplicateDrain { id, version } => {
                w.u64(id.0).u64(*version);
            }
            Op::SetSeed(s) => {
                w.u64(*s);
            }
            Op::Replay(p) => {
                w.u64(p.0);
            }
            Op::Checksum | Op::PoolStats | Op::Shutdown => {}
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Op> {
        let code = r.u8()?;
        let id = |r: &mut Reader<'_>| r.u64().map(MatrixId);
        Ok(match code {
            1 => Op::DefineMatrix(MatrixDescriptor::decode_from(r)?),
            2 => Op::DestroyMatrix(id(r)?),
            3 => Op::SetData(id(r)?),
            4 => Op::GetData(id(r)?),
            5 => {
                let m = id(r)?;
                let precision = Precision::from_tag(r.u8()?)?;
                let n = r.u32()? as usize;
                let mut tiles = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    let e = crate::layout::TileExtent::new(r.usize()?, r.usize()?, r.usize()?, r.usize()?);
                    tiles.push((e, crate::layout::WorkerId(r.u32()?)));
                }
                Op::Reshape { id: m, precision, layout: Layout { tiles } }
            }
            6 => Op::Gemm {
                a: id(r)?,
                b: id(r)?,
                c: id(r)?,
                alpha: r.f64()?,
                beta: r.f64()?,
                trans_a: r.u8()? != 0,
                trans_b: r.u8()? != 0,
                order: if r.u8()? != 0 { Accumulation::ArrivalOrder } else { Accumulation::AscendingK },
            },
            7 => Op::RowColSum { a: id(r)?, row_acc: id(r)?, col_acc: id(r)?, alpha: r.f64()?, deterministic: r.u8()? != 0 },
            8 => {
                let op = EwOp::from_tag(r.u8()?)?;
                let dst = id(r)?;
                let src = r.u64()?;
                Op::Elementwise { op, dst, src: (src != u64::MAX).then_some(MatrixId(src)), scalar: r.f64()? }
            }
            9 => Op::Softmax(id(r)?),
            10 => Op::Im2col { input: id(r)?, patches: id(r)?, geom: ConvGeometry::decode(r)? },
            11 => Op::ConvScatter { columns: id(r)?, output: id(r)?, geom: ConvGeometry::decode(r)? },
            12 => Op::Cast { src: id(r)?, dst: id(r)? },
            13 => Op::Fill { id: id(r)?, seed: r.u64()?, lo: r.f64()?, hi: r.f64()? },
            14 => Op::ReplicateStart { id: id(r)?, version: r.u64()?, chunk: r.usize()? },
            15 => Op::ReplicateDrain { id: id(r)?, version: r.u64()? },
            16 => Op::ReadReplica(id(r)?),
            17 => Op::SetSeed(r.u64()?),
            18 => Op::Replay(PipelineId(r.u64()?)),
            19 => Op::Checksum,
            20 => Op::PoolStats,
            21 => Op::Shutdown,
            c => return Err(Error::Decode(format!("opcode {c}"))),
        })
    }
}

/// An op plus the session context workers need to execute it identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub record: Option<PipelineId>,
    /// Operands every worker holds a valid replica of at the current version.
    pub replicated: Vec<MatrixId>,
    pub op: Op,
}

impl Envelope {
    pub fn new(op: Op) -> Self {
        Envelope { record: None, replicated: Vec::new(), op }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.record.map_or(0, |p| p.0));
        w.u32(self.replicated.len() as u32);
        for m in &self.replicated {
            w.u64(m.0);
        }
        self.op.encode(&mut w);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Envelope> {
        let mut r = Reader::new(bytes);
        let record = match r.u64()? {
            0 => None,
            p => Some(PipelineId(p)),
        };
        let n = r.u32()? as usize;
        if n > r.remaining() / 8 {
            return Err(Error::Decode("replicated operand count".into()));
        }
        let replicated = (0..n).map(|_| r.u64().map(MatrixId)).collect::<Result<_>>()?;
        let op = Op::decode(&mut r)?;
        r.expect_end()?;
        Ok(Envelope { record, replicated, op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{worker_range, WorkerId};

    fn samples() -> Vec<Op> {
        let geom = ConvGeometry { n: 2, c: 3, h: 8, w: 8, k: 4, r: 3, s: 3, stride: 1, pad: 1 };
        vec![
            Op::DefineMatrix(MatrixDescriptor {
                id: MatrixId(3),
                rows: 4,
                cols: 5,
                precision: Precision::Double,
                layout: Layout::row_block(4, 5, &worker_range(3)).unwrap(),
                version: 2,
            }),
            Op::Reshape { id: MatrixId(1), precision: Precision::Half, layout: Layout::single(2, 2, WorkerId(1)) },
            Op::Gemm {
                a: MatrixId(1),
                b: MatrixId(2),
                c: MatrixId(3),
                alpha: 0.5,
                beta: -1.0,
                trans_a: true,
                trans_b: false,
                order: Accumulation::ArrivalOrder,
            },
            Op::RowColSum { a: MatrixId(1), row_acc: MatrixId(2), col_acc: MatrixId(3), alpha: 2.0, deterministic: true },
            Op::Elementwise { op: EwOp::Axpy, dst: MatrixId(1), src: Some(MatrixId(2)), scalar: -0.1 },
            Op::Elementwise { op: EwOp::Relu, dst: MatrixId(1), src: None, scalar: 0.0 },
            Op::Im2col { input: MatrixId(1), patches: MatrixId(2), geom },
            Op::ConvScatter { columns: MatrixId(1), output: MatrixId(2), geom },
            Op::Fill { id: MatrixId(4), seed: 99, lo: -1.0, hi: 1.0 },
            Op::ReplicateStart { id: MatrixId(4), version: 7, chunk: 1 << 20 },
            Op::Replay(PipelineId(3)),
            Op::Checksum,
            Op::Shutdown,
        ]
    }

    #[test]
    fn envelopes_round_trip() {
        for op in samples() {
            let env = Envelope { record: Some(PipelineId(5)), replicated: vec![MatrixId(9)], op };
            let b = env.encode();
            assert_eq!(Envelope::decode(&b).unwrap(), env);
        }
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(Envelope::decode(&[]).is_err());
        let mut b = Envelope::new(Op::Checksum).encode();
        b.push(0);
        assert!(Envelope::decode(&b).is_err());
        let mut b = Envelope::new(Op::Checksum).encode();
        *b.last_mut().unwrap() = 200;
        assert!(Envelope::decode(&b).is_err());
    }

    #[test]
    fn conv_output_formula() {
        let g = ConvGeometry { n: 1, c: 1, h: 8, w: 7, k: 1, r: 3, s: 3, stride: 2, pad: 1 };
        assert_eq!(g.out_h(), 4);
        assert_eq!(g.out_w(), 4);
    }
}
