//! Distributed kernels: transfer planning, local arithmetic and the
//! master-side entry points.
//!
//! Every kernel accepts operands in any valid layout. Data a worker needs but
//! does not own is fetched from the owners, or read from a valid replica.

pub mod local;
pub mod plan;

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::ops::{Accumulation, ConvGeometry, EwOp, Op};
use crate::precision::{ComputePrecision, Precision};
use crate::session::{DistMatrix, Session};

impl Session {
    fn same_shape(&self, a: DistMatrix, b: DistMatrix) -> Result<()> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1)));
        }
        Ok(())
    }

    /// C <- alpha*op(A)*op(B) + beta*C, accumulated in the session's mode.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm(&mut self, a: DistMatrix, b: DistMatrix, c: DistMatrix, alpha: f64, beta: f64, trans_a: bool, trans_b: bool) -> Result<()> {
        let order = if self.deterministic() { Accumulation::AscendingK } else { Accumulation::ArrivalOrder };
        self.gemm_with(a, b, c, alpha, beta, trans_a, trans_b, order)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn gemm_with(
        &mut self,
        a: DistMatrix,
        b: DistMatrix,
        c: DistMatrix,
        alpha: f64,
        beta: f64,
        trans_a: bool,
        trans_b: bool,
        order: Accumulation,
    ) -> Result<()> {
        let (ar, ac) = self.shape(a)?;
        let (br, bc) = self.shape(b)?;
        let (cr, cc) = self.shape(c)?;
        let (m, ka) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if ka != kb || m != cr || n != cc {
            return Err(Error::ShapeMismatch(format!("gemm op(A) {m}x{ka}, op(B) {kb}x{n}, C {cr}x{cc}")));
        }
        if c == a || c == b {
            return Err(Error::ShapeMismatch("gemm output aliases an input".into()));
        }
        self.issue(Op::Gemm { a: a.id, b: b.id, c: c.id, alpha, beta, trans_a, trans_b, order })?;
        Ok(())
    }

    /// row_acc[i] += alpha*sum_j A[i,j]; col_acc[j] += alpha*sum_i A[i,j].
    pub fn add_row_col_sum(
        &mut self,
        a: DistMatrix,
        row_acc: DistMatrix,
        col_acc: DistMatrix,
        alpha: f64,
        deterministic: bool,
    ) -> Result<()> {
        let (r, c) = self.shape(a)?;
        if self.shape(row_acc)? != (r, 1) || self.shape(col_acc)? != (1, c) {
            return Err(Error::ShapeMismatch(format!("accumulators must be {r}x1 and 1x{c}")));
        }
        if row_acc == col_acc || row_acc == a || col_acc == a {
            return Err(Error::ShapeMismatch("row/col sum operands must be distinct".into()));
        }
        self.issue(Op::RowColSum { a: a.id, row_acc: row_acc.id, col_acc: col_acc.id, alpha, deterministic })?;
        Ok(())
    }

    pub fn elementwise(&mut self, op: EwOp, dst: DistMatrix, src: Option<DistMatrix>, scalar: f64) -> Result<()> {
        match (op.is_binary(), src) {
            (true, Some(s)) => self.same_shape(dst, s)?,
            (true, None) => return Err(Error::ShapeMismatch(format!("{op:?} needs a source operand"))),
            (false, _) => {
                self.descriptor(dst)?;
            }
        }
        self.issue(Op::Elementwise { op, dst: dst.id, src: src.filter(|_| op.is_binary()).map(|s| s.id), scalar })?;
        Ok(())
    }

    /// dst += src
    pub fn add(&mut self, dst: DistMatrix, src: DistMatrix) -> Result<()> {
        self.elementwise(EwOp::Add, dst, Some(src), 0.0)
    }

    /// dst -= src
    pub fn sub(&mut self, dst: DistMatrix, src: DistMatrix) -> Result<()> {
        self.elementwise(EwOp::Sub, dst, Some(src), 0.0)
    }

    pub fn mul_scalar(&mut self, dst: DistMatrix, s: f64) -> Result<()> {
        self.elementwise(EwOp::MulScalar, dst, None, s)
    }

    pub fn relu(&mut self, dst: DistMatrix) -> Result<()> {
        self.elementwise(EwOp::Relu, dst, None, 0.0)
    }

    /// dst[i] = activation[i] > 0 ? dst[i] : 0
    pub fn relu_grad(&mut self, dst: DistMatrix, activation: DistMatrix) -> Result<()> {
        self.elementwise(EwOp::ReluGrad, dst, Some(activation), 0.0)
    }

    /// y += a*x
    pub fn axpy(&mut self, a: f64, x: DistMatrix, y: DistMatrix) -> Result<()> {
        self.elementwise(EwOp::Axpy, y, Some(x), a)
    }

    pub fn set_scalar(&mut self, dst: DistMatrix, v: f64) -> Result<()> {
        self.elementwise(EwOp::Set, dst, None, v)
    }

    /// Uniform values in [lo, hi) keyed by (seed, global element index), so
    /// the result does not depend on layout or worker count.
    pub fn fill_uniform(&mut self, m: DistMatrix, seed: u64, lo: f64, hi: f64) -> Result<()> {
        self.descriptor(m)?;
        self.issue(Op::Fill { id: m.id, seed, lo, hi })?;
        Ok(())
    }

    pub fn softmax_rows(&mut self, a: DistMatrix) -> Result<()> {
        self.descriptor(a)?;
        self.issue(Op::Softmax(a.id))?;
        Ok(())
    }

    pub fn cast_precision(&mut self, src: DistMatrix, dst: DistMatrix) -> Result<()> {
        self.same_shape(src, dst)?;
        if src == dst {
            return Ok(());
        }
        self.issue(Op::Cast { src: src.id, dst: dst.id })?;
        Ok(())
    }

    /// Direct convolution via im2col and the distributed gemm.
    /// input is N x (C*H*W), filters K x (C*R*S), output N x (K*H'*W').
    pub fn conv2d_forward(&mut self, input: DistMatrix, filters: DistMatrix, output: DistMatrix, geom: ConvGeometry) -> Result<()> {
        geom.validate()?;
        let positions = geom.positions();
        let checks = [
            (self.shape(input)?, (geom.n, geom.c * geom.h * geom.w), "input"),
            (self.shape(filters)?, (geom.k, geom.patch_len()), "filters"),
            (self.shape(output)?, (geom.n, geom.k * positions), "output"),
        ];
        for (have, want, what) in checks {
            if have != want {
                return Err(Error::Geometry(format!("{what} is {}x{}, geometry needs {}x{}", have.0, have.1, want.0, want.1)));
            }
        }
        let precs = [self.descriptor(input)?.precision, self.descriptor(filters)?.precision, self.descriptor(output)?.precision];
        let tmp = match ComputePrecision::of(&precs) {
            ComputePrecision::Single => Precision::Single,
            ComputePrecision::Double => Precision::Double,
        };
        let workers = self.worker_ids().to_vec();
        let rows = geom.n * positions;
        let patches = self.create_matrix(rows, geom.patch_len(), tmp, Layout::row_block(rows, geom.patch_len(), &workers)?)?;
        let columns = match self.create_matrix(rows, geom.k, tmp, Layout::row_block(rows, geom.k, &workers)?) {
            Ok(c) => c,
            Err(e) => {
                let _ = self.destroy(patches);
                return Err(e);
            }
        };
        let res = (|| {
            self.issue(Op::Im2col { input: input.id, patches: patches.id, geom })?;
            self.gemm(patches, filters, columns, 1.0, 0.0, false, true)?;
            self.issue(Op::ConvScatter { columns: columns.id, output: output.id, geom })?;
            Ok(())
        })();
        let d1 = self.destroy(columns);
        let d2 = self.destroy(patches);
        res.and(d1).and(d2)
    }
}
