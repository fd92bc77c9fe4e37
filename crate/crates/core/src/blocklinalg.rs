//! Block-structured linear algebra for the stacked constraint system.
//!
//! The equality constraints of the smoothing problem stack into a block
//! bidiagonal matrix `A`: each step contributes a diagonal block
//! `[C_k 0 I; 0 S_k H_k]` and couples to the previous step through a
//! subdiagonal block `[0 0 -G_k; 0 0 0]`. The Gram matrix `A A^T` is block
//! tridiagonal and is factored once per problem; every affine projection
//! afterwards costs one forward/backward block sweep, linear in the horizon.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{BlockLayout, Problem};

/// Default relative pivot tolerance for the block Cholesky factorization.
/// Pivots are compared against their own diagonal entry, which separates
/// genuine rank deficiency from roundoff at double precision even when rows
/// carry very different scales.
pub const DEFAULT_PIVOT_TOL: f64 = 1e-10;

/// The stacked constraint matrix in block bidiagonal form.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockBidiagonal {
    diag: Vec<DMatrix<f64>>,
    sub: Vec<DMatrix<f64>>,
    layout: BlockLayout,
}

impl BlockBidiagonal {
    /// Builds the constraint matrix and the stacked right-hand side
    /// `(x_0, y_1, 0, y_2, ..., 0, y_N)` from a problem.
    pub fn assemble(problem: &Problem) -> Result<(Self, DVector<f64>)> {
        let n = problem.state_dim();
        let layout = problem.layout();
        let mut diag = Vec::with_capacity(problem.num_steps());
        let mut sub = Vec::with_capacity(problem.num_steps().saturating_sub(1));
        let mut rhs = DVector::zeros(layout.rows());

        for (k, step) in problem.steps.iter().enumerate() {
            let sl = layout.step(k);
            let r = sl.process_rank;
            let s = sl.measurement_rank;
            let m = sl.measurement_dim;
            if step.process_factor.shape() != (n, r) {
                return Err(Error::Dimension(format!(
                    "step {k}: process factor is {:?}, expected ({n}, {r})",
                    step.process_factor.shape()
                )));
            }
            if step.measurement_factor.shape() != (m, s) {
                return Err(Error::Dimension(format!(
                    "step {k}: measurement factor is {:?}, expected ({m}, {s})",
                    step.measurement_factor.shape()
                )));
            }

            let mut d = DMatrix::zeros(n + m, r + s + n);
            d.view_mut((0, 0), (n, r)).copy_from(&step.process_factor);
            d.view_mut((0, r + s), (n, n)).copy_from(&DMatrix::identity(n, n));
            if m > 0 {
                d.view_mut((n, r), (m, s)).copy_from(&step.measurement_factor);
                d.view_mut((n, r + s), (m, n)).copy_from(&step.measurement_map);
            }
            diag.push(d);

            if k > 0 {
                let prev = layout.step(k - 1);
                let width = prev.process_rank + prev.measurement_rank + n;
                let mut b = DMatrix::zeros(n + m, width);
                let mut target = b.view_mut((0, width - n), (n, n));
                target.copy_from(&step.transition);
                target.neg_mut();
                sub.push(b);
            }

            if k == 0 {
                rhs.rows_mut(sl.process_row, n).copy_from(&problem.initial_state);
            }
            if m > 0 {
                rhs.rows_mut(sl.measurement_row, m).copy_from(&step.observation);
            }
        }

        Ok((Self { diag, sub, layout }, rhs))
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn diag_blocks(&self) -> &[DMatrix<f64>] {
        &self.diag
    }

    pub fn sub_blocks(&self) -> &[DMatrix<f64>] {
        &self.sub
    }

    pub fn rows(&self) -> usize {
        self.layout.rows()
    }

    pub fn cols(&self) -> usize {
        self.layout.len()
    }

    /// `A v`, block by block.
    pub fn matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.cols() {
            return Err(Error::Dimension(format!(
                "matvec: vector has length {}, matrix has {} columns",
                v.len(),
                self.cols()
            )));
        }
        let mut out = DVector::zeros(self.rows());
        self.matvec_into(v, &mut out);
        Ok(out)
    }

    pub(crate) fn matvec_into(&self, v: &DVector<f64>, out: &mut DVector<f64>) {
        let n = self.layout.state_dim();
        for k in 0..self.layout.num_steps() {
            let sl = self.layout.step(k);
            let height = n + sl.measurement_dim;
            let width = sl.process_rank + sl.measurement_rank + n;
            let mut rows = out.rows_mut(sl.process_row, height);
            rows.gemv(1.0, &self.diag[k], &v.rows(sl.process_aux, width), 0.0);
            if k > 0 {
                let prev = self.layout.step(k - 1);
                let pwidth = prev.process_rank + prev.measurement_rank + n;
                rows.gemv(1.0, &self.sub[k - 1], &v.rows(prev.process_aux, pwidth), 1.0);
            }
        }
    }

    /// `A^T w`, block by block.
    pub fn matvec_transpose(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        if w.len() != self.rows() {
            return Err(Error::Dimension(format!(
                "matvec_transpose: vector has length {}, matrix has {} rows",
                w.len(),
                self.rows()
            )));
        }
        let mut out = DVector::zeros(self.cols());
        self.matvec_transpose_into(w, &mut out);
        Ok(out)
    }

    pub(crate) fn matvec_transpose_into(&self, w: &DVector<f64>, out: &mut DVector<f64>) {
        let n = self.layout.state_dim();
        for k in 0..self.layout.num_steps() {
            let sl = self.layout.step(k);
            let height = n + sl.measurement_dim;
            let width = sl.process_rank + sl.measurement_rank + n;
            let mut cols = out.rows_mut(sl.process_aux, width);
            cols.gemv_tr(1.0, &self.diag[k], &w.rows(sl.process_row, height), 0.0);
            if k + 1 < self.layout.num_steps() {
                let next = self.layout.step(k + 1);
                let nheight = n + next.measurement_dim;
                cols.gemv_tr(1.0, &self.sub[k], &w.rows(next.process_row, nheight), 1.0);
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows(), self.cols());
        let n = self.layout.state_dim();
        for k in 0..self.layout.num_steps() {
            let sl = self.layout.step(k);
            let height = n + sl.measurement_dim;
            let width = sl.process_rank + sl.measurement_rank + n;
            a.view_mut((sl.process_row, sl.process_aux), (height, width))
                .copy_from(&self.diag[k]);
            if k > 0 {
                let prev = self.layout.step(k - 1);
                let pwidth = prev.process_rank + prev.measurement_rank + n;
                a.view_mut((sl.process_row, prev.process_aux), (height, pwidth))
                    .copy_from(&self.sub[k - 1]);
            }
        }
        a
    }

    /// Writes the matrix in Matrix Market coordinate format (1-based indices,
    /// nonzeros only).
    pub fn write_matrix_market<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let mut entries = Vec::new();
        for k in 0..self.layout.num_steps() {
            let sl = self.layout.step(k);
            push_block_entries(&mut entries, &self.diag[k], sl.process_row, sl.process_aux);
            if k > 0 {
                let prev = self.layout.step(k - 1);
                push_block_entries(&mut entries, &self.sub[k - 1], sl.process_row, prev.process_aux);
            }
        }
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.rows(), self.cols(), entries.len())?;
        for (i, j, v) in entries {
            writeln!(w, "{} {} {}", i + 1, j + 1, v)?;
        }
        Ok(())
    }
}

fn push_block_entries(
    entries: &mut Vec<(usize, usize, f64)>,
    block: &DMatrix<f64>,
    row0: usize,
    col0: usize,
) {
    for j in 0..block.ncols() {
        for i in 0..block.nrows() {
            let v = block[(i, j)];
            if v != 0.0 {
                entries.push((row0 + i, col0 + j, v));
            }
        }
    }
}

/// The Gram matrix `A A^T` in block tridiagonal form.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    diag: Vec<DMatrix<f64>>,
    offdiag: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    /// `diag_k = D_k D_k^T + B_{k-1} B_{k-1}^T`, `offdiag_k = B_k D_k^T`.
    pub fn gram(a: &BlockBidiagonal) -> Self {
        let nblocks = a.diag_blocks().len();
        let mut diag = Vec::with_capacity(nblocks);
        let mut offdiag = Vec::with_capacity(nblocks.saturating_sub(1));
        for k in 0..nblocks {
            let d = &a.diag_blocks()[k];
            let mut g = d * d.transpose();
            if k > 0 {
                let b = &a.sub_blocks()[k - 1];
                g += b * b.transpose();
            }
            diag.push(g);
            if k + 1 < nblocks {
                offdiag.push(&a.sub_blocks()[k] * d.transpose());
            }
        }
        Self { diag, offdiag }
    }

    /// Builds from explicit blocks; `offdiag[k]` couples block rows `k + 1`
    /// (its rows) with block `k` (its columns).
    pub fn from_blocks(diag: Vec<DMatrix<f64>>, offdiag: Vec<DMatrix<f64>>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::Dimension("need at least one diagonal block".into()));
        }
        if offdiag.len() + 1 != diag.len() {
            return Err(Error::Dimension(format!(
                "{} diagonal blocks need {} off-diagonal blocks, got {}",
                diag.len(),
                diag.len() - 1,
                offdiag.len()
            )));
        }
        for (k, d) in diag.iter().enumerate() {
            if d.nrows() != d.ncols() {
                return Err(Error::Dimension(format!("diagonal block {k} is not square")));
            }
        }
        for (k, b) in offdiag.iter().enumerate() {
            if b.nrows() != diag[k + 1].nrows() || b.ncols() != diag[k].nrows() {
                return Err(Error::Dimension(format!(
                    "off-diagonal block {k} has shape {:?}, expected ({}, {})",
                    b.shape(),
                    diag[k + 1].nrows(),
                    diag[k].nrows()
                )));
            }
        }
        Ok(Self { diag, offdiag })
    }

    pub fn diag_blocks(&self) -> &[DMatrix<f64>] {
        &self.diag
    }

    pub fn offdiag_blocks(&self) -> &[DMatrix<f64>] {
        &self.offdiag
    }

    pub fn rows(&self) -> usize {
        self.diag.iter().map(DMatrix::nrows).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let total = self.rows();
        let mut t = DMatrix::zeros(total, total);
        let mut off = 0usize;
        for (k, d) in self.diag.iter().enumerate() {
            let p = d.nrows();
            t.view_mut((off, off), (p, p)).copy_from(d);
            if k + 1 < self.diag.len() {
                let b = &self.offdiag[k];
                t.view_mut((off + p, off), (b.nrows(), p)).copy_from(b);
                t.view_mut((off, off + p), (p, b.nrows())).copy_from(&b.transpose());
            }
            off += p;
        }
        t
    }

    /// Matrix Market coordinate output of the lower triangle (symmetric).
    pub fn write_matrix_market<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let mut entries = Vec::new();
        let mut off = 0usize;
        for (k, d) in self.diag.iter().enumerate() {
            for j in 0..d.ncols() {
                for i in j..d.nrows() {
                    let v = d[(i, j)];
                    if v != 0.0 {
                        entries.push((off + i, off + j, v));
                    }
                }
            }
            if k + 1 < self.diag.len() {
                push_block_entries(&mut entries, &self.offdiag[k], off + d.nrows(), off);
            }
            off += d.nrows();
        }
        let total = self.rows();
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(w, "{} {} {}", total, total, entries.len())?;
        for (i, j, v) in entries {
            writeln!(w, "{} {} {}", i + 1, j + 1, v)?;
        }
        Ok(())
    }
}

/// Block Cholesky factor `L L^T` of a block tridiagonal matrix: `L` has the
/// same block bidiagonal shape, with lower-triangular diagonal blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCholeskyFactor {
    diag: Vec<DMatrix<f64>>,
    sub: Vec<DMatrix<f64>>,
    offsets: Vec<usize>,
    total: usize,
}

impl BlockCholeskyFactor {
    /// Sweeps `L_k L_k^T = diag_k - M_{k-1} M_{k-1}^T`,
    /// `M_k = offdiag_k L_k^{-T}`. Fails with the offending time index when a
    /// pivot is not positive definite above `pivot_tol` (relative to the
    /// corresponding original diagonal entry), which signals that the
    /// constraint matrix lacks full row rank.
    pub fn factor(t: &BlockTridiagonal, pivot_tol: f64) -> Result<Self> {
        let nblocks = t.diag_blocks().len();
        let mut diag = Vec::with_capacity(nblocks);
        let mut sub = Vec::with_capacity(nblocks.saturating_sub(1));
        let mut offsets = Vec::with_capacity(nblocks);
        let mut total = 0usize;

        let mut schur = t.diag_blocks()[0].clone();
        for k in 0..nblocks {
            offsets.push(total);
            total += schur.nrows();
            let reference = t.diag_blocks()[k].diagonal();
            let l = dense_cholesky_lower(&schur, &reference, pivot_tol, k)?;
            if k + 1 < nblocks {
                // M_k^T = L_k^{-1} offdiag_k^T
                let mut mt = t.offdiag_blocks()[k].transpose();
                if !l.solve_lower_triangular_mut(&mut mt) {
                    return Err(Error::RankDeficient {
                        step: k,
                        message: "triangular solve failed during factorization".into(),
                    });
                }
                let m = mt.transpose();
                schur = t.diag_blocks()[k + 1].clone();
                schur -= &m * m.transpose();
                sub.push(m);
            }
            diag.push(l);
        }
        Ok(Self { diag, sub, offsets, total })
    }

    pub fn diag_blocks(&self) -> &[DMatrix<f64>] {
        &self.diag
    }

    pub fn sub_blocks(&self) -> &[DMatrix<f64>] {
        &self.sub
    }

    /// Solves `L L^T x = v` in place by a forward then backward block sweep.
    pub fn solve_in_place(&self, v: &mut DVector<f64>) -> Result<()> {
        if v.len() != self.total {
            return Err(Error::Dimension(format!(
                "factor of size {} applied to vector of length {}",
                self.total,
                v.len()
            )));
        }
        let nblocks = self.diag.len();
        let max_block = self.diag.iter().map(DMatrix::nrows).max().unwrap_or(0);
        let mut carry = DVector::zeros(max_block);

        for k in 0..nblocks {
            let p = self.diag[k].nrows();
            if k > 0 {
                let prev_p = self.diag[k - 1].nrows();
                carry.rows_mut(0, prev_p)
                    .copy_from(&v.rows(self.offsets[k - 1], prev_p));
                v.rows_mut(self.offsets[k], p)
                    .gemv(-1.0, &self.sub[k - 1], &carry.rows(0, prev_p), 1.0);
            }
            let mut block = v.rows_mut(self.offsets[k], p);
            if !self.diag[k].solve_lower_triangular_mut(&mut block) {
                return Err(Error::RankDeficient {
                    step: k,
                    message: "forward substitution failed".into(),
                });
            }
        }
        for k in (0..nblocks).rev() {
            let p = self.diag[k].nrows();
            if k + 1 < nblocks {
                let next_p = self.diag[k + 1].nrows();
                carry.rows_mut(0, next_p)
                    .copy_from(&v.rows(self.offsets[k + 1], next_p));
                v.rows_mut(self.offsets[k], p)
                    .gemv_tr(-1.0, &self.sub[k], &carry.rows(0, next_p), 1.0);
            }
            let mut block = v.rows_mut(self.offsets[k], p);
            if !self.diag[k].tr_solve_lower_triangular_mut(&mut block) {
                return Err(Error::RankDeficient {
                    step: k,
                    message: "backward substitution failed".into(),
                });
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.total, self.total);
        for (k, d) in self.diag.iter().enumerate() {
            l.view_mut((self.offsets[k], self.offsets[k]), d.shape()).copy_from(d);
            if k + 1 < self.diag.len() {
                let m = &self.sub[k];
                l.view_mut((self.offsets[k + 1], self.offsets[k]), m.shape()).copy_from(m);
            }
        }
        l
    }
}

/// Unblocked dense Cholesky with a per-row relative pivot test; `reference`
/// holds the original diagonal entries used for the relative comparison.
fn dense_cholesky_lower(
    block: &DMatrix<f64>,
    reference: &DVector<f64>,
    pivot_tol: f64,
    step: usize,
) -> Result<DMatrix<f64>> {
    let p = block.nrows();
    let mut l = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut d = block[(j, j)];
        for s in 0..j {
            d -= l[(j, s)] * l[(j, s)];
        }
        let scale = reference[j].abs();
        if d <= pivot_tol * scale || !d.is_finite() {
            return Err(Error::RankDeficient {
                step,
                message: format!(
                    "Cholesky pivot {d:.3e} at local row {j} fell below \
                     {pivot_tol:.1e} of its diagonal entry {scale:.3e}"
                ),
            });
        }
        let root = d.sqrt();
        l[(j, j)] = root;
        for i in (j + 1)..p {
            let mut v = block[(i, j)];
            for s in 0..j {
                v -= l[(i, s)] * l[(j, s)];
            }
            l[(i, j)] = v / root;
        }
    }
    Ok(l)
}

/// Euclidean projection onto the affine set `A z = w_hat`: solves the KKT
/// system through the cached Gram factor and returns
/// `z = eta - A^T (A A^T)^{-1} (A eta - w_hat)`.
pub fn solve_affine_projection(
    a: &BlockBidiagonal,
    factor: &BlockCholeskyFactor,
    w_hat: &DVector<f64>,
    eta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(a.cols());
    let mut residual = DVector::zeros(a.rows());
    solve_affine_projection_into(a, factor, w_hat, eta, &mut residual, &mut out)?;
    Ok(out)
}

pub(crate) fn solve_affine_projection_into(
    a: &BlockBidiagonal,
    factor: &BlockCholeskyFactor,
    w_hat: &DVector<f64>,
    eta: &DVector<f64>,
    residual: &mut DVector<f64>,
    out: &mut DVector<f64>,
) -> Result<()> {
    if eta.len() != a.cols() || w_hat.len() != a.rows() {
        return Err(Error::Dimension(
            "projection inputs do not match the constraint matrix".into(),
        ));
    }
    a.matvec_into(eta, residual);
    *residual -= w_hat;
    factor.solve_in_place(residual)?;
    a.matvec_transpose_into(residual, out);
    out.neg_mut();
    *out += eta;
    Ok(())
}
