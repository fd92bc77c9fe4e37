//! Small symmetric-eigendecomposition helpers shared by the model builders
//! and the reference oracles.

use nalgebra::{DMatrix, SymmetricEigen};

/// Rank-revealing square root of a symmetric PSD matrix: returns an
/// `n x rank` factor `F` with `F F^T` equal to the PSD part of the input.
/// Eigenvalues below `rel_tol` of the largest are truncated.
pub(crate) fn psd_factor(sym: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = sym.nrows();
    let eig = SymmetricEigen::new(sym.clone());
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rel_tol * max_ev.max(f64::MIN_POSITIVE);
    let kept: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > cutoff).collect();
    let mut factor = DMatrix::zeros(n, kept.len());
    for (j, &i) in kept.iter().enumerate() {
        let scale = eig.eigenvalues[i].sqrt();
        factor.column_mut(j).copy_from(&(eig.eigenvectors.column(i) * scale));
    }
    factor
}

/// Symmetric pseudo-inverse with relative eigenvalue cutoff.
pub(crate) fn symmetric_pinv(sym: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    apply_spectrum(sym, rel_tol, |ev| 1.0 / ev)
}

/// Symmetric pseudo-inverse square root `M^{+1/2}` with relative cutoff.
pub(crate) fn symmetric_pinv_sqrt(sym: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    apply_spectrum(sym, rel_tol, |ev| 1.0 / ev.sqrt())
}

fn apply_spectrum(sym: &DMatrix<f64>, rel_tol: f64, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = sym.nrows();
    let eig = SymmetricEigen::new(sym.clone());
    let max_ev = eig
        .eigenvalues
        .iter()
        .map(|ev| ev.abs())
        .fold(0.0_f64, f64::max);
    let cutoff = rel_tol * max_ev.max(f64::MIN_POSITIVE);
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let ev = eig.eigenvalues[i];
        if ev > cutoff {
            let v = eig.eigenvectors.column(i);
            out += v * v.transpose() * f(ev);
        }
    }
    out
}
