//! Small dense linear-algebra helpers shared by the SDP engine.

use nalgebra::{DMatrix, DVector};

/// Symmetric eigendecomposition, returning `(eigenvectors, eigenvalues)`
/// with eigenvalues in ascending order. Backed by faer's self-adjoint
/// solver, which is substantially faster than nalgebra's at the matrix
/// sizes the walk produces.
pub(crate) fn sym_eig(mat: &DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let m = mat.nrows();
    debug_assert_eq!(m, mat.ncols());
    if m == 0 {
        return Some((DMatrix::zeros(0, 0), DVector::zeros(0)));
    }
    let fm = faer::Mat::from_fn(m, m, |i, j| mat[(i, j)]);
    let eig = fm.self_adjoint_eigen(faer::Side::Lower).ok()?;
    let vals = eig.S().column_vector();
    let vecs = eig.U();
    let q = DMatrix::from_fn(m, m, |i, j| vecs[(i, j)]);
    let lambda = DVector::from_fn(m, |i, _| vals[i]);
    Some((q, lambda))
}

/// Smallest eigenvalue of a symmetric matrix. Empty matrices report 0.
pub(crate) fn min_eig(mat: &DMatrix<f64>) -> Option<f64> {
    if mat.nrows() == 0 {
        return Some(0.0);
    }
    let (_, lambda) = sym_eig(mat)?;
    Some(lambda.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Modified Gram-Schmidt with a drop tolerance: vectors whose residual
/// after projection falls below `drop_tol` (relative to their original
/// norm, floored at 1) are discarded. Two passes for stability.
pub(crate) fn orthonormalize(vectors: &[DVector<f64>], drop_tol: f64) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        let scale = v.norm().max(1.0);
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let nw = w.norm();
        if nw > drop_tol * scale {
            basis.push(w / nw);
        }
    }
    basis
}

/// Rebuild `q * diag(vals) * q^T`, skipping eigenpairs with zero weight.
pub(crate) fn reconstruct(q: &DMatrix<f64>, vals: &DVector<f64>) -> DMatrix<f64> {
    let m = q.nrows();
    let mut out = DMatrix::zeros(m, m);
    for k in 0..vals.len() {
        let lam = vals[k];
        if lam != 0.0 {
            let col = q.column(k);
            out.syger(lam, &col, &col, 1.0);
        }
    }
    // syger fills the lower triangle; mirror it.
    for i in 0..m {
        for j in (i + 1)..m {
            out[(i, j)] = out[(j, i)];
        }
    }
    out
}
