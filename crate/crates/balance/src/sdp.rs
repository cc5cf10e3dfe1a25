//! Per-step feasibility SDP: constraint assembly, a projection/retraction
//! solver, the post-hoc residual checker, and covariance sampling of the
//! coloring update.
//!
//! Correctness is defined solely by [`check_solution`]: the solver is free
//! to produce `U` however it likes, and every accepted solution is
//! re-verified through dense symmetric eigendecompositions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg;

/// Spectral-independence factor in `U <= si_factor * diag(U)`.
pub const SI_FACTOR: f64 = 10.0;
/// Trace floor coefficient: `Tr(U) >= 0.1 * m`.
pub const TRACE_FLOOR_COEFF: f64 = 0.1;
/// Per-entry diagonal cap: `U_jj <= 1`.
pub const DIAG_CAP: f64 = 1.0;
/// Blocking subspace budget: `dim(H) <= 0.1 * m`.
pub const BLOCKING_DIM_COEFF: f64 = 0.1;
/// ASI row budget: `#rows <= 0.1 * gamma_asi * m`.
pub const ASI_ROW_COEFF: f64 = 0.1;
/// Gram-Schmidt drop tolerance for the blocking basis.
pub const GS_DROP_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("constraint budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("asi row {index} has a nonzero coordinate past its masked prefix")]
    MaskedRowViolation { index: usize },
    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("U must be {m}x{m}, got {rows}x{cols}")]
    DimensionMismatch { m: usize, rows: usize, cols: usize },
    #[error("solver hit the iteration cap with a failing residual report")]
    MaxIterExceeded { best: Box<SdpSolution> },
    #[error("eigendecomposition failed to converge")]
    NumericalBreakdown,
    #[error("cannot sample from a matrix with nonpositive trace")]
    ZeroTrace,
}

/// One row of the ASI constraint matrix `E`: a window row masked to a
/// guarded prefix. Coordinates at positions `>= masked_len` must be
/// exactly zero.
#[derive(Debug, Clone)]
pub struct AsiRow {
    pub masked_len: usize,
    pub row: DVector<f64>,
}

/// The fixed constraint family for one walk step.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    m: usize,
    window_rows: Vec<DVector<f64>>,
    blocking_basis: Vec<DVector<f64>>,
    asi_rows: Vec<AsiRow>,
    si_factor: f64,
    gamma_asi: f64,
    trace_floor: f64,
    diag_cap: f64,
    /// orthonormal basis of span(window rows + blocking basis)
    joint_basis: Vec<DVector<f64>>,
}

impl SdpProblem {
    /// Assembles and validates the problem. The blocking basis is
    /// orthonormalized internally; budget violations signal a
    /// data-structure bug upstream and are rejected.
    pub fn build(
        m: usize,
        window_rows: Vec<DVector<f64>>,
        blocking_vectors: Vec<DVector<f64>>,
        asi_rows: Vec<AsiRow>,
        gamma_asi: f64,
    ) -> Result<Self, SdpError> {
        assert!(m >= 1, "window size must be >= 1");
        for v in window_rows.iter().chain(blocking_vectors.iter()) {
            if v.len() != m {
                return Err(SdpError::LengthMismatch {
                    expected: m,
                    got: v.len(),
                });
            }
        }
        for (index, r) in asi_rows.iter().enumerate() {
            if r.row.len() != m {
                return Err(SdpError::LengthMismatch {
                    expected: m,
                    got: r.row.len(),
                });
            }
            if r.row.iter().skip(r.masked_len).any(|&v| v != 0.0) {
                return Err(SdpError::MaskedRowViolation { index });
            }
        }
        let blocking_basis = linalg::orthonormalize(&blocking_vectors, GS_DROP_TOL);
        if blocking_basis.len() as f64 > BLOCKING_DIM_COEFF * m as f64 {
            return Err(SdpError::BudgetExceeded(format!(
                "dim(H) = {} > {} = 0.1 m",
                blocking_basis.len(),
                BLOCKING_DIM_COEFF * m as f64
            )));
        }
        if asi_rows.len() as f64 > ASI_ROW_COEFF * gamma_asi * m as f64 {
            return Err(SdpError::BudgetExceeded(format!(
                "{} asi rows > {} = 0.1 gamma m",
                asi_rows.len(),
                ASI_ROW_COEFF * gamma_asi * m as f64
            )));
        }
        let joint: Vec<DVector<f64>> = window_rows
            .iter()
            .chain(blocking_basis.iter())
            .cloned()
            .collect();
        let joint_basis = linalg::orthonormalize(&joint, GS_DROP_TOL);
        Ok(Self {
            m,
            window_rows,
            blocking_basis,
            asi_rows,
            si_factor: SI_FACTOR,
            gamma_asi,
            trace_floor: TRACE_FLOOR_COEFF * m as f64,
            diag_cap: DIAG_CAP,
            joint_basis,
        })
    }

    /// Overrides the spectral-independence factor (checker experiments).
    pub fn with_si_factor(mut self, si_factor: f64) -> Self {
        self.si_factor = si_factor;
        self
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn window_rows(&self) -> &[DVector<f64>] {
        &self.window_rows
    }

    pub fn blocking_dim(&self) -> usize {
        self.blocking_basis.len()
    }

    pub fn asi_row_count(&self) -> usize {
        self.asi_rows.len()
    }

    /// Orthonormal basis of the blocked subspace (window rows plus the
    /// blocking basis); the equality constraints hold exactly on its
    /// orthogonal complement.
    pub fn joint_basis(&self) -> &[DVector<f64>] {
        &self.joint_basis
    }

    #[doc(hidden)]
    pub fn asi_rows_for_tests(&self) -> &[AsiRow] {
        &self.asi_rows
    }

    /// The ASI constraint matrix `E` as a dense `k x m` matrix.
    fn asi_matrix(&self) -> DMatrix<f64> {
        let k = self.asi_rows.len();
        let mut e = DMatrix::zeros(k, self.m);
        for (r, row) in self.asi_rows.iter().enumerate() {
            e.row_mut(r).copy_from(&row.row.transpose());
        }
        e
    }

    /// `E U E^T` for the current ASI rows; empty when there are none.
    fn asi_gram(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let e = self.asi_matrix();
        let eu = &e * u;
        let mut gram = &eu * e.transpose();
        // symmetrize against accumulation drift
        let k = gram.nrows();
        for a in 0..k {
            for b in (a + 1)..k {
                let v = 0.5 * (gram[(a, b)] + gram[(b, a)]);
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        gram
    }
}

/// One residual per constraint line, computed by eigendecomposition.
#[derive(Debug, Clone, Serialize)]
pub struct ConstraintReport {
    pub m: usize,
    pub trace: f64,
    /// `max_j (U_jj - 1)`; may be negative.
    pub diag_excess: f64,
    /// `max(0, 0.1 m - Tr U)`.
    pub trace_deficit: f64,
    /// `max_i |<U, a_i a_i^T>|` over window rows.
    pub window_residual: f64,
    /// `max_w <U, w w^T>` over the orthonormalized blocking basis.
    pub blocking_residual: f64,
    /// `lambda_min(si_factor * diag(U) - U)`.
    pub si_min_eig: f64,
    /// `lambda_min(gamma * diag(EUE^T) - EUE^T)`; 0 when no ASI rows.
    pub asi_min_eig: f64,
    /// `lambda_min(U)`.
    pub psd_min_eig: f64,
}

impl ConstraintReport {
    /// The acceptance predicate: every residual within `tol`. The ASI
    /// residual is scale-normalized by `max(1, Tr U)` since `EUE^T`
    /// entries scale with `U`.
    pub fn passes(&self, tol: f64) -> bool {
        self.diag_excess <= tol
            && self.trace_deficit <= tol * self.m as f64
            && self.window_residual <= tol
            && self.blocking_residual <= tol
            && self.si_min_eig >= -tol
            && self.asi_min_eig >= -tol * self.trace.max(1.0)
            && self.psd_min_eig >= -tol
    }
}

/// A solution candidate with its verification report. `factors` holds
/// the eigendecomposition of `u` produced by the solver's final PSD
/// projection (usable directly for sampling).
#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub u: DMatrix<f64>,
    pub solve_iterations: usize,
    pub residual_report: ConstraintReport,
    pub factors: Option<(DMatrix<f64>, DVector<f64>)>,
}

/// Computes every residual field for `u` against `problem`. Pure.
pub fn check_solution(problem: &SdpProblem, u: &DMatrix<f64>) -> Result<ConstraintReport, SdpError> {
    let m = problem.m;
    if u.nrows() != m || u.ncols() != m {
        return Err(SdpError::DimensionMismatch {
            m,
            rows: u.nrows(),
            cols: u.ncols(),
        });
    }
    let trace = u.trace();
    let diag_excess = (0..m)
        .map(|j| u[(j, j)] - problem.diag_cap)
        .fold(f64::NEG_INFINITY, f64::max);
    let trace_deficit = (problem.trace_floor - trace).max(0.0);
    let window_residual = problem
        .window_rows
        .iter()
        .map(|a| (a.dot(&(u * a))).abs())
        .fold(0.0, f64::max);
    let blocking_residual = problem
        .blocking_basis
        .iter()
        .map(|w| w.dot(&(u * w)))
        .fold(0.0, f64::max);

    let mut si_mat = -u.clone();
    for j in 0..m {
        si_mat[(j, j)] += problem.si_factor * u[(j, j)];
    }
    let si_min_eig = linalg::min_eig(&si_mat).ok_or(SdpError::NumericalBreakdown)?;

    let asi_min_eig = if problem.asi_rows.is_empty() {
        0.0
    } else {
        let gram = problem.asi_gram(u);
        let k = gram.nrows();
        let mut asi_mat = -gram.clone();
        for r in 0..k {
            asi_mat[(r, r)] += problem.gamma_asi * gram[(r, r)];
        }
        linalg::min_eig(&asi_mat).ok_or(SdpError::NumericalBreakdown)?
    };

    let psd_min_eig = linalg::min_eig(u).ok_or(SdpError::NumericalBreakdown)?;

    Ok(ConstraintReport {
        m,
        trace,
        diag_excess,
        trace_deficit,
        window_residual,
        blocking_residual,
        si_min_eig,
        asi_min_eig,
        psd_min_eig,
    })
}

/// Projection/retraction cycle over the constraint sets:
///
/// * equality constraints (window + blocking) via conjugation by the
///   projector onto their orthogonal complement, which is exact for PSD
///   matrices,
/// * PSD by eigenvalue clipping,
/// * diagonal cap by clipping,
/// * trace floor by a shift along the complement projector (so the
///   equality constraints stay exact),
/// * spectral independence by the invertible map
///   `M = si * diag(U) - U`, PSD-projecting `M`, and mapping back,
/// * ASI by halfspace cuts along violated eigendirections.
///
/// The final iterate is re-checked; `max_iter` caps the cycle count.
pub fn solve_feasibility(
    problem: &SdpProblem,
    tol: f64,
    max_iter: usize,
    init: Option<DMatrix<f64>>,
) -> Result<SdpSolution, SdpError> {
    let m = problem.m;
    let floor = problem.trace_floor;

    let basis = &problem.joint_basis;
    let b_dim = basis.len();
    let comp_dim = (m - b_dim).max(1) as f64;

    let mut u = init.unwrap_or_else(|| DMatrix::identity(m, m));
    if u.nrows() != m || u.ncols() != m {
        u = DMatrix::identity(m, m);
    }

    let mut iterations = 0usize;
    let mut best: Option<SdpSolution> = None;

    loop {
        // (4a) diagonal cap.
        for j in 0..m {
            if u[(j, j)] > problem.diag_cap {
                u[(j, j)] = problem.diag_cap;
            }
        }

        // (4b) trace floor, shifted along the complement projector so
        // the equality constraints are unaffected now and preserved by
        // the conjugation below.
        let tr = u.trace();
        if tr < floor {
            let c = (floor - tr) / comp_dim;
            for j in 0..m {
                u[(j, j)] += c;
            }
            for b in basis {
                u.ger(-c, b, b, 1.0);
            }
            symmetrize(&mut u);
        }

        // (4c)/(4d) conjugate out the blocked subspace, then (4g) PSD.
        // Ending the cycle here means the eigenfactors describe the
        // returned iterate exactly.
        conjugate_out(&mut u, basis);
        let (q, mut lambda) = linalg::sym_eig(&u).ok_or(SdpError::NumericalBreakdown)?;
        for l in lambda.iter_mut() {
            if *l < 0.0 {
                *l = 0.0;
            }
        }
        u = linalg::reconstruct(&q, &lambda);

        iterations += 1;

        let report = check_solution(problem, &u)?;
        let candidate = SdpSolution {
            u: u.clone(),
            solve_iterations: iterations,
            residual_report: report.clone(),
            factors: Some((q, lambda)),
        };
        if report.passes(tol) {
            return Ok(candidate);
        }
        match &best {
            Some(b) if residual_score(&b.residual_report) <= residual_score(&report) => {}
            _ => best = Some(candidate),
        }
        if iterations >= max_iter {
            return Err(SdpError::MaxIterExceeded {
                best: Box::new(best.expect("at least one iterate recorded")),
            });
        }

        // (4e) retraction when violated.
        if report.si_min_eig < -tol {
            si_retract(&mut u, problem.si_factor)?;
        }

        // (4f) halfspace cuts along violated eigendirections.
        if !problem.asi_rows.is_empty() && report.asi_min_eig < -tol * report.trace.max(1.0) {
            asi_cuts(&mut u, problem)?;
        }
    }
}

fn symmetrize(u: &mut DMatrix<f64>) {
    let m = u.nrows();
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 0.5 * (u[(i, j)] + u[(j, i)]);
            u[(i, j)] = v;
            u[(j, i)] = v;
        }
    }
}

/// `U <- P U P` with `P = I - B B^T`, expressed through rank updates.
fn conjugate_out(u: &mut DMatrix<f64>, basis: &[DVector<f64>]) {
    if basis.is_empty() {
        return;
    }
    for b in basis {
        // U <- (I - b b^T) U (I - b b^T)
        let ub = &*u * b;
        let bub = b.dot(&ub);
        u.ger(bub, b, b, 1.0);
        u.ger(-1.0, &ub, b, 1.0);
        u.ger(-1.0, b, &ub, 1.0);
    }
    symmetrize(u);
}

/// Worst violation across residual fields, for keeping the best iterate.
fn residual_score(r: &ConstraintReport) -> f64 {
    let scale = r.trace.max(1.0);
    [
        r.diag_excess.max(0.0),
        r.trace_deficit / r.m as f64,
        r.window_residual,
        r.blocking_residual.max(0.0),
        (-r.si_min_eig).max(0.0),
        (-r.asi_min_eig).max(0.0) / scale,
        (-r.psd_min_eig).max(0.0),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Maps `M = si * diag(U) - U`, PSD-projects `M`, and inverts the map.
/// Lands exactly inside the SI constraint set.
fn si_retract(u: &mut DMatrix<f64>, si_factor: f64) -> Result<(), SdpError> {
    let m = u.nrows();
    let mut mat = -u.clone();
    for j in 0..m {
        mat[(j, j)] += si_factor * u[(j, j)];
    }
    let (q, mut lambda) = linalg::sym_eig(&mat).ok_or(SdpError::NumericalBreakdown)?;
    let any_negative = lambda.iter().any(|&l| l < 0.0);
    if !any_negative {
        return Ok(());
    }
    for l in lambda.iter_mut() {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    let projected = linalg::reconstruct(&q, &lambda);
    for i in 0..m {
        for j in 0..m {
            if i == j {
                u[(i, i)] = projected[(i, i)] / (si_factor - 1.0);
            } else {
                u[(i, j)] = -projected[(i, j)];
            }
        }
    }
    Ok(())
}

/// For each negative eigendirection `theta` of `gamma diag(V) - V` with
/// `V = E U E^T`, the violated constraint is the halfspace
/// `<U, E^T (gamma diag(theta^2) - theta theta^T) E> >= 0`; project onto it.
fn asi_cuts(u: &mut DMatrix<f64>, problem: &SdpProblem) -> Result<(), SdpError> {
    let gram = problem.asi_gram(u);
    let k = gram.nrows();
    let mut resid = -gram.clone();
    for r in 0..k {
        resid[(r, r)] += problem.gamma_asi * gram[(r, r)];
    }
    let (q, lambda) = linalg::sym_eig(&resid).ok_or(SdpError::NumericalBreakdown)?;
    let m = u.nrows();
    for idx in 0..k {
        if lambda[idx] >= 0.0 {
            continue;
        }
        let theta = q.column(idx);
        // C = E^T (gamma * diag(theta o theta) - theta theta^T) E
        let mut c = DMatrix::zeros(m, m);
        for r in 0..k {
            let w = problem.gamma_asi * theta[r] * theta[r];
            if w != 0.0 {
                c.syger(w, &problem.asi_rows[r].row, &problem.asi_rows[r].row, 1.0);
            }
        }
        let mut et = DVector::zeros(m);
        for r in 0..k {
            et.axpy(theta[r], &problem.asi_rows[r].row, 1.0);
        }
        c.syger(-1.0, &et, &et, 1.0);
        // mirror lower triangle
        for i in 0..m {
            for j in (i + 1)..m {
                c[(i, j)] = c[(j, i)];
            }
        }
        let inner = (u.component_mul(&c)).sum();
        if inner >= 0.0 {
            continue;
        }
        let norm_sq = c.component_mul(&c).sum();
        if norm_sq > 0.0 {
            let alpha = -inner / norm_sq;
            *u += c * alpha;
        }
    }
    symmetrize(u);
    Ok(())
}

/// Samples the coloring update `u = (Tr U)^{-1/2} Q L^{1/2} r` with `r`
/// i.i.d. Rademacher. Negative eigenvalues are clipped to zero first.
/// The result has unit norm and covariance `U / Tr U` over the rng.
pub fn sample_update<R: Rng>(u: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>, SdpError> {
    let (q, lambda) = linalg::sym_eig(u).ok_or(SdpError::NumericalBreakdown)?;
    sample_from_factors(&q, &lambda, rng)
}

/// Same sampling law, from a precomputed eigendecomposition.
pub fn sample_from_factors<R: Rng>(
    q: &DMatrix<f64>,
    lambda: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>, SdpError> {
    let m = q.nrows();
    let mut clipped = lambda.clone();
    for l in clipped.iter_mut() {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    let trace: f64 = clipped.sum();
    if trace <= 0.0 {
        return Err(SdpError::ZeroTrace);
    }
    let scale = trace.sqrt().recip();
    let mut weights = DVector::zeros(m);
    for k in 0..m {
        let r: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        weights[k] = scale * clipped[k].sqrt() * r;
    }
    Ok(q * weights)
}

/// Serializable dump of a failed step for offline debugging.
#[derive(Serialize)]
pub struct SdpDebugDump {
    pub m: usize,
    pub gamma_asi: f64,
    pub si_factor: f64,
    pub window_rows: Vec<Vec<f64>>,
    pub blocking_basis: Vec<Vec<f64>>,
    pub asi_rows: Vec<(usize, Vec<f64>)>,
    pub u: Vec<Vec<f64>>,
    pub report: ConstraintReport,
}

impl SdpDebugDump {
    pub fn new(problem: &SdpProblem, u: &DMatrix<f64>, report: &ConstraintReport) -> Self {
        let to_vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<_>>();
        Self {
            m: problem.m,
            gamma_asi: problem.gamma_asi,
            si_factor: problem.si_factor,
            window_rows: problem.window_rows.iter().map(to_vec).collect(),
            blocking_basis: problem.blocking_basis.iter().map(to_vec).collect(),
            asi_rows: problem
                .asi_rows
                .iter()
                .map(|r| (r.masked_len, to_vec(&r.row)))
                .collect(),
            u: (0..u.nrows())
                .map(|i| (0..u.ncols()).map(|j| u[(i, j)]).collect())
                .collect(),
            report: report.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty_problem(m: usize) -> SdpProblem {
        SdpProblem::build(m, vec![], vec![], vec![], 100.0).unwrap()
    }

    #[test]
    fn trivial_problem_accepts_identity() {
        let p = empty_problem(10);
        let report = check_solution(&p, &DMatrix::identity(10, 10)).unwrap();
        assert!(report.passes(1e-9));
        assert_abs_diff_eq!(report.si_min_eig, 9.0, epsilon = 1e-9);
    }

    #[test]
    fn blocking_budget_is_enforced() {
        // m = 10 allows dim(H) <= 1; two independent vectors exceed it.
        let e = |k: usize| DVector::from_fn(10, |i, _| if i == k { 1.0 } else { 0.0 });
        let err = SdpProblem::build(10, vec![], vec![e(0), e(1)], vec![], 100.0).unwrap_err();
        assert!(matches!(err, SdpError::BudgetExceeded(_)));
    }

    #[test]
    fn asi_budget_is_enforced() {
        // gamma = 1, m = 10: at most 1 asi row.
        let row = |k: usize| AsiRow {
            masked_len: 10,
            row: DVector::from_fn(10, |i, _| if i == k { 1.0 } else { 0.0 }),
        };
        let err = SdpProblem::build(10, vec![], vec![], vec![row(0), row(1)], 1.0).unwrap_err();
        assert!(matches!(err, SdpError::BudgetExceeded(_)));
    }

    #[test]
    fn masked_rows_must_be_zero_past_prefix() {
        let bad = AsiRow {
            masked_len: 2,
            row: DVector::from_vec(vec![1.0, 0.5, 0.25, 0.0]),
        };
        let err = SdpProblem::build(4, vec![], vec![], vec![bad], 100.0).unwrap_err();
        assert!(matches!(err, SdpError::MaskedRowViolation { index: 0 }));
    }

    #[test]
    fn checker_identity_on_empty_problem() {
        let p = empty_problem(4);
        let r = check_solution(&p, &DMatrix::identity(4, 4)).unwrap();
        assert_abs_diff_eq!(r.diag_excess, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.trace_deficit, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.si_min_eig, 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.psd_min_eig, 1.0, epsilon = 1e-12);
        assert!(r.passes(1e-9));
    }

    #[test]
    fn checker_all_ones_si() {
        let p = empty_problem(2);
        let ones = DMatrix::from_element(2, 2, 1.0);
        let r = check_solution(&p, &ones).unwrap();
        // 10 diag(J) - J has eigenvalues {8, 10}
        assert_abs_diff_eq!(r.si_min_eig, 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.psd_min_eig, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.diag_excess, 0.0, epsilon = 1e-15);

        // with si_factor = 1 the SI matrix is I - J, eigenvalues {-1, 1}
        let p1 = empty_problem(2).with_si_factor(1.0);
        let r1 = check_solution(&p1, &ones).unwrap();
        assert_abs_diff_eq!(r1.si_min_eig, -1.0, epsilon = 1e-12);
        assert!(!r1.passes(1e-6));
    }

    #[test]
    fn solver_empty_constraints_small() {
        let p = empty_problem(4);
        let sol = solve_feasibility(&p, 1e-6, 100, None).unwrap();
        assert!(sol.residual_report.passes(1e-6));
        assert!(sol.solve_iterations <= 2);
    }

    #[test]
    fn hand_solution_two_by_two() {
        // One window row a = (1,1)/sqrt(2). U = b b^T with b = (1,-1)/sqrt(2)
        // satisfies every constraint; verify through the checker, then let
        // the solver find its own conforming U.
        let a = DVector::from_vec(vec![1.0, 1.0]) / 2f64.sqrt();
        let p = SdpProblem::build(2, vec![a], vec![], vec![], 100.0).unwrap();

        let b = DVector::from_vec(vec![1.0, -1.0]) / 2f64.sqrt();
        let mut hand = DMatrix::zeros(2, 2);
        hand.ger(1.0, &b, &b, 1.0);
        let r = check_solution(&p, &hand).unwrap();
        assert!(r.passes(1e-9), "hand-built U should pass: {r:?}");

        let sol = solve_feasibility(&p, 1e-6, 500, None).unwrap();
        assert!(sol.residual_report.passes(1e-6));
        // Ua ~ 0 far below the residual tolerance thanks to conjugation
        let ua = &sol.u * &p.window_rows[0];
        assert!(ua.norm() < 1e-10, "‖Ua‖ = {}", ua.norm());
    }

    #[test]
    fn solver_with_masked_asi_rows() {
        // A 12-dim problem with two window rows, one blocking vector, and
        // masked ASI rows; checks the full pipeline on a nontrivial case.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 12;
        let rnd = |rng: &mut ChaCha8Rng| DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let w1 = rnd(&mut rng);
        let w2 = rnd(&mut rng);
        let x = rnd(&mut rng) * 0.3;
        let mut asi = Vec::new();
        for base in [&w1, &w2] {
            let mut row = base.clone();
            for k in 6..m {
                row[k] = 0.0;
            }
            asi.push(AsiRow {
                masked_len: 6,
                row,
            });
        }
        let p = SdpProblem::build(m, vec![w1, w2], vec![x], asi, 50.0).unwrap();
        let sol = solve_feasibility(&p, 1e-6, 2000, None).unwrap();
        assert!(sol.residual_report.passes(1e-6));
    }

    #[test]
    fn sample_identity_gives_rademacher_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = 9;
        let u = DMatrix::identity(m, m);
        for _ in 0..50 {
            let s = sample_update(&u, &mut rng).unwrap();
            let c = (m as f64).sqrt().recip();
            for v in s.iter() {
                assert!(
                    (v.abs() - c).abs() < 1e-12,
                    "coordinate {v} not +-1/sqrt(m)"
                );
            }
            assert_abs_diff_eq!(s.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_rank_one_is_signed_basis_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut u = DMatrix::zeros(3, 3);
        u[(0, 0)] = 1.0;
        let mut seen_plus = false;
        let mut seen_minus = false;
        for _ in 0..64 {
            let s = sample_update(&u, &mut rng).unwrap();
            assert_abs_diff_eq!(s[1], 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(s[2], 0.0, epsilon = 1e-14);
            assert!((s[0].abs() - 1.0).abs() < 1e-12);
            if s[0] > 0.0 {
                seen_plus = true;
            } else {
                seen_minus = true;
            }
        }
        assert!(seen_plus && seen_minus);
    }

    #[test]
    fn sample_diagonal_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let norm5 = 5f64.sqrt();
        for _ in 0..32 {
            let s = sample_update(&u, &mut rng).unwrap();
            assert!((s[0].abs() - 2.0 / norm5).abs() < 1e-12);
            assert!((s[1].abs() - 1.0 / norm5).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_trace_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = DMatrix::zeros(3, 3);
        assert!(matches!(
            sample_update(&u, &mut rng),
            Err(SdpError::ZeroTrace)
        ));
    }

    #[test]
    fn sampling_norm_is_unit_for_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let m = 2 + (trial % 7);
            let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
            let u = &a * a.transpose();
            let s = sample_update(&u, &mut rng).unwrap();
            assert_abs_diff_eq!(s.norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn empirical_covariance_matches_normalized_u() {
        // Moderate sample count for the unit test; the acceptance suite
        // runs the full 1e5-sample version.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.0, 0.4, 1.0, 0.2, 0.0, 0.2, 0.5]);
        let u = &a * a.transpose();
        let trace = u.trace();
        let n = 20_000;
        let mut mean: DMatrix<f64> = DMatrix::zeros(3, 3);
        let mut sq: DMatrix<f64> = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let s = sample_update(&u, &mut rng).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let v = s[i] * s[j];
                    mean[(i, j)] += v;
                    sq[(i, j)] += v * v;
                }
            }
        }
        mean /= n as f64;
        for i in 0..3 {
            for j in 0..3 {
                let var = (sq[(i, j)] / n as f64 - mean[(i, j)] * mean[(i, j)]).max(0.0);
                let se = (var / n as f64).sqrt();
                let expect = u[(i, j)] / trace;
                assert!(
                    (mean[(i, j)] - expect).abs() <= 5.0 * se + 1e-12,
                    "cov[{i},{j}] off: got {} want {} (se {se})",
                    mean[(i, j)],
                    expect
                );
            }
        }
    }

    #[test]
    fn checker_fails_on_perturbed_constraints() {
        let tol = 1e-6;

        // diag: push one diagonal entry past the cap
        let p = empty_problem(3);
        let mut u = DMatrix::identity(3, 3);
        u[(0, 0)] = 1.0 + 2.5 * tol;
        assert!(!check_solution(&p, &u).unwrap().passes(tol));

        // trace: deflate below the floor
        let u = DMatrix::identity(3, 3) * ((0.1 * 3.0) / 3.0 - 2.5 * tol);
        assert!(!check_solution(&p, &u).unwrap().passes(tol));

        // window: a residual past 2 tol
        let a = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let pw = SdpProblem::build(3, vec![a], vec![], vec![], 100.0).unwrap();
        let mut u = DMatrix::identity(3, 3) * 0.5;
        u[(0, 0)] = 2.5 * tol;
        assert!(!check_solution(&pw, &u).unwrap().passes(tol));

        // blocking: same through H (m >= 10 so one vector fits the budget)
        let w = DVector::from_fn(10, |i, _| if i == 1 { 1.0 } else { 0.0 });
        let pb = SdpProblem::build(10, vec![], vec![w], vec![], 100.0).unwrap();
        let mut u = DMatrix::identity(10, 10) * 0.5;
        u[(1, 1)] = 2.5 * tol;
        assert!(!check_solution(&pb, &u).unwrap().passes(tol));

        // psd: a slightly negative eigenvalue
        let mut u = DMatrix::identity(3, 3) * 0.5;
        u[(2, 2)] = -2.5 * tol;
        assert!(!check_solution(&p, &u).unwrap().passes(tol));

        // asi: gamma = 1 tolerates no off-diagonal correlation in EUE^T;
        // m = 20 keeps two rows within the 0.1 gamma m budget
        let masked = |signs: [f64; 2]| {
            let mut row = DVector::zeros(20);
            row[0] = signs[0];
            row[1] = signs[1];
            AsiRow {
                masked_len: 2,
                row,
            }
        };
        let pa =
            SdpProblem::build(20, vec![], vec![], vec![masked([1.0, 0.0]), masked([1.0, 1.0])], 1.0)
                .unwrap();
        let mut u = DMatrix::identity(20, 20);
        u[(0, 1)] = 0.9;
        u[(1, 0)] = 0.9;
        let r = check_solution(&pa, &u).unwrap();
        assert!(r.asi_min_eig < -2.0 * tol * r.trace.max(1.0));
        assert!(!r.passes(tol));
    }

    #[test]
    fn solver_reports_best_iterate_on_cap() {
        // A negative tolerance is unsatisfiable, so the cap must fire and
        // hand back the best iterate together with its failing report.
        let a = DVector::from_vec(vec![1.0, 1.0]) / 2f64.sqrt();
        let p = SdpProblem::build(2, vec![a], vec![], vec![], 100.0).unwrap();
        match solve_feasibility(&p, -1.0, 3, None) {
            Err(SdpError::MaxIterExceeded { best }) => {
                assert_eq!(best.solve_iterations, 1);
                assert!(best.residual_report.passes(1e-6));
            }
            other => panic!("expected MaxIterExceeded, got {:?}", other.map(|_| ())),
        }
    }
}
