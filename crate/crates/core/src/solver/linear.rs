//! Linear solves for damped normal equations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::sparse::SparseRows;
use crate::state::NODE_DIM;

/// Which linear solver handles the damped normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearSolverKind {
    /// Dense Cholesky up to [`super::SolveOptions::dense_threshold`] unknowns, PCG above.
    #[default]
    Auto,
    DirectDense,
    Pcg,
}

/// Preconditioner for the PCG path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preconditioner {
    /// Inverse diagonal.
    #[default]
    Jacobi,
    /// Inverse of each node block and of the global-pose block.
    BlockJacobi,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearError {
    /// Cholesky failed: the matrix is not numerically positive definite.
    NotPositiveDefinite,
    /// The system contains NaN or infinite entries.
    NonFinite,
}

impl std::fmt::Display for LinearError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LinearError::NotPositiveDefinite => f.write_str("matrix is not positive definite"),
            LinearError::NonFinite => f.write_str("non-finite values in linear system"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Achieved `‖Ax - b‖ / ‖b‖`.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Jacobi-preconditioned conjugate gradients for SPD `A`, starting from zero.
/// Stops once `‖Ax - b‖ ≤ tol ‖b‖` or after `max_iter` iterations; the
/// returned solution says whether the tolerance was met.
pub fn pcg(
    apply_a: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    diagonal: &[f64],
    tol: f64,
    max_iter: usize,
) -> PcgSolution {
    let inv_diag: Vec<f64> = diagonal
        .iter()
        .map(|&d| {
            if d > 0.0 && d.is_finite() {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect();
    pcg_with(
        apply_a,
        b,
        |r, z| {
            for ((z, r), d) in z.iter_mut().zip(r).zip(&inv_diag) {
                *z = r * d;
            }
        },
        tol,
        max_iter,
    )
}

/// Conjugate gradients with a caller-supplied SPD preconditioner
/// `precond(r, z)` writing `z = P⁻¹ r`.
pub fn pcg_with(
    mut apply_a: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    mut precond: impl FnMut(&[f64], &mut [f64]),
    tol: f64,
    max_iter: usize,
) -> PcgSolution {
    let n = b.len();
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return PcgSolution {
            x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 0..max_iter {
        apply_a(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return PcgSolution {
                x,
                iterations: it,
                relative_residual: rel,
                converged: false,
            };
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        rel = norm(&r) / b_norm;
        if rel <= tol {
            return PcgSolution {
                x,
                iterations: it + 1,
                relative_residual: rel,
                converged: true,
            };
        }
        precond(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    PcgSolution {
        x,
        iterations: max_iter,
        relative_residual: rel,
        converged: false,
    }
}

/// Block boundaries for block-Jacobi preconditioning: a leading block of
/// `dim % NODE_DIM` unknowns (the global pose when present), then one block
/// per node.
pub fn node_block_starts(dim: usize) -> Vec<usize> {
    let lead = dim % NODE_DIM;
    let mut starts = Vec::with_capacity(dim / NODE_DIM + 1);
    if lead > 0 {
        starts.push(0);
    }
    starts.extend((lead..dim).step_by(NODE_DIM));
    starts
}

/// Inverted diagonal blocks of an SPD matrix, applied as a preconditioner.
#[derive(Debug, Clone)]
pub struct BlockJacobi {
    starts: Vec<usize>,
    inverses: Vec<DMatrix<f64>>,
}

impl BlockJacobi {
    /// Inverts `block + mu I` for each block. A block whose Cholesky fails
    /// falls back to its inverted diagonal.
    pub fn new(starts: Vec<usize>, blocks: Vec<DMatrix<f64>>, mu: f64) -> Self {
        let inverses = blocks
            .into_iter()
            .map(|mut m| {
                for k in 0..m.nrows() {
                    m[(k, k)] += mu;
                }
                match m.clone().cholesky() {
                    Some(c) if m.iter().all(|v| v.is_finite()) => c.inverse(),
                    _ => DMatrix::from_diagonal(&m.diagonal().map(|d| {
                        if d > 0.0 && d.is_finite() {
                            1.0 / d
                        } else {
                            1.0
                        }
                    })),
                }
            })
            .collect();
        Self { starts, inverses }
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        for (&lo, inv) in self.starts.iter().zip(&self.inverses) {
            let w = inv.nrows();
            for i in 0..w {
                z[lo + i] = (0..w).map(|j| inv[(i, j)] * r[lo + j]).sum();
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense Cholesky solve of `(A + mu I) x = b`.
pub fn dense_solve(a: &DMatrix<f64>, mu: f64, b: &[f64]) -> Result<Vec<f64>, LinearError> {
    let mut m = a.clone();
    for k in 0..m.nrows() {
        m[(k, k)] += mu;
    }
    if m.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(LinearError::NonFinite);
    }
    let chol = m.cholesky().ok_or(LinearError::NotPositiveDefinite)?;
    Ok(chol
        .solve(&DVector::from_column_slice(b))
        .as_slice()
        .to_vec())
}

/// Settings shared by the step solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSettings {
    pub kind: LinearSolverKind,
    pub preconditioner: Preconditioner,
    pub dense_threshold: usize,
    pub pcg_tolerance: f64,
    pub pcg_max_iterations: usize,
}

impl LinearSettings {
    pub fn use_dense(&self, dim: usize) -> bool {
        match self.kind {
            LinearSolverKind::Auto => dim <= self.dense_threshold,
            LinearSolverKind::DirectDense => true,
            LinearSolverKind::Pcg => false,
        }
    }
}

/// Outcome statistics of one linear solve.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinearStats {
    pub pcg_iterations: usize,
    pub pcg_unconverged: bool,
}

/// Solves `(JᵀJ + mu I) x = b` by dense Cholesky or matrix-free PCG.
pub fn solve_normal(
    jac: &SparseRows,
    mu: f64,
    b: &[f64],
    settings: &LinearSettings,
) -> Result<(Vec<f64>, LinearStats), LinearError> {
    let dim = jac.ncols();
    if dim == 0 {
        return Ok((Vec::new(), LinearStats::default()));
    }
    if settings.use_dense(dim) {
        let h = jac.normal_dense();
        return Ok((dense_solve(&h, mu, b)?, LinearStats::default()));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(LinearError::NonFinite);
    }
    let apply = |x: &[f64], out: &mut [f64]| jac.normal_mul_vec(x, mu, out);
    let (tol, max_iter) = (settings.pcg_tolerance, settings.pcg_max_iterations);
    let sol = match settings.preconditioner {
        Preconditioner::Jacobi => {
            let diag: Vec<f64> = jac.normal_diagonal().into_iter().map(|d| d + mu).collect();
            pcg(apply, b, &diag, tol, max_iter)
        }
        Preconditioner::BlockJacobi => {
            let starts = node_block_starts(dim);
            let blocks = jac.normal_block_diagonal(&starts);
            let precond = BlockJacobi::new(starts, blocks, mu);
            pcg_with(apply, b, |r, z| precond.apply(r, z), tol, max_iter)
        }
    };
    if sol.x.iter().any(|v| !v.is_finite()) {
        return Err(LinearError::NonFinite);
    }
    let stats = LinearStats {
        pcg_iterations: sol.iterations,
        pcg_unconverged: !sol.converged,
    };
    Ok((sol.x, stats))
}

/// Solves a dense SPD system `(A + mu I) x = b` with the configured method.
pub fn solve_dense_system(
    a: &DMatrix<f64>,
    mu: f64,
    b: &[f64],
    settings: &LinearSettings,
) -> Result<(Vec<f64>, LinearStats), LinearError> {
    let dim = a.nrows();
    if dim == 0 {
        return Ok((Vec::new(), LinearStats::default()));
    }
    if settings.use_dense(dim) {
        return Ok((dense_solve(a, mu, b)?, LinearStats::default()));
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        let ax = a * DVector::from_column_slice(x);
        for k in 0..dim {
            out[k] = ax[k] + mu * x[k];
        }
    };
    let (tol, max_iter) = (settings.pcg_tolerance, settings.pcg_max_iterations);
    let sol = match settings.preconditioner {
        Preconditioner::Jacobi => {
            let diag: Vec<f64> = (0..dim).map(|k| a[(k, k)] + mu).collect();
            pcg(apply, b, &diag, tol, max_iter)
        }
        Preconditioner::BlockJacobi => {
            let starts = node_block_starts(dim);
            let blocks = (0..starts.len())
                .map(|k| {
                    let lo = starts[k];
                    let hi = starts.get(k + 1).copied().unwrap_or(dim);
                    a.view((lo, lo), (hi - lo, hi - lo)).into_owned()
                })
                .collect();
            let precond = BlockJacobi::new(starts, blocks, mu);
            pcg_with(apply, b, |r, z| precond.apply(r, z), tol, max_iter)
        }
    };
    if sol.x.iter().any(|v| !v.is_finite()) {
        return Err(LinearError::NonFinite);
    }
    let stats = LinearStats {
        pcg_iterations: sol.iterations,
        pcg_unconverged: !sol.converged,
    };
    Ok((sol.x, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_apply(a: &DMatrix<f64>) -> impl FnMut(&[f64], &mut [f64]) + '_ {
        move |x, out| {
            let ax = a * DVector::from_column_slice(x);
            out.copy_from_slice(ax.as_slice());
        }
    }

    #[test]
    fn identity_converges_in_one_iteration() {
        let a = DMatrix::<f64>::identity(5, 5);
        let b = [1.0, -2.0, 3.0, 0.5, 4.0];
        let sol = pcg(dense_apply(&a), &b, &[1.0; 5], 1e-12, 10);
        assert_eq!(sol.iterations, 1);
        assert!(sol.converged);
        for (x, b) in sol.x.iter().zip(b) {
            assert!((x - b).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_system() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 4.0]));
        let sol = pcg(
            dense_apply(&a),
            &[1.0, 2.0, 4.0],
            &[1.0, 2.0, 4.0],
            1e-12,
            10,
        );
        for x in &sol.x {
            assert!((x - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn random_spd_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = DMatrix::from_fn(50, 50, |_, _| rng.gen_range(-1.0..1.0));
        let a = &g * g.transpose() + DMatrix::identity(50, 50) * 0.5;
        let b: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let diag: Vec<f64> = (0..50).map(|k| a[(k, k)]).collect();
        let sol = pcg(dense_apply(&a), &b, &diag, 1e-14, 1000);
        let oracle = a
            .clone()
            .lu()
            .solve(&DVector::from_column_slice(&b))
            .unwrap();
        let err = sol
            .x
            .iter()
            .zip(oracle.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-8 * oracle.amax(), "{err}");
    }

    #[test]
    fn non_convergence_is_signalled() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = DMatrix::from_fn(40, 40, |_, _| rng.gen_range(-1.0..1.0));
        let a = &g * g.transpose() + DMatrix::identity(40, 40) * 1e-3;
        let b = vec![1.0; 40];
        let sol = pcg(dense_apply(&a), &b, &vec![1.0; 40], 1e-14, 2);
        assert!(!sol.converged);
        assert!(sol.relative_residual > 1e-14);
        assert_eq!(sol.iterations, 2);
    }

    #[test]
    fn node_blocks_lead_with_the_remainder() {
        assert_eq!(node_block_starts(30), vec![0, 6, 18]);
        assert_eq!(node_block_starts(24), vec![0, 12]);
        assert_eq!(node_block_starts(5), vec![0]);
        assert!(node_block_starts(0).is_empty());
    }

    #[test]
    fn preconditioned_pcg_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let dim = 6 + 12 * 5;
        let mut jac = SparseRows::new(dim);
        for _ in 0..150 {
            for _ in 0..8 {
                let c = rng.gen_range(0..dim);
                jac.push(c, rng.gen_range(-1.0..1.0));
            }
            jac.end_row();
        }
        let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oracle = dense_solve(&jac.normal_dense(), 0.1, &b).unwrap();
        let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for preconditioner in [Preconditioner::Jacobi, Preconditioner::BlockJacobi] {
            let settings = LinearSettings {
                kind: LinearSolverKind::Pcg,
                preconditioner,
                dense_threshold: 0,
                pcg_tolerance: 1e-13,
                pcg_max_iterations: 1000,
            };
            let (x, stats) = solve_normal(&jac, 0.1, &b, &settings).unwrap();
            assert!(!stats.pcg_unconverged);
            let err = x
                .iter()
                .zip(&oracle)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-9 * scale, "{preconditioner:?} {err}");
            let (y, _) = solve_dense_system(&jac.normal_dense(), 0.1, &b, &settings).unwrap();
            let err = y
                .iter()
                .zip(&oracle)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-9 * scale, "{preconditioner:?} {err}");
        }
    }

    #[test]
    fn dense_solve_detects_indefinite() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert_eq!(
            dense_solve(&a, 0.0, &[1.0, 1.0]),
            Err(LinearError::NotPositiveDefinite)
        );
        assert!(dense_solve(&a, 2.0, &[1.0, 1.0]).is_ok());
    }
}
