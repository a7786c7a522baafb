//! Block normal equations with the irrelevant-node block eliminated.

use nalgebra::DMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};

use crate::sparse::SparseRows;

use super::linear::{solve_dense_system, LinearError, LinearSettings, LinearStats};
use super::lm::{Linearization, StepStrategy};

/// `JᵀJ` split at column `dim_c` into kept (`c`) and eliminated (`f`) blocks,
/// with the matching halves of `y = -Jᵀ r`.
#[derive(Debug, Clone)]
pub struct BlockHessian {
    pub lambda_cc: DMatrix<f64>,
    pub lambda_cf: CsrMatrix<f64>,
    pub lambda_ff: CscMatrix<f64>,
    pub y_c: Vec<f64>,
    pub y_f: Vec<f64>,
}

impl BlockHessian {
    pub fn assemble(jac: &SparseRows, residuals: &[f64], dim_c: usize) -> Self {
        let dim = jac.ncols();
        assert!(dim_c <= dim, "kept block larger than the system");
        let dim_f = dim - dim_c;
        let mut lambda_cc = DMatrix::zeros(dim_c, dim_c);
        let mut jc = CooMatrix::new(jac.nrows(), dim_c);
        let mut jf = CooMatrix::new(jac.nrows(), dim_f);
        let mut rows_c: Vec<(usize, f64)> = Vec::new();
        for i in 0..jac.nrows() {
            let (cols, vals) = jac.row(i);
            rows_c.clear();
            for (&c, &v) in cols.iter().zip(vals) {
                if c < dim_c {
                    rows_c.push((c, v));
                    jc.push(i, c, v);
                } else {
                    jf.push(i, c - dim_c, v);
                }
            }
            for &(a, va) in &rows_c {
                for &(b, vb) in &rows_c {
                    lambda_cc[(a, b)] += va * vb;
                }
            }
        }
        let jc = CsrMatrix::from(&jc);
        let jf = CsrMatrix::from(&jf);
        let jc_t = jc.transpose();
        let lambda_cf = &jc_t * &jf;
        let lambda_ff = CscMatrix::from(&(&jf.transpose() * &jf));
        let g = jac.tr_mul_vec(residuals);
        let y: Vec<f64> = g.iter().map(|v| -v).collect();
        Self {
            lambda_cc,
            lambda_cf,
            lambda_ff,
            y_c: y[..dim_c].to_vec(),
            y_f: y[dim_c..].to_vec(),
        }
    }

    pub fn dim_c(&self) -> usize {
        self.y_c.len()
    }

    pub fn dim_f(&self) -> usize {
        self.y_f.len()
    }

    /// Reassembles the full matrix (for checks).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (c, f) = (self.dim_c(), self.dim_f());
        let mut h = DMatrix::zeros(c + f, c + f);
        h.view_mut((0, 0), (c, c)).copy_from(&self.lambda_cc);
        for (i, j, &v) in self.lambda_cf.triplet_iter() {
            h[(i, c + j)] += v;
            h[(c + j, i)] += v;
        }
        for (i, j, &v) in self.lambda_ff.triplet_iter() {
            h[(c + i, c + j)] += v;
        }
        h
    }

    /// Solves `(Λ + mu I) x = y` by eliminating the `f` block:
    /// `(S + mu I) x_c = y_c - Λ_cf (Λ_ff + mu I)⁻¹ y_f`, then back-substitution.
    pub fn solve(
        &self,
        mu: f64,
        settings: &LinearSettings,
    ) -> Result<(Vec<f64>, LinearStats), LinearError> {
        let (dim_c, dim_f) = (self.dim_c(), self.dim_f());
        if dim_f == 0 {
            return solve_dense_system(&self.lambda_cc, mu, &self.y_c, settings);
        }
        let mut coo = CooMatrix::new(dim_f, dim_f);
        for (i, j, &v) in self.lambda_ff.triplet_iter() {
            coo.push(i, j, v);
        }
        for k in 0..dim_f {
            coo.push(k, k, mu);
        }
        let ff = CscMatrix::from(&coo);
        if ff.values().iter().any(|v| !v.is_finite()) {
            return Err(LinearError::NonFinite);
        }
        let chol = CscCholesky::factor(&ff).map_err(|_| LinearError::NotPositiveDefinite)?;

        // kept parameters that actually couple to the eliminated block
        let coupled: Vec<usize> = (0..dim_c)
            .filter(|&i| self.lambda_cf.row(i).nnz() > 0)
            .collect();
        let mut b = DMatrix::zeros(dim_f, coupled.len());
        for (k, &i) in coupled.iter().enumerate() {
            let row = self.lambda_cf.row(i);
            for (&j, &v) in row.col_indices().iter().zip(row.values()) {
                b[(j, k)] = v;
            }
        }
        let z = chol.solve(&b);
        let u = chol.solve(&DMatrix::from_column_slice(dim_f, 1, &self.y_f));

        let mut s = self.lambda_cc.clone();
        let btz = b.transpose() * &z;
        let btu = b.transpose() * &u;
        let mut rhs = self.y_c.clone();
        for (a, &i) in coupled.iter().enumerate() {
            for (c, &j) in coupled.iter().enumerate() {
                s[(i, j)] -= btz[(a, c)];
            }
            rhs[i] -= btu[(a, 0)];
        }
        // restore exact symmetry lost to rounding
        for i in 0..dim_c {
            for j in 0..i {
                let m = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = m;
                s[(j, i)] = m;
            }
        }
        let (x_c, stats) = solve_dense_system(&s, mu, &rhs, settings)?;
        let mut x = x_c.clone();
        x.reserve(dim_f);
        for r in 0..dim_f {
            let mut v = u[(r, 0)];
            for (a, &i) in coupled.iter().enumerate() {
                v -= z[(r, a)] * x_c[i];
            }
            x.push(v);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinearError::NonFinite);
        }
        Ok((x, stats))
    }
}

/// Step strategy that eliminates every column at or past `dim_c`.
#[derive(Debug, Clone)]
pub struct SchurStrategy {
    pub dim_c: usize,
    pub settings: LinearSettings,
}

impl StepStrategy for SchurStrategy {
    fn step(
        &mut self,
        lin: &Linearization,
        mu: f64,
    ) -> Result<(Vec<f64>, LinearStats), LinearError> {
        BlockHessian::assemble(&lin.jacobian, &lin.residuals, self.dim_c).solve(mu, &self.settings)
    }
}
