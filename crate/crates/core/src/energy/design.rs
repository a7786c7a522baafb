//! Matrix form of the deformation.
//!
//! For `n` vertices and `N` nodes:
//! - `M` (3N × n): column `i` holds `w_j (v_i - g_j)` in rows `3j..3j+3` for
//!   each bound node `j`;
//! - `C` (N × n): column `i` holds `w_j` in row `j`;
//! - `Π = [Mᵀ Cᵀ]` (n × 4N) and `Φ = [Λ T]ᵀ` (4N × 3), where
//!   `Λ = (A_1 … A_N)` and `T = (t_1 + g_1 … t_N + g_N)`.
//!
//! Deformed vertices are then the columns of `R_c (Π Φ)ᵀ + T_c ⊗ 1`.

use nalgebra::{DMatrix, Point3};
use nalgebra_sparse::{CscMatrix, CsrMatrix};

use crate::error::{Error, Result};
use crate::graph::{BindingTable, EdGraph};
use crate::state::StateView;

#[derive(Debug, Clone)]
pub struct SparseDesign {
    pub m: CscMatrix<f64>,
    pub c: CscMatrix<f64>,
    pub pi: CsrMatrix<f64>,
    node_count: usize,
}

impl SparseDesign {
    pub fn build(
        graph: &EdGraph,
        binding: &BindingTable,
        vertices: &[Point3<f64>],
    ) -> Result<Self> {
        if binding.len() != vertices.len() {
            return Err(Error::InvalidInput(format!(
                "binding covers {} vertices but {} were given",
                binding.len(),
                vertices.len()
            )));
        }
        let nn = graph.node_count();
        let n = vertices.len();
        let mut m_offsets = vec![0];
        let mut m_rows = Vec::new();
        let mut m_vals = Vec::new();
        let mut c_offsets = vec![0];
        let mut c_rows = Vec::new();
        let mut c_vals = Vec::new();
        let mut pi_offsets = vec![0];
        let mut pi_cols = Vec::new();
        let mut pi_vals = Vec::new();
        for (i, v) in vertices.iter().enumerate() {
            let mut bound: Vec<(usize, f64)> = binding.bound(i).collect();
            bound.sort_by_key(|b| b.0);
            for &(j, w) in &bound {
                if j >= nn {
                    return Err(Error::IndexOutOfRange {
                        what: "node list",
                        index: j,
                        len: nn,
                    });
                }
                let e = w * (v - graph.nodes[j]);
                for a in 0..3 {
                    m_rows.push(3 * j + a);
                    m_vals.push(e[a]);
                }
                c_rows.push(j);
                c_vals.push(w);
            }
            // row i of Π: M column entries, then C column entries shifted by 3N
            let start = m_vals.len() - 3 * bound.len();
            pi_cols.extend_from_slice(&m_rows[start..]);
            pi_vals.extend_from_slice(&m_vals[start..]);
            pi_cols.extend(bound.iter().map(|&(j, _)| 3 * nn + j));
            pi_vals.extend(bound.iter().map(|&(_, w)| w));
            m_offsets.push(m_rows.len());
            c_offsets.push(c_rows.len());
            pi_offsets.push(pi_cols.len());
        }
        let invalid = |e| Error::InvalidInput(format!("bad sparse pattern: {e}"));
        let m =
            CscMatrix::try_from_csc_data(3 * nn, n, m_offsets, m_rows, m_vals).map_err(invalid)?;
        let c = CscMatrix::try_from_csc_data(nn, n, c_offsets, c_rows, c_vals).map_err(invalid)?;
        let pi = CsrMatrix::try_from_csr_data(n, 4 * nn, pi_offsets, pi_cols, pi_vals)
            .map_err(invalid)?;
        Ok(Self {
            m,
            c,
            pi,
            node_count: nn,
        })
    }

    /// `Φ = [Λ T]ᵀ`, shape `4N × 3`.
    pub fn phi<S: StateView + ?Sized>(&self, state: &S, graph: &EdGraph) -> DMatrix<f64> {
        let nn = self.node_count;
        let mut phi = DMatrix::zeros(4 * nn, 3);
        for j in 0..nn {
            let node = state.node(j);
            let a_t = node.affine.transpose();
            phi.view_mut((3 * j, 0), (3, 3)).copy_from(&a_t);
            let tg = node.translation + graph.nodes[j].coords;
            phi.view_mut((3 * nn + j, 0), (1, 3))
                .copy_from(&tg.transpose());
        }
        phi
    }

    /// Deformed vertices through the matrix form.
    pub fn deform<S: StateView + ?Sized>(&self, state: &S, graph: &EdGraph) -> Vec<Point3<f64>> {
        let phi = self.phi(state, graph);
        let blended: DMatrix<f64> = &self.pi * &phi;
        let pose = state.global();
        blended
            .row_iter()
            .map(|row| Point3::from(pose.rotation * row.transpose() + pose.translation))
            .collect()
    }

    /// Column sums of `C`.
    pub fn weight_sums(&self) -> Vec<f64> {
        self.c
            .col_iter()
            .map(|col| col.values().iter().sum())
            .collect()
    }
}
