//! Rotation, regularisation and data energies as residual vectors with
//! analytic Jacobians.
//!
//! Row emitters are generic over a [`StateView`] (which transforms to read)
//! and a [`ColumnMap`] (which parameters are free and where their columns
//! live), so the same formulas serve the full problem and any sub-problem
//! that holds some parameters constant.

mod design;

pub use design::SparseDesign;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BindingTable, EdGraph};
use crate::mesh::PointSet;
use crate::sparse::SparseRows;
use crate::state::{
    affine_param, ColumnMap, DeformState, FullColumns, StateView, TRANSLATION_OFFSET,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Rot,
    Reg,
    Data,
}

impl Term {
    pub const ALL: [Term; 3] = [Term::Rot, Term::Reg, Term::Data];

    pub fn name(self) -> &'static str {
        match self {
            Term::Rot => "rot",
            Term::Reg => "reg",
            Term::Data => "data",
        }
    }
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Weights of the three energy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyWeights {
    pub rot: f64,
    pub reg: f64,
    pub data: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            rot: 1.0,
            reg: 10.0,
            data: 100.0,
        }
    }
}

impl EnergyWeights {
    pub fn new(rot: f64, reg: f64, data: f64) -> Result<Self> {
        let w = Self { rot, reg, data };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rot, self.reg, self.data];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput(
                "energy weights must be finite and non-negative".into(),
            ));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidInput(
                "at least one energy weight must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Rot => self.rot,
            Term::Reg => self.reg,
            Term::Data => self.data,
        }
    }
}

/// Residuals of one term with their Jacobian.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub term: Term,
    pub residuals: Vec<f64>,
    pub jacobian: SparseRows,
}

impl ResidualBlock {
    pub fn new(term: Term, ncols: usize) -> Self {
        Self {
            term,
            residuals: Vec::new(),
            jacobian: SparseRows::new(ncols),
        }
    }

    /// Unweighted sum of squares.
    pub fn energy(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

/// Source-target pairs: `(model vertex index, target point index)`.
pub type Pair = (usize, usize);

/// Model data needed to evaluate the data term.
#[derive(Debug, Clone, Copy)]
pub struct DataTerm<'a> {
    pub graph: &'a EdGraph,
    pub binding: &'a BindingTable,
    pub vertices: &'a [Point3<f64>],
    pub targets: &'a PointSet,
    pub pairs: &'a [Pair],
}

impl DataTerm<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.binding.len() != self.vertices.len() {
            return Err(Error::InvalidInput(format!(
                "binding covers {} vertices but the model has {}",
                self.binding.len(),
                self.vertices.len()
            )));
        }
        for &(v, t) in self.pairs {
            if v >= self.vertices.len() {
                return Err(Error::IndexOutOfRange {
                    what: "model vertices",
                    index: v,
                    len: self.vertices.len(),
                });
            }
            if t >= self.targets.len() {
                return Err(Error::IndexOutOfRange {
                    what: "target points",
                    index: t,
                    len: self.targets.len(),
                });
            }
        }
        Ok(())
    }
}

/// Blend of node transforms at vertex `v` (everything inside the global pose).
#[inline]
pub fn blend<S: StateView + ?Sized>(
    state: &S,
    graph: &EdGraph,
    binding: &BindingTable,
    i: usize,
    v: &Point3<f64>,
) -> Point3<f64> {
    let mut acc = Vector3::zeros();
    for (j, w) in binding.bound(i) {
        acc += w * state.node(j).apply(&graph.nodes[j], v).coords;
    }
    Point3::from(acc)
}

/// Deforms every vertex: `R_c Σ_j w_j [A_j (v - g_j) + g_j + t_j] + T_c`.
pub fn apply_deformation<S: StateView + ?Sized>(
    state: &S,
    graph: &EdGraph,
    binding: &BindingTable,
    vertices: &[Point3<f64>],
) -> Result<Vec<Point3<f64>>> {
    if binding.len() != vertices.len() {
        return Err(Error::InvalidInput(format!(
            "binding covers {} vertices but {} were given",
            binding.len(),
            vertices.len()
        )));
    }
    let pose = state.global();
    Ok(vertices
        .iter()
        .enumerate()
        .map(|(i, v)| pose.rotation * blend(state, graph, binding, i, v) + pose.translation)
        .collect())
}

/// Six rows per node: the three column dot products, then the three squared
/// column norms minus one.
pub fn rot_rows<S, C>(
    state: &S,
    nodes: impl IntoIterator<Item = usize>,
    cols: &C,
    scale: f64,
    out: &mut ResidualBlock,
) where
    S: StateView + ?Sized,
    C: ColumnMap + ?Sized,
{
    const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 0), (1, 1), (2, 2)];
    for j in nodes {
        let a = &state.node(j).affine;
        let base = cols.node(j);
        for (ca, cb) in PAIRS {
            let dot = a.column(ca).dot(&a.column(cb));
            let r = if ca == cb { dot - 1.0 } else { dot };
            out.residuals.push(scale * r);
            if let Some(base) = base {
                for row in 0..3 {
                    if ca == cb {
                        out.jacobian
                            .push(base + affine_param(row, ca), scale * 2.0 * a[(row, ca)]);
                    } else {
                        out.jacobian
                            .push(base + affine_param(row, ca), scale * a[(row, cb)]);
                        out.jacobian
                            .push(base + affine_param(row, cb), scale * a[(row, ca)]);
                    }
                }
            }
            out.jacobian.end_row();
        }
    }
}

/// Three rows per directed edge `(j, k)`:
/// `√α [A_j (g_k - g_j) + g_j + t_j - (g_k + t_k)]`.
pub fn reg_rows<S, C>(
    state: &S,
    graph: &EdGraph,
    edges: impl IntoIterator<Item = (usize, usize)>,
    alpha: f64,
    cols: &C,
    scale: f64,
    out: &mut ResidualBlock,
) where
    S: StateView + ?Sized,
    C: ColumnMap + ?Sized,
{
    let s = scale * alpha.sqrt();
    for (j, k) in edges {
        let (gj, gk) = (&graph.nodes[j], &graph.nodes[k]);
        let (nj, nk) = (state.node(j), state.node(k));
        let d = gk - gj;
        let r = nj.affine * d + gj.coords + nj.translation - gk.coords - nk.translation;
        let (bj, bk) = (cols.node(j), cols.node(k));
        for row in 0..3 {
            out.residuals.push(s * r[row]);
            if let Some(bj) = bj {
                for c in 0..3 {
                    out.jacobian.push(bj + affine_param(row, c), s * d[c]);
                }
                out.jacobian.push(bj + TRANSLATION_OFFSET + row, s);
            }
            if let Some(bk) = bk {
                out.jacobian.push(bk + TRANSLATION_OFFSET + row, -s);
            }
            out.jacobian.end_row();
        }
    }
}

/// Three rows per pair: deformed source minus target. The global rotation is
/// differentiated through a left increment `exp([δ]×) R_c`.
pub fn data_rows<S, C>(
    state: &S,
    data: &DataTerm<'_>,
    pairs: impl IntoIterator<Item = Pair>,
    cols: &C,
    scale: f64,
    out: &mut ResidualBlock,
) where
    S: StateView + ?Sized,
    C: ColumnMap + ?Sized,
{
    let pose = state.global();
    let rot: &Matrix3<f64> = &pose.rotation;
    let gcol = cols.global();
    for (i, m) in pairs {
        let v = &data.vertices[i];
        let u = blend(state, data.graph, data.binding, i, v);
        let ru = rot * u.coords;
        let r = ru + pose.translation - data.targets.points[m].coords;
        // columns of d(R u)/dδ = -[R u]×
        let skew = [
            Vector3::new(0.0, -ru.z, ru.y),
            Vector3::new(ru.z, 0.0, -ru.x),
            Vector3::new(-ru.y, ru.x, 0.0),
        ];
        for row in 0..3 {
            out.residuals.push(scale * r[row]);
            if let Some(g) = gcol {
                for (a, col) in skew.iter().enumerate() {
                    out.jacobian.push(g + a, scale * col[row]);
                }
                out.jacobian.push(g + 3 + row, scale);
            }
            for (j, w) in data.binding.bound(i) {
                let Some(base) = cols.node(j) else { continue };
                let e = v - data.graph.nodes[j];
                for a in 0..3 {
                    let ra = scale * w * rot[(row, a)];
                    for c in 0..3 {
                        out.jacobian.push(base + affine_param(a, c), ra * e[c]);
                    }
                    out.jacobian.push(base + TRANSLATION_OFFSET + a, ra);
                }
            }
            out.jacobian.end_row();
        }
    }
}

/// Rotation term over all nodes, columns in natural order.
pub fn e_rot(state: &DeformState) -> ResidualBlock {
    let cols = FullColumns::natural(state.node_count());
    let mut block = ResidualBlock::new(Term::Rot, cols.dim());
    rot_rows(state, 0..state.node_count(), &cols, 1.0, &mut block);
    block
}

/// Regularisation term over every directed edge, columns in natural order.
pub fn e_reg(state: &DeformState, graph: &EdGraph, alpha: f64) -> ResidualBlock {
    let cols = FullColumns::natural(state.node_count());
    let mut block = ResidualBlock::new(Term::Reg, cols.dim());
    reg_rows(
        state,
        graph,
        graph.directed_edges(),
        alpha,
        &cols,
        1.0,
        &mut block,
    );
    block
}

/// Data term over all pairs, columns in natural order.
pub fn e_data(state: &DeformState, data: &DataTerm<'_>) -> Result<ResidualBlock> {
    data.validate()?;
    let cols = FullColumns::natural(state.node_count());
    let mut block = ResidualBlock::new(Term::Data, cols.dim());
    data_rows(
        state,
        data,
        data.pairs.iter().copied(),
        &cols,
        1.0,
        &mut block,
    );
    Ok(block)
}

/// Per-term energies and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub rot: f64,
    pub reg: f64,
    pub data: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Rot => self.rot,
            Term::Reg => self.reg,
            Term::Data => self.data,
        }
    }
}

/// Weighted sum of the blocks plus the stacked system, each block scaled by
/// `√w` so that `‖r‖²` equals the weighted total.
pub fn total_energy(
    blocks: &[ResidualBlock],
    weights: &EnergyWeights,
) -> (EnergyBreakdown, Vec<f64>, SparseRows) {
    let ncols = blocks.first().map_or(0, |b| b.jacobian.ncols());
    let mut breakdown = EnergyBreakdown::default();
    let mut residuals = Vec::with_capacity(blocks.iter().map(ResidualBlock::len).sum());
    let mut jacobian = SparseRows::new(ncols);
    for b in blocks {
        let e = b.energy();
        match b.term {
            Term::Rot => breakdown.rot += e,
            Term::Reg => breakdown.reg += e,
            Term::Data => breakdown.data += e,
        }
        let w = weights.get(b.term);
        breakdown.total += w * e;
        let s = w.sqrt();
        residuals.extend(b.residuals.iter().map(|r| s * r));
        let mut scaled = b.jacobian.clone();
        scaled.scale(s);
        jacobian.append(&scaled);
    }
    (breakdown, residuals, jacobian)
}

#[cfg(test)]
mod tests;
