//! Deformation problems and their least-squares views.

use std::collections::HashMap;

use nalgebra::Point3;

use crate::energy::{
    data_rows, reg_rows, rot_rows, DataTerm, EnergyBreakdown, EnergyWeights, Pair, ResidualBlock,
    Term,
};
use crate::error::{Error, Result};
use crate::graph::{BindingTable, EdGraph};
use crate::mesh::PointSet;
use crate::state::{
    ColumnMap, DeformState, FullColumns, GlobalPose, NodeTransform, StateView, GLOBAL_DIM, NODE_DIM,
};

use super::lm::{LeastSquares, Linearization};

/// Everything needed to evaluate the total energy of a deformation.
#[derive(Debug, Clone, Copy)]
pub struct EdProblem<'a> {
    pub graph: &'a EdGraph,
    pub binding: &'a BindingTable,
    pub vertices: &'a [Point3<f64>],
    pub targets: &'a PointSet,
    pub pairs: &'a [Pair],
    pub weights: EnergyWeights,
    /// Regularisation edge weight.
    pub alpha: f64,
}

impl<'a> EdProblem<'a> {
    pub fn data(&self) -> DataTerm<'a> {
        DataTerm {
            graph: self.graph,
            binding: self.binding,
            vertices: self.vertices,
            targets: self.targets,
            pairs: self.pairs,
        }
    }

    pub fn validate(&self, state: &DeformState) -> Result<()> {
        self.weights.validate()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "edge weight must be positive, got {}",
                self.alpha
            )));
        }
        if state.node_count() != self.graph.node_count() {
            return Err(Error::InvalidInput(format!(
                "state has {} nodes but the graph has {}",
                state.node_count(),
                self.graph.node_count()
            )));
        }
        if self.graph.edges.len() != self.graph.node_count() {
            return Err(Error::InvalidInput("graph edges are not built".into()));
        }
        self.data().validate()
    }

    /// Per-term energies of the full objective.
    pub fn energy(&self, state: &DeformState) -> EnergyBreakdown {
        let cols = NoColumns;
        let data = self.data();
        let mut rot = ResidualBlock::new(Term::Rot, 0);
        rot_rows(state, 0..state.node_count(), &cols, 1.0, &mut rot);
        let mut reg = ResidualBlock::new(Term::Reg, 0);
        reg_rows(
            state,
            self.graph,
            self.graph.directed_edges(),
            self.alpha,
            &cols,
            1.0,
            &mut reg,
        );
        let mut dat = ResidualBlock::new(Term::Data, 0);
        data_rows(
            state,
            &data,
            self.pairs.iter().copied(),
            &cols,
            1.0,
            &mut dat,
        );
        let (rot, reg, data) = (rot.energy(), reg.energy(), dat.energy());
        EnergyBreakdown {
            rot,
            reg,
            data,
            total: self.weights.rot * rot + self.weights.reg * reg + self.weights.data * data,
        }
    }
}

/// Every parameter held constant: rows carry residuals only.
#[derive(Debug, Clone, Copy)]
pub struct NoColumns;

impl ColumnMap for NoColumns {
    fn dim(&self) -> usize {
        0
    }
    fn global(&self) -> Option<usize> {
        None
    }
    fn node(&self, _j: usize) -> Option<usize> {
        None
    }
}

/// Weighted residual rows, appended term by term into one block.
pub(crate) struct Rows<'p, 'a> {
    problem: &'p EdProblem<'a>,
    block: ResidualBlock,
}

impl<'p, 'a> Rows<'p, 'a> {
    pub(crate) fn new(problem: &'p EdProblem<'a>, ncols: usize) -> Self {
        Self {
            problem,
            block: ResidualBlock::new(Term::Rot, ncols),
        }
    }

    pub(crate) fn rot<S: StateView + ?Sized, C: ColumnMap + ?Sized>(
        &mut self,
        state: &S,
        nodes: impl IntoIterator<Item = usize>,
        cols: &C,
    ) {
        rot_rows(
            state,
            nodes,
            cols,
            self.problem.weights.rot.sqrt(),
            &mut self.block,
        );
    }

    pub(crate) fn reg<S: StateView + ?Sized, C: ColumnMap + ?Sized>(
        &mut self,
        state: &S,
        edges: impl IntoIterator<Item = (usize, usize)>,
        cols: &C,
    ) {
        let p = self.problem;
        reg_rows(
            state,
            p.graph,
            edges,
            p.alpha,
            cols,
            p.weights.reg.sqrt(),
            &mut self.block,
        );
    }

    pub(crate) fn data<S: StateView + ?Sized, C: ColumnMap + ?Sized>(
        &mut self,
        state: &S,
        cols: &C,
    ) {
        let p = self.problem;
        data_rows(
            state,
            &p.data(),
            p.pairs.iter().copied(),
            cols,
            p.weights.data.sqrt(),
            &mut self.block,
        );
    }

    pub(crate) fn finish(self) -> Linearization {
        Linearization {
            residuals: self.block.residuals,
            jacobian: self.block.jacobian,
        }
    }

    pub(crate) fn cost(self) -> f64 {
        self.block.energy()
    }
}

/// The full objective over all parameters, nodes laid out by `permutation`
/// (`None` for natural order).
#[derive(Debug, Clone)]
pub struct FullProblem<'p, 'a> {
    pub problem: &'p EdProblem<'a>,
    permutation: Option<&'p [usize]>,
}

impl<'p, 'a> FullProblem<'p, 'a> {
    pub fn natural(problem: &'p EdProblem<'a>) -> Self {
        Self {
            problem,
            permutation: None,
        }
    }

    pub fn permuted(problem: &'p EdProblem<'a>, permutation: &'p [usize]) -> Self {
        Self {
            problem,
            permutation: Some(permutation),
        }
    }

    fn columns(&self) -> FullColumns<'p> {
        match self.permutation {
            Some(p) => FullColumns::permuted(p),
            None => FullColumns::natural(self.problem.graph.node_count()),
        }
    }

    fn rows<C: ColumnMap>(&self, state: &DeformState, cols: &C) -> Rows<'p, 'a> {
        let p = self.problem;
        let mut rows = Rows::new(p, cols.dim());
        rows.rot(state, 0..state.node_count(), cols);
        rows.reg(state, p.graph.directed_edges(), cols);
        rows.data(state, cols);
        rows
    }
}

impl LeastSquares for FullProblem<'_, '_> {
    type Point = DeformState;

    fn dim(&self) -> usize {
        GLOBAL_DIM + NODE_DIM * self.problem.graph.node_count()
    }

    fn linearize(&self, x: &DeformState) -> Linearization {
        self.rows(x, &self.columns()).finish()
    }

    fn cost(&self, x: &DeformState) -> f64 {
        self.rows(x, &NoColumns).cost()
    }

    fn retract(&self, x: &DeformState, step: &[f64]) -> DeformState {
        let cols = self.columns();
        let mut out = x.clone();
        out.global.add_step(&step[..GLOBAL_DIM]);
        for (j, node) in out.nodes.iter_mut().enumerate() {
            let base = cols.node(j).expect("all nodes are free");
            node.add_step(&step[base..base + NODE_DIM]);
        }
        out
    }
}

/// Node index to local slot for a subset of nodes.
#[derive(Debug, Clone, Default)]
pub struct LocalIndex {
    pub nodes: Vec<usize>,
    slot: HashMap<usize, usize>,
}

impl LocalIndex {
    pub fn new(nodes: &[usize]) -> Self {
        Self {
            nodes: nodes.to_vec(),
            slot: nodes.iter().enumerate().map(|(l, &j)| (j, l)).collect(),
        }
    }

    #[inline]
    pub fn slot(&self, j: usize) -> Option<usize> {
        self.slot.get(&j).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Columns for a node subset, optionally preceded by the global pose.
#[derive(Debug, Clone, Copy)]
pub struct LocalColumns<'a> {
    pub index: &'a LocalIndex,
    pub with_global: bool,
}

impl LocalColumns<'_> {
    fn offset(&self) -> usize {
        if self.with_global {
            GLOBAL_DIM
        } else {
            0
        }
    }
}

impl ColumnMap for LocalColumns<'_> {
    fn dim(&self) -> usize {
        self.offset() + NODE_DIM * self.index.len()
    }

    fn global(&self) -> Option<usize> {
        self.with_global.then_some(0)
    }

    #[inline]
    fn node(&self, j: usize) -> Option<usize> {
        self.index.slot(j).map(|l| self.offset() + NODE_DIM * l)
    }
}

/// A base state with some node transforms and the global pose replaced.
pub struct Overlay<'a> {
    pub base: &'a DeformState,
    pub global: &'a GlobalPose,
    pub nodes: &'a [NodeTransform],
    pub index: &'a LocalIndex,
}

impl StateView for Overlay<'_> {
    #[inline]
    fn node(&self, j: usize) -> &NodeTransform {
        match self.index.slot(j) {
            Some(l) => &self.nodes[l],
            None => &self.base.nodes[j],
        }
    }

    #[inline]
    fn global(&self) -> &GlobalPose {
        self.global
    }
}
