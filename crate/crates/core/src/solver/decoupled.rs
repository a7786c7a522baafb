//! Two-level solve: relevant nodes and the global pose against all terms,
//! then irrelevant nodes against rotation and regularisation only.

use crate::state::{DeformState, GlobalPose, NodeTransform, GLOBAL_DIM, NODE_DIM};

use super::lm::{LeastSquares, Linearization};
use super::problem::{EdProblem, LocalColumns, LocalIndex, NoColumns, Overlay, Rows};

/// Level I: global pose plus the relevant nodes. Rows are the rotation rows
/// of those nodes, regularisation rows `(j, k)` with `j` relevant (a node `k`
/// outside the set only enters through constants) and every data row.
pub struct LevelOne<'p, 'a> {
    problem: &'p EdProblem<'a>,
    base: &'p DeformState,
    index: LocalIndex,
    edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct LevelOnePoint {
    pub global: GlobalPose,
    pub nodes: Vec<NodeTransform>,
}

impl<'p, 'a> LevelOne<'p, 'a> {
    pub fn new(problem: &'p EdProblem<'a>, base: &'p DeformState, relevant: &[usize]) -> Self {
        let edges = relevant
            .iter()
            .flat_map(|&j| problem.graph.edges[j].iter().map(move |&k| (j, k)))
            .collect();
        Self {
            problem,
            base,
            index: LocalIndex::new(relevant),
            edges,
        }
    }

    pub fn start(&self) -> LevelOnePoint {
        LevelOnePoint {
            global: self.base.global,
            nodes: self
                .index
                .nodes
                .iter()
                .map(|&j| self.base.nodes[j])
                .collect(),
        }
    }

    fn columns(&self) -> LocalColumns<'_> {
        LocalColumns {
            index: &self.index,
            with_global: true,
        }
    }

    fn rows<C: crate::state::ColumnMap>(&self, x: &LevelOnePoint, cols: &C) -> Rows<'p, 'a> {
        let view = Overlay {
            base: self.base,
            global: &x.global,
            nodes: &x.nodes,
            index: &self.index,
        };
        let mut rows = Rows::new(self.problem, cols.dim());
        rows.rot(&view, self.index.nodes.iter().copied(), cols);
        rows.reg(&view, self.edges.iter().copied(), cols);
        rows.data(&view, cols);
        rows
    }
}

impl LeastSquares for LevelOne<'_, '_> {
    type Point = LevelOnePoint;

    fn dim(&self) -> usize {
        GLOBAL_DIM + NODE_DIM * self.index.len()
    }

    fn linearize(&self, x: &LevelOnePoint) -> Linearization {
        self.rows(x, &self.columns()).finish()
    }

    fn cost(&self, x: &LevelOnePoint) -> f64 {
        self.rows(x, &NoColumns).cost()
    }

    fn retract(&self, x: &LevelOnePoint, step: &[f64]) -> LevelOnePoint {
        let mut out = x.clone();
        out.global.add_step(&step[..GLOBAL_DIM]);
        for (l, node) in out.nodes.iter_mut().enumerate() {
            let base = GLOBAL_DIM + NODE_DIM * l;
            node.add_step(&step[base..base + NODE_DIM]);
        }
        out
    }
}

/// Level II: the irrelevant nodes with everything else frozen. Rows are their
/// rotation rows and every regularisation row touching one of them.
pub struct LevelTwo<'p, 'a> {
    problem: &'p EdProblem<'a>,
    base: &'p DeformState,
    index: LocalIndex,
    edges: Vec<(usize, usize)>,
}

impl<'p, 'a> LevelTwo<'p, 'a> {
    pub fn new(
        problem: &'p EdProblem<'a>,
        base: &'p DeformState,
        relevant: &[usize],
        irrelevant: &[usize],
    ) -> Self {
        let index = LocalIndex::new(irrelevant);
        let graph = problem.graph;
        let mut edges: Vec<(usize, usize)> = irrelevant
            .iter()
            .flat_map(|&j| graph.edges[j].iter().map(move |&k| (j, k)))
            .collect();
        for &j in relevant {
            for &k in &graph.edges[j] {
                if index.slot(k).is_some() {
                    edges.push((j, k));
                }
            }
        }
        Self {
            problem,
            base,
            index,
            edges,
        }
    }

    pub fn start(&self) -> Vec<NodeTransform> {
        self.index
            .nodes
            .iter()
            .map(|&j| self.base.nodes[j])
            .collect()
    }

    fn rows<C: crate::state::ColumnMap>(&self, x: &[NodeTransform], cols: &C) -> Rows<'p, 'a> {
        let view = Overlay {
            base: self.base,
            global: &self.base.global,
            nodes: x,
            index: &self.index,
        };
        let mut rows = Rows::new(self.problem, cols.dim());
        rows.rot(&view, self.index.nodes.iter().copied(), cols);
        rows.reg(&view, self.edges.iter().copied(), cols);
        rows
    }
}

impl LeastSquares for LevelTwo<'_, '_> {
    type Point = Vec<NodeTransform>;

    fn dim(&self) -> usize {
        NODE_DIM * self.index.len()
    }

    fn linearize(&self, x: &Vec<NodeTransform>) -> Linearization {
        let cols = LocalColumns {
            index: &self.index,
            with_global: false,
        };
        self.rows(x, &cols).finish()
    }

    fn cost(&self, x: &Vec<NodeTransform>) -> f64 {
        self.rows(x, &NoColumns).cost()
    }

    fn retract(&self, x: &Vec<NodeTransform>, step: &[f64]) -> Vec<NodeTransform> {
        let mut out = x.clone();
        for (l, node) in out.iter_mut().enumerate() {
            node.add_step(&step[NODE_DIM * l..NODE_DIM * (l + 1)]);
        }
        out
    }
}
