//! Deformation-graph construction: node sampling, node-node edges, vertex
//! binding and visibility-driven node classification.

use std::collections::BTreeSet;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::spatial::PointGrid;

/// Nodes bound to each vertex.
pub const BOUND_NODES: usize = 4;
/// Default neighbour count for node-node edges.
pub const DEFAULT_EDGE_K: usize = 4;

/// Embedded deformation graph: node positions and directed neighbour lists.
#[derive(Debug, Clone, PartialEq)]
pub struct EdGraph {
    pub nodes: Vec<Point3<f64>>,
    /// `edges[j]` lists the neighbours of node `j`, nearest first.
    pub edges: Vec<Vec<usize>>,
    pub sampling_radius: f64,
    pub edge_k: usize,
}

impl EdGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Total number of directed edges.
    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Directed edges `(j, k)` in the order the regulariser visits them.
    pub fn directed_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .flat_map(|(j, ks)| ks.iter().map(move |&k| (j, k)))
    }

    /// For each node, the nodes that list it as a neighbour.
    pub fn incoming_edges(&self) -> Vec<Vec<usize>> {
        let mut incoming = vec![Vec::new(); self.nodes.len()];
        for (j, k) in self.directed_edges() {
            incoming[k].push(j);
        }
        incoming
    }
}

/// Greedy uniform downsampling in input order: a point becomes a node iff it is
/// at least `radius` away from every previously accepted node.
pub fn sample_nodes(points: &[Point3<f64>], radius: f64) -> Result<EdGraph> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "sampling radius must be positive, got {radius}"
        )));
    }
    if points.is_empty() {
        return Err(Error::InvalidInput(
            "cannot sample nodes from an empty point list".into(),
        ));
    }
    let mut grid = PointGrid::new(radius);
    greedy_accept(&mut grid, points, radius);
    Ok(EdGraph {
        nodes: grid_points(&grid),
        edges: Vec::new(),
        sampling_radius: radius,
        edge_k: DEFAULT_EDGE_K,
    })
}

fn greedy_accept(grid: &mut PointGrid, points: &[Point3<f64>], radius: f64) -> usize {
    let before = grid.len();
    for p in points {
        if !grid.any_within(p, radius) {
            grid.insert(*p);
        }
    }
    grid.len() - before
}

fn grid_points(grid: &PointGrid) -> Vec<Point3<f64>> {
    (0..grid.len()).map(|i| *grid.point(i)).collect()
}

/// Fills `N(j)` with the `k` nearest other nodes (ties to the lower index).
pub fn build_node_edges(mut graph: EdGraph, k: usize) -> Result<EdGraph> {
    if graph.nodes.len() < 2 {
        return Err(Error::InvalidInput(
            "node edges need at least two nodes".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidInput(
            "edge neighbour count must be at least 1".into(),
        ));
    }
    let grid = PointGrid::from_points(&graph.nodes, graph.sampling_radius);
    graph.edges = (0..graph.nodes.len())
        .map(|j| node_neighbours(&grid, &graph.nodes, j, k))
        .collect();
    graph.edge_k = k;
    Ok(graph)
}

fn node_neighbours(grid: &PointGrid, nodes: &[Point3<f64>], j: usize, k: usize) -> Vec<usize> {
    grid.knn_filtered(&nodes[j], k, |i| i != j)
        .into_iter()
        .map(|(i, _)| i)
        .collect()
}

/// Per-vertex node indices and normalised blend weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BindingTable {
    pub node_ids: Vec<[usize; BOUND_NODES]>,
    pub weights: Vec<[f64; BOUND_NODES]>,
    /// Number of valid slots per vertex; 4 unless the graph has fewer nodes.
    pub counts: Vec<u8>,
}

impl BindingTable {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    /// `(node, weight)` pairs bound to vertex `i`.
    pub fn bound(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let n = self.counts[i] as usize;
        self.node_ids[i][..n]
            .iter()
            .copied()
            .zip(self.weights[i][..n].iter().copied())
    }

    fn push(&mut self, bound: &[(usize, f64)]) {
        let mut ids = [0; BOUND_NODES];
        let mut ws = [0.0; BOUND_NODES];
        for (slot, &(j, w)) in bound.iter().enumerate() {
            ids[slot] = j;
            ws[slot] = w;
        }
        self.node_ids.push(ids);
        self.weights.push(ws);
        self.counts.push(bound.len() as u8);
    }

    fn append(&mut self, other: BindingTable) {
        self.node_ids.extend(other.node_ids);
        self.weights.extend(other.weights);
        self.counts.extend(other.counts);
    }
}

/// Binds each vertex to its 4 nearest nodes with weights
/// `1 - |v - g| / d_max`, `d_max` being the distance to the 5th nearest node,
/// normalised to sum to one. Graphs with 2-4 nodes bind every node and use
/// `d_max = 1.1 * (largest bound distance)`.
pub fn bind_vertices(vertices: &[Point3<f64>], graph: &EdGraph) -> Result<BindingTable> {
    if vertices.is_empty() {
        return Err(Error::InvalidInput("no vertices to bind".into()));
    }
    if graph.nodes.len() < 2 {
        return Err(Error::InvalidInput(
            "binding needs at least two nodes".into(),
        ));
    }
    let grid = PointGrid::from_points(&graph.nodes, graph.sampling_radius);
    let mut table = BindingTable::default();
    for v in vertices {
        table.push(&bind_one(&grid, v));
    }
    Ok(table)
}

fn bind_one(grid: &PointGrid, v: &Point3<f64>) -> Vec<(usize, f64)> {
    let near = grid.knn(v, BOUND_NODES + 1);
    let (bound, d_max) = if near.len() > BOUND_NODES {
        (&near[..BOUND_NODES], near[BOUND_NODES].1)
    } else {
        let far = near.iter().map(|n| n.1).fold(0.0, f64::max);
        (&near[..], 1.1 * far)
    };
    let raw: Vec<f64> = bound
        .iter()
        .map(|&(_, d)| {
            if d_max > 0.0 {
                (1.0 - d / d_max).max(0.0)
            } else {
                1.0
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    bound
        .iter()
        .zip(&raw)
        .map(|(&(j, _), &w)| {
            let w = if total > 0.0 {
                w / total
            } else {
                1.0 / bound.len() as f64
            };
            (j, w)
        })
        .collect()
}

/// Split of node indices into nodes bound to visible vertices ("relevant")
/// and the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub relevant: Vec<usize>,
    pub irrelevant: Vec<usize>,
    /// `permutation[j]` is the position of node `j` in the relevant-first order.
    pub permutation: Vec<usize>,
}

impl Partition {
    /// Trivial partition with every node relevant.
    pub fn all_relevant(node_count: usize) -> Self {
        Self {
            relevant: (0..node_count).collect(),
            irrelevant: Vec::new(),
            permutation: (0..node_count).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.permutation.len()
    }

    /// Node indices in relevant-first order (the inverse permutation).
    pub fn order(&self) -> Vec<usize> {
        self.relevant
            .iter()
            .chain(&self.irrelevant)
            .copied()
            .collect()
    }

    pub fn is_relevant(&self, j: usize) -> bool {
        self.permutation[j] < self.relevant.len()
    }
}

/// Marks every node bound to a visible vertex as relevant.
pub fn classify_nodes(
    binding: &BindingTable,
    visible_vertices: &[usize],
    node_count: usize,
) -> Result<Partition> {
    let mut relevant = BTreeSet::new();
    for &v in visible_vertices {
        if v >= binding.len() {
            return Err(Error::IndexOutOfRange {
                what: "binding table",
                index: v,
                len: binding.len(),
            });
        }
        for (j, _) in binding.bound(v) {
            if j >= node_count {
                return Err(Error::IndexOutOfRange {
                    what: "node list",
                    index: j,
                    len: node_count,
                });
            }
            relevant.insert(j);
        }
    }
    let relevant: Vec<usize> = relevant.into_iter().collect();
    let mut is_rel = vec![false; node_count];
    for &j in &relevant {
        is_rel[j] = true;
    }
    let irrelevant: Vec<usize> = (0..node_count).filter(|&j| !is_rel[j]).collect();
    let mut permutation = vec![0; node_count];
    for (pos, &j) in relevant.iter().chain(&irrelevant).enumerate() {
        permutation[j] = pos;
    }
    Ok(Partition {
        relevant,
        irrelevant,
        permutation,
    })
}

/// Grows the graph with nodes sampled from `new_points` (same radius rule
/// against the existing nodes), rebuilds the neighbour lists that change and
/// binds `new_points` as additional vertices. Existing bindings are kept.
pub fn extend_graph(
    graph: &EdGraph,
    binding: &BindingTable,
    new_points: &[Point3<f64>],
) -> Result<(EdGraph, BindingTable)> {
    let mut grid = PointGrid::new(graph.sampling_radius);
    for g in &graph.nodes {
        grid.insert(*g);
    }
    let old_count = graph.nodes.len();
    greedy_accept(&mut grid, new_points, graph.sampling_radius);
    let mut grown = EdGraph {
        nodes: grid_points(&grid),
        edges: graph.edges.clone(),
        sampling_radius: graph.sampling_radius,
        edge_k: graph.edge_k,
    };
    let added = grown.nodes.len() - old_count;
    if grown.nodes.len() >= 2 && (added > 0 || grown.edges.len() != grown.nodes.len()) {
        refresh_edges(&mut grown, &grid, old_count);
    }
    let mut table = binding.clone();
    if !new_points.is_empty() {
        if grown.nodes.len() < 2 {
            return Err(Error::InvalidInput(
                "binding needs at least two nodes".into(),
            ));
        }
        table.append(bind_vertices(new_points, &grown)?);
    }
    Ok((grown, table))
}

fn refresh_edges(graph: &mut EdGraph, grid: &PointGrid, old_count: usize) {
    let k = graph.edge_k;
    let n = graph.nodes.len();
    graph.edges.resize(n, Vec::new());
    let new_nodes = &graph.nodes[old_count..];
    for j in 0..n {
        let stale = if j >= old_count || graph.edges[j].len() < k.min(n - 1) {
            true
        } else {
            // a new node displaces an old neighbour iff it is at least as close
            // as the current k-th neighbour
            let kth = *graph.edges[j].last().expect("non-empty neighbour list");
            let limit = (graph.nodes[kth] - graph.nodes[j]).norm_squared();
            new_nodes
                .iter()
                .any(|p| (p - graph.nodes[j]).norm_squared() <= limit)
        };
        if stale {
            graph.edges[j] = node_neighbours(grid, &graph.nodes, j, k);
        }
    }
}
