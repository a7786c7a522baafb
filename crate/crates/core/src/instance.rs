//! Randomised problem instances for self-checks and tests.

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::Rng;

use crate::energy::{DataTerm, Pair};
use crate::graph::{bind_vertices, build_node_edges, BindingTable, EdGraph, DEFAULT_EDGE_K};
use crate::mesh::PointSet;
use crate::state::{DeformState, GlobalPose, NodeTransform};

/// A complete random problem: graph, bound vertices, targets, pairs and a
/// non-trivial state.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub graph: EdGraph,
    pub binding: BindingTable,
    pub vertices: Vec<Point3<f64>>,
    pub targets: PointSet,
    pub pairs: Vec<Pair>,
    pub state: DeformState,
}

impl RandomInstance {
    /// `nodes` random nodes in a box, `vertices` random vertices around them,
    /// each vertex paired with a jittered target.
    pub fn generate<R: Rng>(rng: &mut R, nodes: usize, vertices: usize) -> Self {
        assert!(nodes >= 2, "need at least two nodes");
        let extent = (nodes as f64).cbrt() * 1.5;
        let mut node_pos: Vec<Point3<f64>> = Vec::with_capacity(nodes);
        while node_pos.len() < nodes {
            let p = random_point(rng, extent);
            if node_pos.iter().all(|g| (g - p).norm() >= 0.2) {
                node_pos.push(p);
            }
        }
        let graph = EdGraph {
            nodes: node_pos,
            edges: Vec::new(),
            sampling_radius: 0.2,
            edge_k: DEFAULT_EDGE_K,
        };
        let graph = build_node_edges(graph, DEFAULT_EDGE_K).expect("at least two nodes");
        let verts: Vec<Point3<f64>> = (0..vertices).map(|_| random_point(rng, extent)).collect();
        let binding = bind_vertices(&verts, &graph).expect("non-empty input");
        let state = random_state(rng, &graph, 0.3);
        let targets = PointSet::new(
            verts
                .iter()
                .map(|v| {
                    v + Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
        );
        let pairs = (0..vertices).map(|i| (i, i)).collect();
        Self {
            graph,
            binding,
            vertices: verts,
            targets,
            pairs,
            state,
        }
    }

    pub fn data(&self) -> DataTerm<'_> {
        DataTerm {
            graph: &self.graph,
            binding: &self.binding,
            vertices: &self.vertices,
            targets: &self.targets,
            pairs: &self.pairs,
        }
    }
}

impl RandomInstance {
    /// Same problem with node `j` renamed to `permutation[j]`.
    pub fn relabel(&self, permutation: &[usize]) -> Self {
        let n = self.graph.node_count();
        assert_eq!(permutation.len(), n);
        let mut nodes = vec![Point3::origin(); n];
        let mut edges = vec![Vec::new(); n];
        for j in 0..n {
            nodes[permutation[j]] = self.graph.nodes[j];
            edges[permutation[j]] = self.graph.edges[j]
                .iter()
                .map(|&k| permutation[k])
                .collect();
        }
        let mut binding = self.binding.clone();
        for ids in &mut binding.node_ids {
            for id in ids.iter_mut() {
                *id = permutation[*id];
            }
        }
        Self {
            graph: EdGraph {
                nodes,
                edges,
                ..self.graph.clone()
            },
            binding,
            vertices: self.vertices.clone(),
            targets: self.targets.clone(),
            pairs: self.pairs.clone(),
            state: permute_state(&self.state, permutation),
        }
    }
}

/// Moves node `j`'s transform to slot `permutation[j]`.
pub fn permute_state(state: &DeformState, permutation: &[usize]) -> DeformState {
    let mut nodes = state.nodes.clone();
    for (j, &p) in permutation.iter().enumerate() {
        nodes[p] = state.nodes[j];
    }
    DeformState {
        global: state.global,
        nodes,
    }
}

/// Uniformly random permutation of `0..n`.
pub fn random_permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

fn random_point<R: Rng>(rng: &mut R, extent: f64) -> Point3<f64> {
    Point3::new(
        rng.gen_range(0.0..extent),
        rng.gen_range(0.0..extent),
        rng.gen_range(0.0..extent),
    )
}

pub fn random_rotation<R: Rng>(rng: &mut R, max_angle: f64) -> Matrix3<f64> {
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let axis = if axis.norm() > 1e-6 {
        axis.normalize()
    } else {
        Vector3::z()
    };
    *Rotation3::new(axis * rng.gen_range(-max_angle..max_angle)).matrix()
}

/// Node transforms perturbed from identity by up to `spread`, random global pose.
pub fn random_state<R: Rng>(rng: &mut R, graph: &EdGraph, spread: f64) -> DeformState {
    let nodes = (0..graph.node_count())
        .map(|_| NodeTransform {
            affine: Matrix3::identity() + Matrix3::from_fn(|_, _| rng.gen_range(-spread..spread)),
            translation: Vector3::from_fn(|_, _| rng.gen_range(-spread..spread)),
        })
        .collect();
    DeformState {
        global: GlobalPose {
            rotation: random_rotation(rng, 1.0),
            translation: Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
        },
        nodes,
    }
}
