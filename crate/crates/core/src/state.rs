//! Optimisation unknowns and their layout in the parameter vector.
//!
//! The parameter vector holds the 6 global parameters (rotation increment,
//! then translation) followed by 12 parameters per node: the 9 entries of
//! `A_j` in column-major order and then `t_j`.

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};

use crate::graph::EdGraph;

pub const GLOBAL_DIM: usize = 6;
pub const NODE_DIM: usize = 12;
/// Offset of `t_j` inside a node's parameter block.
pub const TRANSLATION_OFFSET: usize = 9;

/// Index of `A[(row, col)]` inside a node block.
#[inline]
pub const fn affine_param(row: usize, col: usize) -> usize {
    3 * col + row
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeTransform {
    pub affine: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl NodeTransform {
    pub fn identity() -> Self {
        Self {
            affine: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Node transform reproducing the rigid motion `x -> R x + t` for a node at `g`.
    pub fn from_rigid(
        rotation: &Matrix3<f64>,
        translation: &Vector3<f64>,
        g: &Point3<f64>,
    ) -> Self {
        Self {
            affine: *rotation,
            translation: rotation * g.coords + translation - g.coords,
        }
    }

    /// Where this node maps point `p` when the node sits at `g`.
    #[inline]
    pub fn apply(&self, g: &Point3<f64>, p: &Point3<f64>) -> Point3<f64> {
        g + self.affine * (p - g) + self.translation
    }

    pub fn add_step(&mut self, step: &[f64]) {
        debug_assert_eq!(step.len(), NODE_DIM);
        for col in 0..3 {
            for row in 0..3 {
                self.affine[(row, col)] += step[affine_param(row, col)];
            }
        }
        for a in 0..3 {
            self.translation[a] += step[TRANSLATION_OFFSET + a];
        }
    }

    pub fn to_params(&self) -> [f64; NODE_DIM] {
        let mut out = [0.0; NODE_DIM];
        for col in 0..3 {
            for row in 0..3 {
                out[affine_param(row, col)] = self.affine[(row, col)];
            }
        }
        for a in 0..3 {
            out[TRANSLATION_OFFSET + a] = self.translation[a];
        }
        out
    }
}

impl Default for NodeTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Global camera pose applied after the node blend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl GlobalPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Composes `exp([δ]×)` onto the rotation and re-orthonormalises it.
    pub fn add_step(&mut self, step: &[f64]) {
        debug_assert_eq!(step.len(), GLOBAL_DIM);
        let delta = Vector3::new(step[0], step[1], step[2]);
        let r = Rotation3::new(delta).matrix() * self.rotation;
        self.rotation = orthonormalize(&r);
        self.translation += Vector3::new(step[3], step[4], step[5]);
    }
}

impl Default for GlobalPose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Nearest rotation in the Frobenius sense.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Rotation and translation minimising `Σ w |R p + t - q|²`. Degenerate
/// (collinear) inputs still return a proper rotation.
pub fn weighted_rigid_fit(
    p: &[Point3<f64>],
    q: &[Point3<f64>],
    w: &[f64],
) -> (Matrix3<f64>, Vector3<f64>) {
    let total: f64 = w.iter().sum();
    let centroid = |pts: &[Point3<f64>]| {
        pts.iter()
            .zip(w)
            .fold(Vector3::zeros(), |acc, (x, &wi)| acc + wi * x.coords)
            / total
    };
    let (pc, qc) = (centroid(p), centroid(q));
    let mut h = Matrix3::zeros();
    for ((a, b), &wi) in p.iter().zip(q).zip(w) {
        h += wi * (b.coords - qc) * (a.coords - pc).transpose();
    }
    let r = orthonormalize(&h);
    (r, qc - r * pc)
}

/// Per-node transforms plus the global pose.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformState {
    pub global: GlobalPose,
    pub nodes: Vec<NodeTransform>,
}

impl DeformState {
    pub fn identity(node_count: usize) -> Self {
        Self {
            global: GlobalPose::identity(),
            nodes: vec![NodeTransform::identity(); node_count],
        }
    }

    /// Every node carries the same rigid motion; the global pose is identity.
    pub fn rigid(graph: &EdGraph, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        Self {
            global: GlobalPose::identity(),
            nodes: graph
                .nodes
                .iter()
                .map(|g| NodeTransform::from_rigid(rotation, translation, g))
                .collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn dim(&self) -> usize {
        GLOBAL_DIM + NODE_DIM * self.nodes.len()
    }

    /// Appends transforms for nodes `old..graph.node_count()`. Each new node
    /// gets the rigid motion that best fits the existing node motions, with
    /// Gaussian weights on distance (scale: three sampling radii). Copying a
    /// single neighbour's affine instead would extrapolate its noise over
    /// the whole newly revealed region.
    pub fn extend_for(&mut self, graph: &EdGraph) {
        let old = self.nodes.len();
        let scale = 3.0 * graph.sampling_radius;
        for j in old..graph.nodes.len() {
            let g = graph.nodes[j];
            let t = match old {
                0 => NodeTransform::identity(),
                1 | 2 => {
                    let k = (0..old)
                        .min_by(|&a, &b| {
                            (graph.nodes[a] - g)
                                .norm_squared()
                                .total_cmp(&(graph.nodes[b] - g).norm_squared())
                        })
                        .expect("old > 0");
                    let src = self.nodes[k];
                    NodeTransform {
                        affine: src.affine,
                        translation: src.apply(&graph.nodes[k], &g) - g,
                    }
                }
                _ => {
                    let d2: Vec<f64> = graph.nodes[..old]
                        .iter()
                        .map(|p| (p - g).norm_squared())
                        .collect();
                    let nearest = d2.iter().copied().fold(f64::INFINITY, f64::min);
                    let weights: Vec<f64> = d2
                        .iter()
                        .map(|d| (-(d - nearest) / (2.0 * scale * scale)).exp())
                        .collect();
                    let moved: Vec<Point3<f64>> = (0..old)
                        .map(|k| graph.nodes[k] + self.nodes[k].translation)
                        .collect();
                    let (r, t) = weighted_rigid_fit(&graph.nodes[..old], &moved, &weights);
                    NodeTransform::from_rigid(&r, &t, &g)
                }
            };
            self.nodes.push(t);
        }
    }

    /// Flat parameter vector in natural node order (global rotation entries
    /// are reported as zero since the rotation lives on the manifold).
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        out[3..6].copy_from_slice(self.global.translation.as_slice());
        for (j, n) in self.nodes.iter().enumerate() {
            out[GLOBAL_DIM + NODE_DIM * j..GLOBAL_DIM + NODE_DIM * (j + 1)]
                .copy_from_slice(&n.to_params());
        }
        out
    }

    /// Max-abs distance between two states over all parameters, including the
    /// full global rotation matrix.
    pub fn distance(&self, other: &DeformState) -> f64 {
        assert_eq!(self.nodes.len(), other.nodes.len());
        let mut d = (self.global.rotation - other.global.rotation)
            .amax()
            .max((self.global.translation - other.global.translation).amax());
        for (a, b) in self.nodes.iter().zip(&other.nodes) {
            d = d
                .max((a.affine - b.affine).amax())
                .max((a.translation - b.translation).amax());
        }
        d
    }
}

/// Read access to node transforms and the global pose, possibly overlaid.
pub trait StateView {
    fn node(&self, j: usize) -> &NodeTransform;
    fn global(&self) -> &GlobalPose;
}

impl StateView for DeformState {
    #[inline]
    fn node(&self, j: usize) -> &NodeTransform {
        &self.nodes[j]
    }

    #[inline]
    fn global(&self) -> &GlobalPose {
        &self.global
    }
}

/// Maps parameters to Jacobian columns. `None` marks a parameter held
/// constant, whose Jacobian entries are dropped.
pub trait ColumnMap {
    fn dim(&self) -> usize;
    fn global(&self) -> Option<usize>;
    fn node(&self, j: usize) -> Option<usize>;
}

/// All parameters free, nodes placed in the order given by an optional
/// permutation (`permutation[j]` = position of node `j`).
#[derive(Debug, Clone)]
pub struct FullColumns<'a> {
    node_count: usize,
    permutation: Option<&'a [usize]>,
}

impl<'a> FullColumns<'a> {
    pub fn natural(node_count: usize) -> Self {
        Self {
            node_count,
            permutation: None,
        }
    }

    pub fn permuted(permutation: &'a [usize]) -> Self {
        Self {
            node_count: permutation.len(),
            permutation: Some(permutation),
        }
    }
}

impl ColumnMap for FullColumns<'_> {
    fn dim(&self) -> usize {
        GLOBAL_DIM + NODE_DIM * self.node_count
    }

    fn global(&self) -> Option<usize> {
        Some(0)
    }

    #[inline]
    fn node(&self, j: usize) -> Option<usize> {
        let pos = self.permutation.map_or(j, |p| p[j]);
        Some(GLOBAL_DIM + NODE_DIM * pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_step_stays_orthonormal() {
        let mut pose = GlobalPose::identity();
        for k in 0..200 {
            let s = 0.3 + 0.001 * k as f64;
            pose.add_step(&[s, -0.2 * s, 0.1, 1.0, 2.0, 3.0]);
            let err = (pose.rotation.transpose() * pose.rotation - Matrix3::identity()).norm();
            assert!(err <= 1e-9, "{err}");
            assert!(pose.rotation.determinant() > 0.0);
        }
    }

    #[test]
    fn orthonormalize_fixes_drift() {
        let r = *Rotation3::new(Vector3::new(0.2, 0.4, -0.1)).matrix();
        let noisy = r + Matrix3::from_element(1e-4);
        let fixed = orthonormalize(&noisy);
        assert!((fixed.transpose() * fixed - Matrix3::identity()).norm() < 1e-12);
        assert!((fixed - r).amax() < 1e-3);
    }

    #[test]
    fn node_params_layout() {
        let mut n = NodeTransform::identity();
        let mut step = [0.0; NODE_DIM];
        step[affine_param(2, 0)] = 5.0;
        step[TRANSLATION_OFFSET + 1] = -1.0;
        n.add_step(&step);
        assert_eq!(n.affine[(2, 0)], 5.0);
        assert_eq!(n.translation.y, -1.0);
        assert_eq!(n.to_params()[2], 5.0);
    }

    #[test]
    fn rigid_fit_recovers_planar_motion() {
        let r = *Rotation3::new(Vector3::new(0.05, -0.3, 0.2)).matrix();
        let t = Vector3::new(0.5, 1.0, -2.0);
        let p: Vec<Point3<f64>> = (0..12)
            .map(|i| Point3::new((i % 4) as f64, (i / 4) as f64 * 1.5, 0.0))
            .collect();
        let q: Vec<Point3<f64>> = p.iter().map(|x| r * x + t).collect();
        let w: Vec<f64> = (0..12).map(|i| 0.5 + i as f64).collect();
        let (rf, tf) = weighted_rigid_fit(&p, &q, &w);
        assert!((rf - r).amax() < 1e-12 && (tf - t).amax() < 1e-12);
    }

    #[test]
    fn extension_continues_a_rigid_field() {
        let nodes: Vec<Point3<f64>> = (0..6)
            .map(|i| Point3::new(i as f64 * 2.0, (i % 2) as f64, 0.0))
            .collect();
        let graph = EdGraph {
            nodes: nodes.clone(),
            edges: vec![Vec::new(); 6],
            sampling_radius: 2.0,
            edge_k: 4,
        };
        let r = *Rotation3::new(Vector3::new(0.0, 0.1, 0.4)).matrix();
        let t = Vector3::new(1.0, 0.0, 3.0);
        let full = DeformState::rigid(&graph, &r, &t);
        let mut part = DeformState {
            global: full.global,
            nodes: full.nodes[..4].to_vec(),
        };
        part.extend_for(&graph);
        assert!(part.distance(&full) < 1e-12);
    }

    #[test]
    fn rigid_node_transform_moves_points_rigidly() {
        let r = *Rotation3::new(Vector3::new(0.1, 0.2, 0.3)).matrix();
        let t = Vector3::new(1.0, -2.0, 0.5);
        let g = Point3::new(3.0, 1.0, -1.0);
        let node = NodeTransform::from_rigid(&r, &t, &g);
        let p = Point3::new(0.3, 0.7, 2.0);
        assert!((node.apply(&g, &p) - (r * p + t)).norm() < 1e-14);
    }
}
