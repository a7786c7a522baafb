use super::*;
use crate::gradcheck::{max_jacobian_error, REL_TOLERANCE};
use crate::graph::{bind_vertices, build_node_edges, sample_nodes};
use crate::instance::{random_rotation, RandomInstance};
use crate::state::{DeformState, NodeTransform, GLOBAL_DIM, NODE_DIM};
use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn p(x: f64, y: f64, z: f64) -> Point3<f64> {
    Point3::new(x, y, z)
}

fn two_node_graph() -> EdGraph {
    build_node_edges(
        sample_nodes(&[p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)], 0.5).unwrap(),
        4,
    )
    .unwrap()
}

#[test]
fn identity_state_leaves_vertices() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inst = RandomInstance::generate(&mut rng, 10, 40);
    let id = DeformState::identity(10);
    let out = apply_deformation(&id, &inst.graph, &inst.binding, &inst.vertices).unwrap();
    for (a, b) in out.iter().zip(&inst.vertices) {
        assert!((a - b).norm() < 1e-12);
    }
}

#[test]
fn single_node_translation() {
    let graph = two_node_graph();
    let mut binding = BindingTable::default();
    binding.node_ids.push([0, 0, 0, 0]);
    binding.weights.push([1.0, 0.0, 0.0, 0.0]);
    binding.counts.push(1);
    let mut state = DeformState::identity(2);
    state.nodes[0].translation = Vector3::new(1.0, 0.0, 0.0);
    let out = apply_deformation(&state, &graph, &binding, &[p(2.0, 3.0, 4.0)]).unwrap();
    assert_eq!(out[0], p(3.0, 3.0, 4.0));
}

#[test]
fn deformation_rejects_count_mismatch() {
    let graph = two_node_graph();
    let binding = bind_vertices(&[p(0.0, 0.0, 0.0)], &graph).unwrap();
    assert!(apply_deformation(&DeformState::identity(2), &graph, &binding, &[]).is_err());
}

#[test]
fn rot_residual_examples() {
    let mut state = DeformState::identity(1);
    assert!(e_rot(&state).residuals.iter().all(|&r| r == 0.0));
    state.nodes[0].affine = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
    let block = e_rot(&state);
    assert_eq!(block.residuals, vec![0.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
    assert_eq!(block.energy(), 9.0);
}

#[test]
fn rot_jacobian_is_block_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inst = RandomInstance::generate(&mut rng, 7, 5);
    let block = e_rot(&inst.state);
    for row in 0..block.len() {
        let j = row / 6;
        let lo = GLOBAL_DIM + NODE_DIM * j;
        let (cols, _) = block.jacobian.row(row);
        assert!(
            cols.iter().all(|&c| c >= lo && c < lo + 9),
            "row {row}: {cols:?}"
        );
    }
}

#[test]
fn reg_examples() {
    let graph = two_node_graph();
    let mut state = DeformState::identity(2);
    for t in [Vector3::zeros(), Vector3::new(0.3, -1.0, 2.0)] {
        state.nodes.iter_mut().for_each(|n| n.translation = t);
        assert!(e_reg(&state, &graph, 1.0).energy().abs() < 1e-24);
    }
    state.nodes[0].translation = Vector3::new(0.0, 0.0, 1.0);
    state.nodes[1].translation = Vector3::zeros();
    assert!((e_reg(&state, &graph, 1.0).energy() - 2.0).abs() < 1e-15);
}

#[test]
fn reg_jacobian_touches_j_block_and_k_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = RandomInstance::generate(&mut rng, 8, 5);
    let block = e_reg(&inst.state, &inst.graph, 1.0);
    for (e, (j, k)) in inst.graph.directed_edges().enumerate() {
        let bj = GLOBAL_DIM + NODE_DIM * j;
        let bk = GLOBAL_DIM + NODE_DIM * k;
        for row in 3 * e..3 * e + 3 {
            let (cols, _) = block.jacobian.row(row);
            assert!(cols
                .iter()
                .all(|&c| (c >= bj && c < bj + NODE_DIM) || (c >= bk + 9 && c < bk + NODE_DIM)));
        }
    }
}

#[test]
fn data_examples() {
    let graph = two_node_graph();
    let verts = [p(0.0, 0.0, 0.0)];
    let binding = bind_vertices(&verts, &graph).unwrap();
    let targets = PointSet::new(vec![p(1.0, 0.0, 0.0)]);
    let pairs = [(0, 0)];
    let data = DataTerm {
        graph: &graph,
        binding: &binding,
        vertices: &verts,
        targets: &targets,
        pairs: &pairs,
    };
    let block = e_data(&DeformState::identity(2), &data).unwrap();
    assert_eq!(block.residuals, vec![-1.0, 0.0, 0.0]);
    assert_eq!(block.energy(), 1.0);

    let exact = PointSet::new(verts.to_vec());
    let data = DataTerm {
        targets: &exact,
        ..data
    };
    assert!(e_data(&DeformState::identity(2), &data).unwrap().energy() == 0.0);

    let bad = [(0, 3)];
    let data = DataTerm {
        pairs: &bad,
        ..data
    };
    assert!(e_data(&DeformState::identity(2), &data).is_err());
}

#[test]
fn data_jacobian_sparsity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inst = RandomInstance::generate(&mut rng, 12, 30);
    let block = e_data(&inst.state, &inst.data()).unwrap();
    for (pi, &(v, _)) in inst.pairs.iter().enumerate() {
        let allowed: Vec<usize> = inst.binding.bound(v).map(|(j, _)| j).collect();
        for row in 3 * pi..3 * pi + 3 {
            for &c in block.jacobian.row(row).0 {
                assert!(c < GLOBAL_DIM || allowed.contains(&((c - GLOBAL_DIM) / NODE_DIM)));
            }
        }
    }
}

#[test]
fn jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let inst = RandomInstance::generate(&mut rng, 6, 15);
        let data = inst.data();
        let s = &inst.state;
        let rot = max_jacobian_error(s, &e_rot(s), |x| e_rot(x).residuals);
        let reg = max_jacobian_error(s, &e_reg(s, &inst.graph, 0.7), |x| {
            e_reg(x, &inst.graph, 0.7).residuals
        });
        let dat = max_jacobian_error(s, &e_data(s, &data).unwrap(), |x| {
            e_data(x, &data).unwrap().residuals
        });
        assert!(
            rot <= REL_TOLERANCE && reg <= REL_TOLERANCE && dat <= REL_TOLERANCE,
            "{rot} {reg} {dat}"
        );
    }
}

#[test]
fn rigid_motion_is_in_null_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inst = RandomInstance::generate(&mut rng, 15, 60);
    let r = random_rotation(&mut rng, 3.0);
    let t = Vector3::new(rng.gen_range(-2.0..2.0), 1.0, -0.5);
    let state = DeformState::rigid(&inst.graph, &r, &t);
    assert!(e_rot(&state).energy() < 1e-24);
    assert!(e_reg(&state, &inst.graph, 1.0).energy() < 1e-24);
    let moved = apply_deformation(&state, &inst.graph, &inst.binding, &inst.vertices).unwrap();
    for (m, v) in moved.iter().zip(&inst.vertices) {
        assert!((m - (r * v + t)).norm() < 1e-10);
    }
    let targets = PointSet::new(moved);
    let data = DataTerm {
        targets: &targets,
        ..inst.data()
    };
    assert!(e_data(&state, &data).unwrap().energy() < 1e-20);
}

#[test]
fn design_counts_and_sums() {
    let nodes: Vec<_> = (0..4).map(|i| p(i as f64, (i % 2) as f64, 0.0)).collect();
    let graph = build_node_edges(sample_nodes(&nodes, 0.5).unwrap(), 4).unwrap();
    let verts = [p(0.5, 0.5, 0.1)];
    let binding = bind_vertices(&verts, &graph).unwrap();
    let design = SparseDesign::build(&graph, &binding, &verts).unwrap();
    assert_eq!(design.m.nnz(), 12);
    assert_eq!(design.c.nnz(), 4);
    assert!((design.weight_sums()[0] - 1.0).abs() <= 1e-12);
}

#[test]
fn matrix_form_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inst = RandomInstance::generate(&mut rng, 20, 200);
    let design = SparseDesign::build(&inst.graph, &inst.binding, &inst.vertices).unwrap();
    assert!(design.m.col_iter().all(|c| c.nnz() == 12));
    assert!(design.c.col_iter().all(|c| c.nnz() == 4));
    let direct =
        apply_deformation(&inst.state, &inst.graph, &inst.binding, &inst.vertices).unwrap();
    let matrix = design.deform(&inst.state, &inst.graph);
    let worst = direct
        .iter()
        .zip(&matrix)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn total_energy_weights_and_stacking() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inst = RandomInstance::generate(&mut rng, 9, 20);
    let blocks = vec![
        e_rot(&inst.state),
        e_reg(&inst.state, &inst.graph, 1.0),
        e_data(&inst.state, &inst.data()).unwrap(),
    ];
    let w = EnergyWeights::new(0.5, 3.0, 7.0).unwrap();
    let (b, r, j) = total_energy(&blocks, &w);
    let stacked: f64 = r.iter().map(|x| x * x).sum();
    assert!((stacked - b.total).abs() <= 1e-10 * b.total);
    assert_eq!(j.nrows(), r.len());
    let data_only = total_energy(&blocks, &EnergyWeights::new(0.0, 0.0, 1.0).unwrap()).0;
    assert!((data_only.total - blocks[2].energy()).abs() < 1e-12);

    let zero_state = DeformState::identity(2);
    let zero = total_energy(&[e_rot(&zero_state)], &w).0;
    assert_eq!(zero.total, 0.0);
}

#[test]
fn weights_validation() {
    assert!(EnergyWeights::new(0.0, 0.0, 0.0).is_err());
    assert!(EnergyWeights::new(-1.0, 1.0, 1.0).is_err());
    assert!(EnergyWeights::new(0.0, 0.0, 1.0).is_ok());
}

#[test]
fn node_relabelling_leaves_residuals_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inst = RandomInstance::generate(&mut rng, 10, 30);
    let n = inst.graph.node_count();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    // permutation[j] = new position of old node j
    let mut permutation = vec![0; n];
    for (pos, &j) in order.iter().enumerate() {
        permutation[j] = pos;
    }
    let cols = FullColumns::permuted(&permutation);
    let mut permuted = ResidualBlock::new(Term::Data, cols.dim());
    data_rows(
        &inst.state,
        &inst.data(),
        inst.pairs.iter().copied(),
        &cols,
        1.0,
        &mut permuted,
    );
    let natural = e_data(&inst.state, &inst.data()).unwrap();
    assert_eq!(permuted.residuals, natural.residuals);
    // inverse permutation on the columns recovers the natural Jacobian
    let mut inverse = vec![0; cols.dim()];
    for c in 0..GLOBAL_DIM {
        inverse[c] = c;
    }
    for j in 0..n {
        for p in 0..NODE_DIM {
            inverse[GLOBAL_DIM + NODE_DIM * permutation[j] + p] = GLOBAL_DIM + NODE_DIM * j + p;
        }
    }
    let restored = permuted.jacobian.remap_columns(cols.dim(), &inverse);
    assert_eq!(restored.to_dense(), natural.jacobian.to_dense());
}

#[test]
fn node_transform_apply_matches_formula() {
    let n = NodeTransform {
        affine: Matrix3::new(1.0, 2.0, 0.0, 0.0, 1.0, 0.0, 0.5, 0.0, 1.0),
        translation: Vector3::new(0.1, 0.2, 0.3),
    };
    let g = p(1.0, 1.0, 1.0);
    let v = p(2.0, 0.0, 1.0);
    let expect = n.affine * (v - g) + g.coords + n.translation;
    assert_eq!(n.apply(&g, &v).coords, expect);
}
