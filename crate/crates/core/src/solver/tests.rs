use nalgebra::{Matrix3, Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::energy::{EnergyWeights, Pair};
use crate::graph::{
    bind_vertices, build_node_edges, classify_nodes, sample_nodes, BindingTable, EdGraph,
};
use crate::instance::{permute_state, random_permutation, random_rotation, RandomInstance};
use crate::mesh::PointSet;

struct Fixture {
    graph: EdGraph,
    binding: BindingTable,
    vertices: Vec<Point3<f64>>,
    targets: PointSet,
    pairs: Vec<Pair>,
}

impl Fixture {
    fn problem(&self) -> EdProblem<'_> {
        EdProblem {
            graph: &self.graph,
            binding: &self.binding,
            vertices: &self.vertices,
            targets: &self.targets,
            pairs: &self.pairs,
            weights: EnergyWeights::default(),
            alpha: 1.0,
        }
    }
}

/// Flat `nx` by `ny` grid with unit spacing, nodes every ~2 cells.
fn grid(nx: usize, ny: usize) -> Fixture {
    let mut vertices = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            vertices.push(Point3::new(i as f64, j as f64, 0.0));
        }
    }
    let graph = build_node_edges(sample_nodes(&vertices, 1.9).unwrap(), 4).unwrap();
    let binding = bind_vertices(&vertices, &graph).unwrap();
    Fixture {
        graph,
        binding,
        targets: PointSet::new(vertices.clone()),
        vertices,
        pairs: Vec::new(),
    }
}

fn instance_fixture(seed: u64, nodes: usize, verts: usize) -> (Fixture, DeformState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = RandomInstance::generate(&mut rng, nodes, verts);
    let f = Fixture {
        graph: inst.graph,
        binding: inst.binding,
        vertices: inst.vertices,
        targets: inst.targets,
        pairs: inst.pairs,
    };
    (f, DeformState::identity(nodes))
}

fn dense_opts() -> SolveOptions {
    SolveOptions {
        linear_solver: LinearSolverKind::DirectDense,
        ..SolveOptions::default()
    }
}

#[test]
fn identity_targets_keep_identity() {
    let mut f = grid(6, 4);
    f.pairs = (0..f.vertices.len()).map(|i| (i, i)).collect();
    let n = f.graph.node_count();
    let (state, rep) = solve_batch(
        &f.problem(),
        DeformState::identity(n),
        &SolveOptions::default(),
    )
    .unwrap();
    assert!(rep.iterations <= 1);
    assert_eq!(state, DeformState::identity(n));
    assert!(rep.converged);
    assert!(rep.energy.total <= 1e-24, "{:?}", rep.energy);
}

fn orthogonality_error(state: &DeformState) -> f64 {
    state
        .nodes
        .iter()
        .map(|n| (n.affine.transpose() * n.affine - Matrix3::identity()).norm_squared())
        .sum::<f64>()
        .sqrt()
}

#[test]
fn pure_rotation_term_descends_monotonically() {
    let f = grid(5, 5);
    let mut problem = f.problem();
    problem.weights = EnergyWeights::new(1.0, 0.0, 0.0).unwrap();
    let mut start = DeformState::identity(f.graph.node_count());
    for n in &mut start.nodes {
        n.affine = Matrix3::identity() * 1.5;
    }
    let mut prev = orthogonality_error(&start);
    let mut prev_accepted = 0;
    for cap in 1..=10 {
        let opts = SolveOptions {
            max_outer_iterations: cap,
            ..dense_opts()
        };
        let (state, rep) = solve_batch(&problem, start.clone(), &opts).unwrap();
        let err = orthogonality_error(&state);
        let accepted = rep.energy_history.len() - 1;
        if accepted > prev_accepted {
            assert!(err < prev, "cap {cap}: {err} !< {prev}");
        } else {
            assert_eq!(err, prev);
        }
        prev = err;
        prev_accepted = accepted;
    }
    assert!(prev < 1e-6, "{prev}");
}

#[test]
fn batch_result_invariant_under_node_relabelling() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let inst = RandomInstance::generate(&mut rng, 12, 60);
    let perm = random_permutation(&mut rng, 12);
    let other = inst.relabel(&perm);
    let opts = dense_opts();
    let solve_inst = |i: &RandomInstance| {
        let p = EdProblem {
            graph: &i.graph,
            binding: &i.binding,
            vertices: &i.vertices,
            targets: &i.targets,
            pairs: &i.pairs,
            weights: EnergyWeights::default(),
            alpha: 1.0,
        };
        solve_batch(&p, DeformState::identity(12), &opts).unwrap().0
    };
    let a = solve_inst(&inst);
    let b = solve_inst(&other);
    assert!(permute_state(&a, &perm).distance(&b) <= 1e-8);
}

#[test]
fn energy_history_never_increases() {
    let (f, s0) = instance_fixture(5, 10, 50);
    let problem = f.problem();
    let partition = classify_nodes(&f.binding, &(0..20).collect::<Vec<_>>(), 10).unwrap();
    for strategy in Strategy::ALL {
        let (_, rep) = solve(
            strategy,
            &problem,
            &partition,
            s0.clone(),
            &SolveOptions::default(),
        )
        .unwrap();
        for w in rep.energy_history.windows(2) {
            assert!(w[1] <= w[0], "{strategy}");
        }
        assert!(rep.energy.total <= rep.initial_energy.total, "{strategy}");
        assert!(rep.timings.total_ms >= 0.0);
    }
}

#[test]
fn marginalized_steps_match_batch_steps() {
    let (f, s0) = instance_fixture(7, 20, 40);
    let problem = f.problem();
    let partition = classify_nodes(&f.binding, &(0..3).collect::<Vec<_>>(), 20).unwrap();
    assert!(!partition.irrelevant.is_empty());
    let opts = SolveOptions {
        record_steps: true,
        max_outer_iterations: 8,
        ..dense_opts()
    };
    let (a, ra) = solve_batch(&problem, s0.clone(), &opts).unwrap();
    let (b, rb) = solve_marginalized(&problem, &partition, s0, &opts).unwrap();
    assert_eq!(ra.steps.len(), rb.steps.len());
    for (sa, sb) in ra.steps.iter().zip(&rb.steps) {
        let sb = step_to_natural(sb, &partition.permutation);
        let scale = sa.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let err = sa
            .iter()
            .zip(&sb)
            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err <= 1e-8 * scale, "{err} vs {scale}");
    }
    assert!(a.distance(&b) <= 1e-7);
}

#[test]
fn marginalized_degenerate_partitions() {
    let (f, s0) = instance_fixture(8, 8, 30);
    let problem = f.problem();
    let opts = dense_opts();
    let (batch, _) = solve_batch(&problem, s0.clone(), &opts).unwrap();
    let all = Partition::all_relevant(8);
    let (m, rep) = solve_marginalized(&problem, &all, s0.clone(), &opts).unwrap();
    assert_eq!(rep.level1_dim, rep.full_dim);
    assert!(batch.distance(&m) <= 1e-9);

    let none = classify_nodes(&f.binding, &[], 8).unwrap();
    assert!(none.relevant.is_empty());
    let (m, rep) = solve_marginalized(&problem, &none, s0, &opts).unwrap();
    assert_eq!(rep.level1_dim, GLOBAL_DIM);
    assert!(batch.distance(&m) <= 1e-7);
}

#[test]
fn decoupled_with_everything_relevant_matches_batch() {
    let (f, s0) = instance_fixture(9, 10, 50);
    let problem = f.problem();
    let all = Partition::all_relevant(10);
    let opts = SolveOptions {
        gradient_tolerance: 1e-10,
        max_outer_iterations: 200,
        ..dense_opts()
    };
    let (batch, rb) = solve_batch(&problem, s0.clone(), &opts).unwrap();
    let (dec, rd) = solve_decoupled(&problem, &all, s0, &opts).unwrap();
    assert_eq!(rd.level2_dim, 0);
    assert_eq!(rd.level2_iterations, 0);
    assert!((rb.energy.total - rd.energy.total).abs() <= 1e-8 * rb.energy.total.max(1.0));
    let a = apply(&f, &batch);
    let b = apply(&f, &dec);
    let diff = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (p - q).norm())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-5, "{diff}");
}

fn apply(f: &Fixture, s: &DeformState) -> Vec<Point3<f64>> {
    crate::energy::apply_deformation(s, &f.graph, &f.binding, &f.vertices).unwrap()
}

#[test]
fn decoupled_recovers_rigid_motion() {
    let mut f = grid(12, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = random_rotation(&mut rng, 0.4);
    let t = Vector3::new(0.3, -0.2, 0.5);
    f.targets = PointSet::new(f.vertices.iter().map(|v| r * v + t).collect());
    // only the first few columns of the grid are observed
    let visible: Vec<usize> = (0..25).collect();
    f.pairs = visible.iter().map(|&i| (i, i)).collect();
    let n = f.graph.node_count();
    let partition = classify_nodes(&f.binding, &visible, n).unwrap();
    assert!(!partition.irrelevant.is_empty());
    let (state, rep) = solve_decoupled(
        &f.problem(),
        &partition,
        DeformState::identity(n),
        &SolveOptions::default(),
    )
    .unwrap();
    assert!(rep.energy.rot < 1e-12, "{:?}", rep.energy);
    assert!(rep.energy.reg < 1e-12, "{:?}", rep.energy);
    assert!(rep.energy.data < 1e-12, "{:?}", rep.energy);
    for (p, v) in apply(&f, &state).iter().zip(&f.vertices) {
        assert!((p - (r * v + t)).norm() < 1e-6);
    }
}

#[test]
fn level_one_dimension_ignores_graph_growth() {
    let mut dims = Vec::new();
    for nx in [10, 20, 40] {
        let mut f = grid(nx, 4);
        let visible: Vec<usize> = (0..16).collect();
        f.pairs = visible.iter().map(|&i| (i, i)).collect();
        let n = f.graph.node_count();
        let partition = classify_nodes(&f.binding, &visible, n).unwrap();
        let (_, rep) = solve_decoupled(
            &f.problem(),
            &partition,
            DeformState::identity(n),
            &SolveOptions::default(),
        )
        .unwrap();
        assert_eq!(
            rep.level1_dim,
            GLOBAL_DIM + NODE_DIM * partition.relevant.len()
        );
        assert_eq!(rep.full_dim, GLOBAL_DIM + NODE_DIM * n);
        dims.push(rep.level1_dim);
    }
    assert!(dims.windows(2).all(|w| w[0] == w[1]), "{dims:?}");
}

#[test]
fn data_rows_never_touch_irrelevant_columns() {
    let (f, s0) = instance_fixture(11, 10, 40);
    let visible: Vec<usize> = (0..8).collect();
    let mut f = f;
    f.pairs = visible.iter().map(|&i| (i, i)).collect();
    let partition = classify_nodes(&f.binding, &visible, 10).unwrap();
    let mut problem = f.problem();
    problem.weights = EnergyWeights::new(0.0, 0.0, 1.0).unwrap();
    let lin = FullProblem::permuted(&problem, &partition.permutation).linearize(&s0);
    let dim_c = GLOBAL_DIM + NODE_DIM * partition.relevant.len();
    let h = BlockHessian::assemble(&lin.jacobian, &lin.residuals, dim_c);
    assert_eq!(h.lambda_ff.nnz(), 0);
    assert_eq!(h.lambda_cf.nnz(), 0);
    assert!((h.to_dense() - lin.jacobian.normal_dense()).amax() <= 1e-12);
}

#[test]
fn pcg_path_agrees_with_dense_path() {
    let (f, s0) = instance_fixture(12, 20, 80);
    let problem = f.problem();
    let dense = SolveOptions {
        max_outer_iterations: 5,
        ..dense_opts()
    };
    let iterative = SolveOptions {
        linear_solver: LinearSolverKind::Pcg,
        pcg_tolerance: 1e-12,
        ..dense
    };
    let (a, _) = solve_batch(&problem, s0.clone(), &dense).unwrap();
    let (b, rb) = solve_batch(&problem, s0, &iterative).unwrap();
    assert!(rb.pcg_iterations > 0);
    let pa = apply(&f, &a);
    let pb = apply(&f, &b);
    let diff = pa
        .iter()
        .zip(&pb)
        .map(|(p, q)| (p - q).norm())
        .fold(0.0, f64::max);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn options_validation() {
    assert!(SolveOptions::default().validate().is_ok());
    let bad = [
        SolveOptions {
            gradient_tolerance: 0.0,
            ..SolveOptions::default()
        },
        SolveOptions {
            max_outer_iterations: 0,
            ..SolveOptions::default()
        },
        SolveOptions {
            damping_up: 0.5,
            ..SolveOptions::default()
        },
        SolveOptions {
            damping_down: 1.5,
            ..SolveOptions::default()
        },
        SolveOptions {
            pcg_tolerance: f64::NAN,
            ..SolveOptions::default()
        },
    ];
    for o in bad {
        assert!(o.validate().is_err(), "{o:?}");
    }
    assert_eq!(
        "decoupled".parse::<Strategy>().unwrap(),
        Strategy::Decoupled
    );
    assert!("schur".parse::<Strategy>().is_err());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (f, _) = instance_fixture(13, 6, 20);
    let problem = f.problem();
    assert!(solve_batch(&problem, DeformState::identity(5), &SolveOptions::default()).is_err());
    let wrong = Partition::all_relevant(4);
    assert!(solve_decoupled(
        &problem,
        &wrong,
        DeformState::identity(6),
        &SolveOptions::default()
    )
    .is_err());
}
