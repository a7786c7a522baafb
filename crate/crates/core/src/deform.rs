//! Interactive-style mesh deformation driven by handle vertices.

use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyBreakdown, Pair};
use crate::error::{Error, Result};
use crate::graph::{
    bind_vertices, build_node_edges, classify_nodes, sample_nodes, BindingTable, EdGraph,
    DEFAULT_EDGE_K,
};
use crate::mesh::{Mesh, PointSet};
use crate::scenario::{deform_subset, evaluate, EnergyConfig};
use crate::solver::{solve, EdProblem, PhaseTimings, SolveOptions, Strategy};
use crate::state::DeformState;

/// A vertex and the position it should move to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Handle {
    pub vertex: usize,
    pub target: Point3<f64>,
}

/// Parses `vertex_id tx ty tz` lines. Blank lines and `#` comments are skipped.
pub fn parse_handles(text: &str) -> Result<Vec<Handle>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(format!(
                "expected `vertex_id tx ty tz`, got {} fields",
                fields.len()
            )));
        }
        let vertex = fields[0]
            .parse::<usize>()
            .map_err(|e| err(format!("bad vertex id {:?}: {e}", fields[0])))?;
        let mut c = [0.0; 3];
        for (slot, f) in c.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .map_err(|e| err(format!("bad coordinate {f:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite coordinate {f:?}")));
            }
        }
        out.push(Handle {
            vertex,
            target: Point3::from(c),
        });
    }
    Ok(out)
}

pub fn load_handles(path: impl AsRef<Path>) -> Result<Vec<Handle>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_handles(&text)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformConfig {
    /// Node sampling radius; defaults to twice the mean edge length.
    pub node_radius: Option<f64>,
    pub energy: EnergyConfig,
    pub solver: SolveOptions,
}

impl DeformConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.energy.weights()?;
        cfg.solver.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}

/// Mean length of the triangle edges (each undirected edge once), or the
/// bounding-box diagonal over 20 when the mesh has no faces.
pub fn mean_edge_length(mesh: &Mesh) -> f64 {
    let mut edges: Vec<(usize, usize)> = mesh
        .faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    if edges.is_empty() {
        return mesh.bbox_diagonal() / 20.0;
    }
    edges
        .iter()
        .map(|&(a, b)| (mesh.vertices[a] - mesh.vertices[b]).norm())
        .sum::<f64>()
        / edges.len() as f64
}

/// Graph, binding and handle data for one mesh.
#[derive(Debug, Clone)]
pub struct DeformSetup {
    pub graph: EdGraph,
    pub binding: BindingTable,
    pub targets: PointSet,
    pub pairs: Vec<Pair>,
    pub handle_vertices: Vec<usize>,
}

pub fn prepare(mesh: &Mesh, handles: &[Handle], cfg: &DeformConfig) -> Result<DeformSetup> {
    if handles.is_empty() {
        return Err(Error::InvalidInput(
            "at least one handle is required".into(),
        ));
    }
    for h in handles {
        if h.vertex >= mesh.vertices.len() {
            return Err(Error::InvalidInput(format!(
                "handle references unknown vertex {} (mesh has {} vertices)",
                h.vertex,
                mesh.vertices.len()
            )));
        }
    }
    let radius = cfg
        .node_radius
        .unwrap_or_else(|| 2.0 * mean_edge_length(mesh));
    let graph = build_node_edges(sample_nodes(&mesh.vertices, radius)?, DEFAULT_EDGE_K)?;
    let binding = bind_vertices(&mesh.vertices, &graph)?;
    let targets = PointSet::new(handles.iter().map(|h| h.target).collect());
    let pairs = handles
        .iter()
        .enumerate()
        .map(|(k, h)| (h.vertex, k))
        .collect();
    let mut handle_vertices: Vec<usize> = handles.iter().map(|h| h.vertex).collect();
    handle_vertices.sort_unstable();
    handle_vertices.dedup();
    Ok(DeformSetup {
        graph,
        binding,
        targets,
        pairs,
        handle_vertices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverComparison {
    pub strategy: Strategy,
    pub max_vertex_difference: f64,
    pub rms_vertex_difference: f64,
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformSummary {
    pub strategy: Strategy,
    pub vertices: usize,
    pub nodes: usize,
    pub handles: usize,
    pub pr_nodes: usize,
    pub node_radius: f64,
    pub initial_energy: EnergyBreakdown,
    pub energy: EnergyBreakdown,
    pub iterations: usize,
    pub converged: bool,
    pub termination: String,
    /// Largest distance from a handle vertex to its target after solving.
    pub max_handle_error: f64,
    pub max_displacement: f64,
    /// Vertex at which `max_displacement` occurs.
    pub max_displacement_vertex: usize,
    pub timings: PhaseTimings,
    pub comparison: Option<SolverComparison>,
}

#[derive(Debug, Clone)]
pub struct DeformResult {
    pub mesh: Mesh,
    pub state: DeformState,
    pub summary: DeformSummary,
}

fn run_one(
    mesh: &Mesh,
    setup: &DeformSetup,
    strategy: Strategy,
    cfg: &DeformConfig,
) -> Result<(Vec<Point3<f64>>, DeformState, crate::solver::SolveReport)> {
    let problem = EdProblem {
        graph: &setup.graph,
        binding: &setup.binding,
        vertices: &mesh.vertices,
        targets: &setup.targets,
        pairs: &setup.pairs,
        weights: cfg.energy.weights()?,
        alpha: cfg.energy.alpha,
    };
    let partition = classify_nodes(
        &setup.binding,
        &setup.handle_vertices,
        setup.graph.node_count(),
    )?;
    let (state, report) = solve(
        strategy,
        &problem,
        &partition,
        DeformState::identity(setup.graph.node_count()),
        &cfg.solver,
    )?;
    let ids: Vec<usize> = (0..mesh.vertices.len()).collect();
    let moved = deform_subset(&state, &setup.graph, &setup.binding, &mesh.vertices, &ids);
    Ok((moved, state, report))
}

/// Deforms `mesh` so the handle vertices reach their targets. With `compare`,
/// the same problem is also solved by a second strategy and the per-vertex
/// difference is reported.
pub fn run_deform(
    mesh: &Mesh,
    handles: &[Handle],
    strategy: Strategy,
    compare: Option<Strategy>,
    cfg: &DeformConfig,
) -> Result<DeformResult> {
    mesh.validate()?;
    let setup = prepare(mesh, handles, cfg)?;
    let (moved, state, report) = run_one(mesh, &setup, strategy, cfg)?;
    let max_handle_error = handles
        .iter()
        .map(|h| (moved[h.vertex] - h.target).norm())
        .fold(0.0, f64::max);
    let (max_displacement_vertex, max_displacement) = moved
        .iter()
        .zip(&mesh.vertices)
        .map(|(a, b)| (a - b).norm())
        .enumerate()
        .fold(
            (0, 0.0),
            |best, (i, d)| if d > best.1 { (i, d) } else { best },
        );
    let comparison = match compare {
        Some(other) => {
            let (alt, _, alt_report) = run_one(mesh, &setup, other, cfg)?;
            let (rms, max) = evaluate(&alt, &moved);
            Some(SolverComparison {
                strategy: other,
                max_vertex_difference: max,
                rms_vertex_difference: rms,
                energy: alt_report.energy,
            })
        }
        None => None,
    };
    let partition = classify_nodes(
        &setup.binding,
        &setup.handle_vertices,
        setup.graph.node_count(),
    )?;
    let summary = DeformSummary {
        strategy,
        vertices: mesh.vertices.len(),
        nodes: setup.graph.node_count(),
        handles: handles.len(),
        pr_nodes: partition.relevant.len(),
        node_radius: setup.graph.sampling_radius,
        initial_energy: report.initial_energy,
        energy: report.energy,
        iterations: report.iterations,
        converged: report.converged,
        termination: format!("{:?}", report.termination),
        max_handle_error,
        max_displacement,
        max_displacement_vertex,
        timings: report.timings,
        comparison,
    };
    let out = Mesh::new(moved, mesh.faces.clone())?;
    Ok(DeformResult {
        mesh: out,
        state,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{surface_grid, SurfaceConfig};
    use nalgebra::Vector3;

    fn flat(n: usize) -> Mesh {
        let (v, f) = surface_grid(&SurfaceConfig {
            nx: n,
            ny: n,
            spacing: 1.0,
        });
        Mesh::new(v, f).unwrap()
    }

    fn border_pins(mesh: &Mesh, n: usize) -> Vec<Handle> {
        (0..mesh.vertices.len())
            .filter(|&i| {
                let (x, y) = (i / n, i % n);
                x == 0 || y == 0 || x == n - 1 || y == n - 1
            })
            .map(|i| Handle {
                vertex: i,
                target: mesh.vertices[i],
            })
            .collect()
    }

    #[test]
    fn parses_handles() {
        let h = parse_handles("# pins\n3 1 2 3\n\n10 -1e-3 0 4.5 # moved\n").unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!(h[1].vertex, 10);
        assert_eq!(h[1].target, Point3::new(-1e-3, 0.0, 4.5));
        assert!(matches!(
            parse_handles("1 2 3"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_handles("\nx 1 2 3"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(parse_handles("1 2 nan 3").is_err());
    }

    #[test]
    fn unknown_vertex_is_rejected() {
        let mesh = flat(5);
        let h = [Handle {
            vertex: 25,
            target: Point3::origin(),
        }];
        let err =
            run_deform(&mesh, &h, Strategy::Batch, None, &DeformConfig::default()).unwrap_err();
        assert!(err.to_string().contains("unknown vertex 25"), "{err}");
    }

    #[test]
    fn pinning_everything_keeps_the_mesh() {
        let mesh = flat(7);
        let h: Vec<Handle> = mesh
            .vertices
            .iter()
            .enumerate()
            .map(|(i, p)| Handle {
                vertex: i,
                target: *p,
            })
            .collect();
        for s in Strategy::ALL {
            let out = run_deform(&mesh, &h, s, None, &DeformConfig::default()).unwrap();
            for (a, b) in out.mesh.vertices.iter().zip(&mesh.vertices) {
                assert!((a - b).norm() <= 1e-6);
            }
            assert_eq!(out.mesh.faces, mesh.faces);
        }
    }

    #[test]
    fn pulled_handle_moves_most() {
        let n = 11;
        let mesh = flat(n);
        let mut h = border_pins(&mesh, n);
        let centre = 5 * n + 5;
        h.push(Handle {
            vertex: centre,
            target: mesh.vertices[centre] + Vector3::new(0.0, 0.0, 2.0),
        });
        let out = run_deform(
            &mesh,
            &h,
            Strategy::Batch,
            Some(Strategy::Decoupled),
            &DeformConfig::default(),
        )
        .unwrap();
        let s = &out.summary;
        assert_eq!(s.max_displacement_vertex, centre);
        // soft constraints: the pins pull back, but the handle still gets most of the way
        assert!(s.max_handle_error < 1.0, "{s:?}");
        // the bump decays away from the handle
        let lift = |i: usize| out.mesh.vertices[i].z;
        assert!(lift(centre) > lift(centre + 2) && lift(centre + 2) > lift(centre + 4));
        let cmp = s.comparison.as_ref().unwrap();
        assert_eq!(cmp.strategy, Strategy::Decoupled);
        assert!(cmp.max_vertex_difference.is_finite());
    }

    #[test]
    fn marginalized_matches_batch_output() {
        let n = 9;
        let mesh = flat(n);
        let mut h = border_pins(&mesh, n);
        h.push(Handle {
            vertex: 4 * n + 4,
            target: Point3::new(4.0, 4.0, 1.0),
        });
        let out = run_deform(
            &mesh,
            &h,
            Strategy::Batch,
            Some(Strategy::Marginalized),
            &DeformConfig::default(),
        )
        .unwrap();
        assert!(out.summary.comparison.unwrap().max_vertex_difference < 1e-6);
    }

    #[test]
    fn config_round_trip() {
        let cfg = DeformConfig {
            node_radius: Some(1.5),
            ..Default::default()
        };
        assert_eq!(DeformConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert!(DeformConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn edge_length_of_unit_grid() {
        assert!((mean_edge_length(&flat(2)) - (4.0 + 2f64.sqrt()) / 5.0).abs() < 1e-12);
    }
}
