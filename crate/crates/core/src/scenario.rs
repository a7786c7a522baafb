//! Synthetic deformable-mapping sequences: a flat grid surface warped by
//! moving Gaussian bumps, observed frame by frame by a downward-looking
//! camera with a limited field of view, plus the tracking loop that
//! registers the growing model to each scan.

use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::energy::{blend, EnergyWeights, Pair};
use crate::error::{Error, Result};
use crate::graph::{
    bind_vertices, build_node_edges, classify_nodes, extend_graph, sample_nodes, BindingTable,
    EdGraph, DEFAULT_EDGE_K,
};
use crate::mesh::{bbox_diagonal, Mesh, PointSet};
use crate::solver::{solve, EdProblem, SolveOptions, Strategy};
use crate::spatial::PointGrid;
use crate::state::{DeformState, StateView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceConfig {
    /// Vertices along x.
    pub nx: usize,
    /// Vertices along y.
    pub ny: usize,
    pub spacing: f64,
}

/// Camera looking straight down, moving linearly from `start` to `end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub start: [f64; 3],
    pub end: [f64; 3],
    /// Half-angles of the field of view around the camera x and y axes.
    pub half_fov_deg: [f64; 2],
}

/// Displacement `a · exp(-|p - c|² / (2 w²)) · dir` with `c` measured in the
/// xy plane and moving linearly over the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpConfig {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub amplitude: f64,
    /// Amplitude at the last frame; defaults to `amplitude`.
    #[serde(default)]
    pub amplitude_end: Option<f64>,
    pub width: f64,
    #[serde(default = "up")]
    pub direction: [f64; 3],
}

fn up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub rot: f64,
    pub reg: f64,
    pub data: f64,
    pub alpha: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        let w = EnergyWeights::default();
        Self {
            rot: w.rot,
            reg: w.reg,
            data: w.data,
            alpha: 1.0,
        }
    }
}

impl EnergyConfig {
    pub fn weights(&self) -> Result<EnergyWeights> {
        EnergyWeights::new(self.rot, self.reg, self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub frames: usize,
    pub surface: SurfaceConfig,
    pub camera: CameraConfig,
    #[serde(default)]
    pub bumps: Vec<BumpConfig>,
    /// Scan noise per coordinate; defaults to a tenth of the grid spacing.
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    /// Node sampling radius; defaults to twice the grid spacing.
    #[serde(default)]
    pub node_radius: Option<f64>,
    /// Correspondence cut-off; defaults to twice the grid spacing.
    #[serde(default)]
    pub max_dist: Option<f64>,
    /// Correspondence/solve rounds per frame.
    #[serde(default = "default_icp")]
    pub icp_iterations: usize,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default)]
    pub solver: SolveOptions,
}

fn default_icp() -> usize {
    3
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
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

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma.unwrap_or(0.1 * self.surface.spacing)
    }

    pub fn node_radius(&self) -> f64 {
        self.node_radius.unwrap_or(2.0 * self.surface.spacing)
    }

    pub fn max_dist(&self) -> f64 {
        self.max_dist.unwrap_or(2.0 * self.surface.spacing)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.surface;
        if s.nx < 2 || s.ny < 2 {
            return Err(Error::Config(format!(
                "surface needs at least 2x2 vertices, got {}x{}",
                s.nx, s.ny
            )));
        }
        if !(s.spacing > 0.0 && s.spacing.is_finite()) {
            return Err(Error::Config(format!(
                "spacing must be positive, got {}",
                s.spacing
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("frame count must be at least 1".into()));
        }
        for h in self.camera.half_fov_deg {
            if !(h > 0.0 && h < 90.0) {
                return Err(Error::Config(format!(
                    "field-of-view half-angle must lie in (0, 90) degrees, got {h}"
                )));
            }
        }
        if self
            .camera
            .start
            .iter()
            .chain(&self.camera.end)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("camera path must be finite".into()));
        }
        for b in &self.bumps {
            if !(b.width > 0.0 && b.width.is_finite()) {
                return Err(Error::Config(format!(
                    "bump width must be positive, got {}",
                    b.width
                )));
            }
            let amps = [b.amplitude, b.amplitude_end.unwrap_or(b.amplitude)];
            if amps.iter().any(|a| !a.is_finite()) {
                return Err(Error::Config("bump amplitude must be finite".into()));
            }
            if Vector3::from(b.direction).norm() == 0.0 {
                return Err(Error::Config("bump direction must be non-zero".into()));
            }
        }
        let positive = [
            ("noise_sigma", self.noise_sigma()),
            ("node_radius", self.node_radius()),
            ("max_dist", self.max_dist()),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v >= 0.0) || (name != "noise_sigma" && v == 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.icp_iterations == 0 {
            return Err(Error::Config("icp_iterations must be at least 1".into()));
        }
        if !(self.energy.alpha > 0.0 && self.energy.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.energy.alpha
            )));
        }
        self.energy.weights()?;
        self.solver.validate()
    }
}

/// Downward-looking pinhole frustum. Camera axes in world coordinates are
/// `x_c = x`, `y_c = -y`, `z_c = -z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Point3<f64>,
    /// Camera-to-world rotation.
    pub rotation: Matrix3<f64>,
}

impl CameraPose {
    pub fn looking_down(position: Point3<f64>) -> Self {
        Self {
            position,
            rotation: Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
        }
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.position)
    }

    /// Inside the frustum: in front of the camera and within both half-angles.
    pub fn sees(&self, p: &Point3<f64>, tan_half: [f64; 2]) -> bool {
        let c = self.to_camera(p);
        c.z > 0.0 && c.x.abs() <= tan_half[0] * c.z && c.y.abs() <= tan_half[1] * c.z
    }
}

/// Ground-truth displacement field.
#[derive(Debug, Clone, PartialEq)]
pub struct Warp {
    bumps: Vec<BumpConfig>,
}

impl Warp {
    pub fn new(bumps: &[BumpConfig]) -> Self {
        Self {
            bumps: bumps.to_vec(),
        }
    }

    /// Displacement of rest point `p` at sequence time `t ∈ [0, 1]`.
    pub fn displacement(&self, p: &Point3<f64>, t: f64) -> Vector3<f64> {
        let mut d = Vector3::zeros();
        for b in &self.bumps {
            let cx = b.start[0] + t * (b.end[0] - b.start[0]);
            let cy = b.start[1] + t * (b.end[1] - b.start[1]);
            let a0 = b.amplitude;
            let a = a0 + t * (b.amplitude_end.unwrap_or(a0) - a0);
            let r2 = (p.x - cx).powi(2) + (p.y - cy).powi(2);
            let dir = Vector3::from(b.direction).normalize();
            d += a * (-r2 / (2.0 * b.width * b.width)).exp() * dir;
        }
        d
    }

    pub fn apply(&self, p: &Point3<f64>, t: f64) -> Point3<f64> {
        p + self.displacement(p, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// Sequence time in `[0, 1]`.
    pub time: f64,
    pub camera: CameraPose,
    /// Surface vertices inside the frustum, ascending.
    pub visible: Vec<usize>,
    /// Visible vertices never seen in an earlier frame, ascending.
    pub revealed: Vec<usize>,
    /// Warped, noisy positions of `visible` (same order), world frame.
    pub scan: PointSet,
}

/// A generated sequence with its ground truth.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// Rest positions of the full surface, x-major.
    pub surface: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub warp: Warp,
    pub frames: Vec<Frame>,
}

impl Scenario {
    pub fn truth(&self, vertex: usize, frame: &Frame) -> Point3<f64> {
        self.warp.apply(&self.surface[vertex], frame.time)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        bbox_diagonal(&self.surface)
    }
}

/// Rest grid in x-major order and its triangulation.
pub fn surface_grid(surface: &SurfaceConfig) -> (Vec<Point3<f64>>, Vec<[usize; 3]>) {
    let (nx, ny, s) = (surface.nx, surface.ny, surface.spacing);
    let mut vertices = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            vertices.push(Point3::new(i as f64 * s, j as f64 * s, 0.0));
        }
    }
    let mut faces = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            let a = i * ny + j;
            let b = (i + 1) * ny + j;
            faces.push([a, b, b + 1]);
            faces.push([a, b + 1, a + 1]);
        }
    }
    (vertices, faces)
}

fn frame_time(index: usize, frames: usize) -> f64 {
    if frames > 1 {
        index as f64 / (frames - 1) as f64
    } else {
        0.0
    }
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let (surface, faces) = surface_grid(&config.surface);
    let warp = Warp::new(&config.bumps);
    let tan_half = config.camera.half_fov_deg.map(|d| d.to_radians().tan());
    let noise = Normal::new(0.0, config.noise_sigma()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = vec![false; surface.len()];
    let mut frames = Vec::with_capacity(config.frames);
    let (c0, c1) = (
        Point3::from(config.camera.start),
        Point3::from(config.camera.end),
    );
    for index in 0..config.frames {
        let time = frame_time(index, config.frames);
        let camera = CameraPose::looking_down(c0 + (c1 - c0) * time);
        let mut visible = Vec::new();
        let mut points = Vec::new();
        for (i, p) in surface.iter().enumerate() {
            let q = warp.apply(p, time);
            if camera.sees(&q, tan_half) {
                visible.push(i);
                points.push(q);
            }
        }
        let revealed: Vec<usize> = visible.iter().copied().filter(|&i| !seen[i]).collect();
        for &i in &revealed {
            seen[i] = true;
        }
        for q in &mut points {
            *q += Vector3::new(
                noise.sample(&mut rng),
                noise.sample(&mut rng),
                noise.sample(&mut rng),
            );
        }
        frames.push(Frame {
            index,
            time,
            camera,
            visible,
            revealed,
            scan: PointSet::new(points),
        });
    }
    Ok(Scenario {
        config: config.clone(),
        surface,
        faces,
        warp,
        frames,
    })
}

/// Pairs each model point with its nearest scan point within `max_dist`
/// (inclusive; lower scan index on ties). Returns `(model index, scan index)`.
pub fn make_correspondences(model: &[Point3<f64>], scan: &PointSet, max_dist: f64) -> Vec<Pair> {
    if model.is_empty() || scan.is_empty() {
        return Vec::new();
    }
    let grid = PointGrid::from_points(&scan.points, max_dist.max(f64::MIN_POSITIVE));
    model
        .iter()
        .enumerate()
        .filter_map(|(i, p)| grid.nearest_within(p, max_dist).map(|(j, _)| (i, j)))
        .collect()
}

/// Root-mean-square and maximum distance between matching points.
pub fn evaluate(estimate: &[Point3<f64>], truth: &[Point3<f64>]) -> (f64, f64) {
    assert_eq!(estimate.len(), truth.len());
    if estimate.is_empty() {
        return (0.0, 0.0);
    }
    let mut sum = 0.0;
    let mut max = 0.0_f64;
    for (a, b) in estimate.iter().zip(truth) {
        let d2 = (a - b).norm_squared();
        sum += d2;
        max = max.max(d2.sqrt());
    }
    ((sum / estimate.len() as f64).sqrt(), max)
}

/// Deformed positions of the listed vertices only.
pub fn deform_subset<S: StateView + ?Sized>(
    state: &S,
    graph: &EdGraph,
    binding: &BindingTable,
    vertices: &[Point3<f64>],
    ids: &[usize],
) -> Vec<Point3<f64>> {
    let pose = state.global();
    ids.iter()
        .map(|&i| pose.rotation * blend(state, graph, binding, i, &vertices[i]) + pose.translation)
        .collect()
}

/// One CSV row per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub model_vertices: usize,
    pub visible_vertices: usize,
    pub total_nodes: usize,
    pub pr_nodes: usize,
    pub pi_nodes: usize,
    pub pairs: usize,
    /// Deformed visible model against the true warped surface.
    pub rmse: f64,
    pub max_error: f64,
    /// Mean distance of the final correspondence pairs.
    pub residual: f64,
    pub level1_dim: usize,
    pub iterations: usize,
    pub converged: bool,
    pub failed: bool,
    pub energy_total: f64,
    pub energy_rot: f64,
    pub energy_reg: f64,
    pub energy_data: f64,
    pub assembly_ms: f64,
    pub linear_ms: f64,
    pub level1_ms: f64,
    pub level2_ms: f64,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub frames: usize,
    /// Mean of the per-frame RMSE values.
    pub mean_rmse: f64,
    pub max_rmse: f64,
    pub final_rmse: f64,
    pub mean_residual: f64,
    pub bbox_diagonal: f64,
    pub total_solve_ms: f64,
    pub failed_frames: usize,
    pub final_nodes: usize,
}

impl RunSummary {
    pub fn from_frames(strategy: Strategy, rows: &[FrameMetrics], bbox_diagonal: f64) -> Self {
        let n = rows.len().max(1) as f64;
        Self {
            strategy,
            frames: rows.len(),
            mean_rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / n,
            max_rmse: rows.iter().map(|r| r.rmse).fold(0.0, f64::max),
            final_rmse: rows.last().map_or(0.0, |r| r.rmse),
            mean_residual: rows.iter().map(|r| r.residual).sum::<f64>() / n,
            bbox_diagonal,
            total_solve_ms: rows.iter().map(|r| r.solve_ms).sum(),
            failed_frames: rows.iter().filter(|r| r.failed).count(),
            final_nodes: rows.last().map_or(0, |r| r.total_nodes),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub frames: Vec<FrameMetrics>,
    pub summary: RunSummary,
}

/// Final state of a tracking run.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub metrics: RunMetrics,
    pub graph: EdGraph,
    pub binding: BindingTable,
    pub state: DeformState,
    /// Surface index of each model vertex.
    pub model_to_surface: Vec<usize>,
    /// Rest positions of the model vertices.
    pub model: Vec<Point3<f64>>,
}

impl SimRun {
    /// The deformed model with the surface triangles whose corners were all seen.
    pub fn deformed_mesh(&self, scenario: &Scenario) -> Result<Mesh> {
        let ids: Vec<usize> = (0..self.model.len()).collect();
        let vertices = deform_subset(&self.state, &self.graph, &self.binding, &self.model, &ids);
        let mut to_model = vec![usize::MAX; scenario.surface.len()];
        for (m, &s) in self.model_to_surface.iter().enumerate() {
            to_model[s] = m;
        }
        let faces = scenario
            .faces
            .iter()
            .filter_map(|f| {
                let m = f.map(|s| to_model[s]);
                m.iter().all(|&i| i != usize::MAX).then_some(m)
            })
            .collect();
        Mesh::new(vertices, faces)
    }
}

/// Registers the growing model to every frame with `strategy`: reveal new
/// geometry, grow the graph, classify nodes, then alternate nearest-neighbour
/// correspondences and solves. A failed solve flags its row and keeps the
/// previous state.
pub fn run_sim(scenario: &Scenario, strategy: Strategy) -> Result<SimRun> {
    let cfg = &scenario.config;
    let weights = cfg.energy.weights()?;
    let radius = cfg.node_radius();
    let mut model: Vec<Point3<f64>> = Vec::new();
    let mut model_to_surface: Vec<usize> = Vec::new();
    let mut surface_to_model = vec![usize::MAX; scenario.surface.len()];
    let mut graph: Option<EdGraph> = None;
    let mut binding = BindingTable::default();
    let mut state = DeformState::identity(0);
    let mut rows = Vec::with_capacity(scenario.frames.len());

    for frame in &scenario.frames {
        let fresh: Vec<Point3<f64>> = frame
            .revealed
            .iter()
            .map(|&s| scenario.surface[s])
            .collect();
        for &s in &frame.revealed {
            surface_to_model[s] = model.len();
            model_to_surface.push(s);
            model.push(scenario.surface[s]);
        }
        graph = Some(match graph.take() {
            Some(g) => {
                let (g, b) = extend_graph(&g, &binding, &fresh)?;
                binding = b;
                g
            }
            None if model.is_empty() => {
                rows.push(empty_row(frame.index));
                continue;
            }
            None => {
                let g = build_node_edges(sample_nodes(&model, radius)?, DEFAULT_EDGE_K)?;
                binding = bind_vertices(&model, &g)?;
                g
            }
        });
        let g = graph.as_ref().expect("set above");
        state.extend_for(g);
        let visible: Vec<usize> = frame.visible.iter().map(|&s| surface_to_model[s]).collect();
        let partition = classify_nodes(&binding, &visible, g.node_count())?;

        let mut row = empty_row(frame.index);
        let mut pairs: Vec<Pair> = Vec::new();
        for _ in 0..cfg.icp_iterations {
            let deformed = deform_subset(&state, g, &binding, &model, &visible);
            pairs = make_correspondences(&deformed, &frame.scan, cfg.max_dist())
                .into_iter()
                .map(|(i, j)| (visible[i], j))
                .collect();
            let problem = EdProblem {
                graph: g,
                binding: &binding,
                vertices: &model,
                targets: &frame.scan,
                pairs: &pairs,
                weights,
                alpha: cfg.energy.alpha,
            };
            let t = Instant::now();
            let solved = solve(strategy, &problem, &partition, state.clone(), &cfg.solver);
            row.solve_ms += t.elapsed().as_secs_f64() * 1e3;
            match solved {
                Ok((next, rep)) => {
                    state = next;
                    row.iterations += rep.iterations;
                    row.converged = rep.converged;
                    row.level1_dim = rep.level1_dim;
                    row.energy_total = rep.energy.total;
                    row.energy_rot = rep.energy.rot;
                    row.energy_reg = rep.energy.reg;
                    row.energy_data = rep.energy.data;
                    row.assembly_ms += rep.timings.assembly_ms;
                    row.linear_ms += rep.timings.linear_ms;
                    row.level1_ms += rep.timings.level1_ms;
                    row.level2_ms += rep.timings.level2_ms;
                }
                Err(_) => {
                    row.failed = true;
                    break;
                }
            }
        }
        let deformed = deform_subset(&state, g, &binding, &model, &visible);
        let truth: Vec<Point3<f64>> = frame
            .visible
            .iter()
            .map(|&s| scenario.truth(s, frame))
            .collect();
        (row.rmse, row.max_error) = evaluate(&deformed, &truth);
        let pos: std::collections::HashMap<usize, usize> =
            visible.iter().enumerate().map(|(k, &m)| (m, k)).collect();
        row.pairs = pairs.len();
        row.residual = if pairs.is_empty() {
            0.0
        } else {
            pairs
                .iter()
                .map(|&(m, j)| (deformed[pos[&m]] - frame.scan.points[j]).norm())
                .sum::<f64>()
                / pairs.len() as f64
        };
        row.model_vertices = model.len();
        row.visible_vertices = visible.len();
        row.total_nodes = g.node_count();
        row.pr_nodes = partition.relevant.len();
        row.pi_nodes = partition.irrelevant.len();
        rows.push(row);
    }

    let summary = RunSummary::from_frames(strategy, &rows, scenario.bbox_diagonal());
    Ok(SimRun {
        metrics: RunMetrics {
            frames: rows,
            summary,
        },
        graph: graph.unwrap_or(EdGraph {
            nodes: Vec::new(),
            edges: Vec::new(),
            sampling_radius: radius,
            edge_k: DEFAULT_EDGE_K,
        }),
        binding,
        state,
        model_to_surface,
        model,
    })
}

fn empty_row(frame: usize) -> FrameMetrics {
    FrameMetrics {
        frame,
        model_vertices: 0,
        visible_vertices: 0,
        total_nodes: 0,
        pr_nodes: 0,
        pi_nodes: 0,
        pairs: 0,
        rmse: 0.0,
        max_error: 0.0,
        residual: 0.0,
        level1_dim: 0,
        iterations: 0,
        converged: true,
        failed: false,
        energy_total: 0.0,
        energy_rot: 0.0,
        energy_reg: 0.0,
        energy_data: 0.0,
        assembly_ms: 0.0,
        linear_ms: 0.0,
        level1_ms: 0.0,
        level2_ms: 0.0,
        solve_ms: 0.0,
    }
}
