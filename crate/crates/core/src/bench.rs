//! Solver timing as the graph grows around a fixed observed patch.
//!
//! Each size point is a strip `scale` times the base length. The camera sees
//! the same leading patch at every size, so the relevant node set and the
//! data term are identical while the number of irrelevant nodes grows.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::energy::Pair;
use crate::error::{Error, Result};
use crate::graph::{
    bind_vertices, build_node_edges, classify_nodes, sample_nodes, BindingTable, EdGraph,
    Partition, DEFAULT_EDGE_K,
};
use crate::mesh::PointSet;
use crate::scenario::{surface_grid, BumpConfig, EnergyConfig, SurfaceConfig, Warp};
use crate::solver::{solve, EdProblem, SolveOptions, SolveReport, Strategy};
use crate::state::DeformState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    /// Strip at scale 1; `nx` grows with the scale.
    pub surface: SurfaceConfig,
    /// Leading columns of the strip that are observed.
    pub visible_columns: usize,
    #[serde(default = "default_scales")]
    pub scales: Vec<usize>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub bumps: Vec<BumpConfig>,
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    #[serde(default)]
    pub node_radius: Option<f64>,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default)]
    pub solver: SolveOptions,
}

fn default_scales() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

fn default_reps() -> usize {
    5
}

impl BenchConfig {
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

    pub fn validate(&self) -> Result<()> {
        let s = &self.surface;
        if s.nx < 2 || s.ny < 2 || !(s.spacing > 0.0 && s.spacing.is_finite()) {
            return Err(Error::Config(
                "surface needs at least 2x2 vertices and a positive spacing".into(),
            ));
        }
        if self.visible_columns == 0 || self.visible_columns > s.nx {
            return Err(Error::Config(format!(
                "visible_columns must lie in 1..={}, got {}",
                s.nx, self.visible_columns
            )));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config(
                "scales must be a non-empty list of positive integers".into(),
            ));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if !(self.noise_sigma() >= 0.0 && self.noise_sigma().is_finite()) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if !(self.node_radius() > 0.0 && self.node_radius().is_finite()) {
            return Err(Error::Config("node_radius must be positive".into()));
        }
        for b in &self.bumps {
            if !(b.width > 0.0) {
                return Err(Error::Config(format!(
                    "bump width must be positive, got {}",
                    b.width
                )));
            }
        }
        self.energy.weights()?;
        self.solver.validate()
    }
}

/// One size point of the benchmark.
#[derive(Debug, Clone)]
pub struct GrowthProblem {
    pub scale: usize,
    pub graph: EdGraph,
    pub binding: BindingTable,
    pub vertices: Vec<Point3<f64>>,
    pub targets: PointSet,
    pub pairs: Vec<Pair>,
    pub visible: Vec<usize>,
    pub partition: Partition,
}

impl GrowthProblem {
    pub fn problem(&self, energy: &EnergyConfig) -> Result<EdProblem<'_>> {
        Ok(EdProblem {
            graph: &self.graph,
            binding: &self.binding,
            vertices: &self.vertices,
            targets: &self.targets,
            pairs: &self.pairs,
            weights: energy.weights()?,
            alpha: energy.alpha,
        })
    }
}

/// Builds the strip at `scale`. Targets are the warped, noisy visible
/// vertices paired with their sources; the noise does not depend on the scale.
pub fn build_growth_problem(cfg: &BenchConfig, scale: usize) -> Result<GrowthProblem> {
    let surface = SurfaceConfig {
        nx: cfg.surface.nx * scale,
        ..cfg.surface.clone()
    };
    let (vertices, _) = surface_grid(&surface);
    let graph = build_node_edges(sample_nodes(&vertices, cfg.node_radius())?, DEFAULT_EDGE_K)?;
    let binding = bind_vertices(&vertices, &graph)?;
    let visible: Vec<usize> = (0..cfg.visible_columns * surface.ny).collect();
    let warp = Warp::new(&cfg.bumps);
    let noise = Normal::new(0.0, cfg.noise_sigma()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let targets = PointSet::new(
        visible
            .iter()
            .map(|&i| {
                let n = Vector3::new(
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                );
                warp.apply(&vertices[i], 1.0) + n
            })
            .collect(),
    );
    let pairs = visible.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let partition = classify_nodes(&binding, &visible, graph.node_count())?;
    Ok(GrowthProblem {
        scale,
        graph,
        binding,
        vertices,
        targets,
        pairs,
        visible,
        partition,
    })
}

/// Median timings of one solver at one size point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scale: usize,
    pub total_nodes: usize,
    pub pr_nodes: usize,
    pub solver: Strategy,
    pub assembly_ms: f64,
    pub linear_ms: f64,
    pub level1_ms: f64,
    pub level2_ms: f64,
    pub total_ms: f64,
    pub iterations: usize,
    pub level1_dim: usize,
    pub energy_total: f64,
    pub converged: bool,
    pub repetitions: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn summarize(scale: &GrowthProblem, strategy: Strategy, reports: &[SolveReport]) -> BenchRow {
    let pick = |f: fn(&SolveReport) -> f64| median(&mut reports.iter().map(f).collect::<Vec<_>>());
    let last = reports.last().expect("at least one repetition");
    BenchRow {
        scale: scale.scale,
        total_nodes: scale.graph.node_count(),
        pr_nodes: scale.partition.relevant.len(),
        solver: strategy,
        assembly_ms: pick(|r| r.timings.assembly_ms),
        linear_ms: pick(|r| r.timings.linear_ms),
        level1_ms: pick(|r| r.timings.level1_ms),
        level2_ms: pick(|r| r.timings.level2_ms),
        total_ms: pick(|r| r.timings.total_ms),
        iterations: last.iterations,
        level1_dim: last.level1_dim,
        energy_total: last.energy.total,
        converged: last.converged,
        repetitions: reports.len(),
    }
}

/// Runs every solver at every scale. Repetitions are interleaved across
/// scales and solvers so slow drifts in machine load hit all points alike,
/// and one discarded warm-up solve precedes the measurements.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let problems: Vec<GrowthProblem> = cfg
        .scales
        .iter()
        .map(|&s| build_growth_problem(cfg, s))
        .collect::<Result<_>>()?;
    let mut reports: Vec<Vec<Vec<SolveReport>>> =
        vec![vec![Vec::new(); Strategy::ALL.len()]; problems.len()];
    {
        let gp = &problems[0];
        let problem = gp.problem(&cfg.energy)?;
        for strategy in Strategy::ALL {
            solve(
                strategy,
                &problem,
                &gp.partition,
                DeformState::identity(gp.graph.node_count()),
                &cfg.solver,
            )?;
        }
    }
    for _ in 0..cfg.repetitions {
        for (p, gp) in problems.iter().enumerate() {
            let problem = gp.problem(&cfg.energy)?;
            for (s, strategy) in Strategy::ALL.into_iter().enumerate() {
                let state0 = DeformState::identity(gp.graph.node_count());
                let (_, rep) = solve(strategy, &problem, &gp.partition, state0, &cfg.solver)?;
                reports[p][s].push(rep);
            }
        }
    }
    let mut rows = Vec::new();
    for (p, gp) in problems.iter().enumerate() {
        for (s, strategy) in Strategy::ALL.into_iter().enumerate() {
            rows.push(summarize(gp, strategy, &reports[p][s]));
        }
    }
    Ok(rows)
}

/// Growth of median times from the smallest to the largest scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthRatios {
    pub node_ratio: f64,
    pub batch_total: f64,
    pub marginalized_total: f64,
    pub decoupled_total: f64,
    pub decoupled_level1: f64,
}

pub fn growth_ratios(rows: &[BenchRow]) -> Option<GrowthRatios> {
    let min_scale = rows.iter().map(|r| r.scale).min()?;
    let max_scale = rows.iter().map(|r| r.scale).max()?;
    let get = |scale: usize, solver: Strategy| {
        rows.iter().find(|r| r.scale == scale && r.solver == solver)
    };
    let ratio = |solver: Strategy, f: fn(&BenchRow) -> f64| -> Option<f64> {
        Some(f(get(max_scale, solver)?) / f(get(min_scale, solver)?))
    };
    Some(GrowthRatios {
        node_ratio: get(max_scale, Strategy::Batch)?.total_nodes as f64
            / get(min_scale, Strategy::Batch)?.total_nodes as f64,
        batch_total: ratio(Strategy::Batch, |r| r.total_ms)?,
        marginalized_total: ratio(Strategy::Marginalized, |r| r.total_ms)?,
        decoupled_total: ratio(Strategy::Decoupled, |r| r.total_ms)?,
        decoupled_level1: ratio(Strategy::Decoupled, |r| r.level1_ms)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchConfig {
        BenchConfig::from_toml_str(
            r#"
            seed = 2
            visible_columns = 4
            scales = [1, 2]
            repetitions = 2
            [surface]
            nx = 8
            ny = 4
            spacing = 1.0
            [[bumps]]
            start = [1.5, 1.5]
            end = [1.5, 1.5]
            amplitude = 0.3
            width = 2.0
            "#,
        )
        .unwrap()
    }

    #[test]
    fn relevant_set_is_fixed_across_scales() {
        let cfg = tiny();
        let a = build_growth_problem(&cfg, 1).unwrap();
        let b = build_growth_problem(&cfg, 4).unwrap();
        assert!(b.graph.node_count() > 2 * a.graph.node_count());
        assert_eq!(a.partition.relevant, b.partition.relevant);
        assert_eq!(a.targets, b.targets);
        assert_eq!(
            &b.graph.nodes[..a.partition.relevant.len()],
            &a.graph.nodes[..a.partition.relevant.len()]
        );
    }

    #[test]
    fn rows_cover_every_solver_and_scale() {
        let rows = run_bench(&tiny()).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert!(r.total_ms > 0.0);
            assert!(r.assembly_ms >= 0.0 && r.linear_ms >= 0.0);
            assert_eq!(r.repetitions, 2);
        }
        let small: Vec<&BenchRow> = rows.iter().filter(|r| r.scale == 1).collect();
        let e0 = small[0].energy_total;
        for r in &small {
            assert!((r.energy_total - e0).abs() <= 0.05 * e0.max(1e-9), "{r:?}");
        }
        let ratios = growth_ratios(&rows).unwrap();
        assert!(ratios.node_ratio > 1.5);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn invalid_bench_configs() {
        let mut c = tiny();
        c.visible_columns = 0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.scales = vec![];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.repetitions = 0;
        assert!(c.validate().is_err());
    }
}
