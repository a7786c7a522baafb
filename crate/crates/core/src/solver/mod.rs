//! Energy minimisation: batch, exact marginalisation of irrelevant nodes,
//! and the two-level decoupled solve, all driven by one damped Gauss-Newton
//! loop.

mod decoupled;
pub mod linear;
pub mod lm;
pub mod problem;
pub mod schur;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::energy::EnergyBreakdown;
use crate::error::{Error, Result};
use crate::graph::Partition;
use crate::state::{DeformState, GLOBAL_DIM, NODE_DIM};

pub use decoupled::{LevelOne, LevelOnePoint, LevelTwo};
pub use linear::{
    pcg, LinearError, LinearSettings, LinearSolverKind, LinearStats, PcgSolution, Preconditioner,
};
pub use lm::{lm_driver, LeastSquares, Linearization, LmOutcome, StepStrategy, Termination};
pub use problem::{EdProblem, FullProblem};
pub use schur::{BlockHessian, SchurStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub max_outer_iterations: usize,
    /// Stop once `‖Jᵀ r‖∞` falls to this value.
    pub gradient_tolerance: f64,
    /// Stop once a computed step has `‖δ‖∞` at most this value.
    pub step_tolerance: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub min_damping: f64,
    pub max_damping: f64,
    pub linear_solver: LinearSolverKind,
    pub preconditioner: Preconditioner,
    /// Largest system solved densely under [`LinearSolverKind::Auto`].
    pub dense_threshold: usize,
    pub pcg_tolerance: f64,
    pub pcg_max_iterations: usize,
    /// Level I / Level II sweeps per decoupled call.
    pub decoupled_passes: usize,
    /// Keep every accepted step in the report.
    pub record_steps: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_outer_iterations: 50,
            gradient_tolerance: 1e-9,
            step_tolerance: 1e-10,
            cost_tolerance: 1e-10,
            initial_damping: 1e-2,
            damping_up: 10.0,
            damping_down: 0.3,
            min_damping: 1e-3,
            max_damping: 1e10,
            linear_solver: LinearSolverKind::Auto,
            preconditioner: Preconditioner::Jacobi,
            dense_threshold: 200,
            pcg_tolerance: 1e-10,
            pcg_max_iterations: 2000,
            decoupled_passes: 1,
            record_steps: false,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gradient_tolerance", self.gradient_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("pcg_tolerance", self.pcg_tolerance),
            ("max_damping", self.max_damping),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("cost_tolerance", self.cost_tolerance),
            ("initial_damping", self.initial_damping),
            ("min_damping", self.min_damping),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(self.damping_up > 1.0) {
            return Err(Error::Config(format!(
                "damping_up must exceed 1, got {}",
                self.damping_up
            )));
        }
        if !(self.damping_down > 0.0 && self.damping_down < 1.0) {
            return Err(Error::Config(format!(
                "damping_down must lie in (0, 1), got {}",
                self.damping_down
            )));
        }
        if self.max_outer_iterations == 0
            || self.pcg_max_iterations == 0
            || self.decoupled_passes == 0
        {
            return Err(Error::Config("iteration caps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn linear_settings(&self) -> LinearSettings {
        LinearSettings {
            kind: self.linear_solver,
            preconditioner: self.preconditioner,
            dense_threshold: self.dense_threshold,
            pcg_tolerance: self.pcg_tolerance,
            pcg_max_iterations: self.pcg_max_iterations,
        }
    }
}

/// Which solver to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Batch,
    Marginalized,
    Decoupled,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Batch, Strategy::Marginalized, Strategy::Decoupled];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Batch => "batch",
            Strategy::Marginalized => "marginalized",
            Strategy::Decoupled => "decoupled",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown solver '{s}' (expected batch, marginalized or decoupled)"
                ))
            })
    }
}

/// Wall-clock milliseconds per phase. Level timings include the assembly and
/// linear solves done inside them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub assembly_ms: f64,
    pub linear_ms: f64,
    pub level1_ms: f64,
    pub level2_ms: f64,
    pub total_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub strategy: Strategy,
    pub initial_energy: EnergyBreakdown,
    pub energy: EnergyBreakdown,
    /// Outer iterations over all levels.
    pub iterations: usize,
    pub level1_iterations: usize,
    pub level2_iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub timings: PhaseTimings,
    pub full_dim: usize,
    /// Unknowns of the system solved for the kept parameters: everything for
    /// batch, global pose plus relevant nodes otherwise.
    pub level1_dim: usize,
    pub level2_dim: usize,
    pub pcg_iterations: usize,
    pub pcg_unconverged: usize,
    pub linear_failures: usize,
    /// Objective after every accepted step, starting from the initial value
    /// (Level I objective for the decoupled solver).
    pub energy_history: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub steps: Vec<Vec<f64>>,
}

/// Plain normal-equation step over all columns.
#[derive(Debug, Clone)]
pub struct NormalStrategy {
    pub settings: LinearSettings,
}

impl StepStrategy for NormalStrategy {
    fn step(
        &mut self,
        lin: &Linearization,
        mu: f64,
    ) -> std::result::Result<(Vec<f64>, LinearStats), LinearError> {
        let rhs: Vec<f64> = lin.gradient().iter().map(|g| -g).collect();
        linear::solve_normal(&lin.jacobian, mu, &rhs, &self.settings)
    }
}

fn check_partition(problem: &EdProblem<'_>, partition: &Partition) -> Result<()> {
    let n = problem.graph.node_count();
    if partition.node_count() != n || partition.relevant.len() + partition.irrelevant.len() != n {
        return Err(Error::InvalidInput(format!(
            "partition covers {} nodes but the graph has {n}",
            partition.node_count()
        )));
    }
    Ok(())
}

fn report<P>(
    strategy: Strategy,
    problem: &EdProblem<'_>,
    initial: EnergyBreakdown,
    state: &DeformState,
    out: &LmOutcome<P>,
    total: Duration,
    level1_dim: usize,
) -> SolveReport {
    SolveReport {
        strategy,
        initial_energy: initial,
        energy: problem.energy(state),
        iterations: out.iterations,
        level1_iterations: out.iterations,
        level2_iterations: 0,
        converged: out.termination.converged(),
        termination: out.termination,
        timings: PhaseTimings {
            assembly_ms: ms(out.assembly),
            linear_ms: ms(out.linear),
            level1_ms: 0.0,
            level2_ms: 0.0,
            total_ms: ms(total),
        },
        full_dim: state.dim(),
        level1_dim,
        level2_dim: 0,
        pcg_iterations: out.pcg_iterations,
        pcg_unconverged: out.pcg_unconverged,
        linear_failures: out.linear_failures,
        energy_history: out.history.clone(),
        steps: out.steps.clone(),
    }
}

/// Damped Gauss-Newton over every parameter at once.
pub fn solve_batch(
    problem: &EdProblem<'_>,
    state0: DeformState,
    opts: &SolveOptions,
) -> Result<(DeformState, SolveReport)> {
    opts.validate()?;
    problem.validate(&state0)?;
    let initial = problem.energy(&state0);
    let start = Instant::now();
    let full = FullProblem::natural(problem);
    let mut strategy = NormalStrategy {
        settings: opts.linear_settings(),
    };
    let out = lm_driver(&full, state0, opts, &mut strategy);
    let total = start.elapsed();
    let dim = out.point.dim();
    let rep = report(
        Strategy::Batch,
        problem,
        initial,
        &out.point,
        &out,
        total,
        dim,
    );
    Ok((out.point, rep))
}

/// Same iterates as [`solve_batch`]; each step is computed by eliminating the
/// irrelevant-node block and solving the reduced system for the global pose
/// and relevant nodes. Recorded steps use the relevant-first layout.
pub fn solve_marginalized(
    problem: &EdProblem<'_>,
    partition: &Partition,
    state0: DeformState,
    opts: &SolveOptions,
) -> Result<(DeformState, SolveReport)> {
    opts.validate()?;
    problem.validate(&state0)?;
    check_partition(problem, partition)?;
    let initial = problem.energy(&state0);
    let start = Instant::now();
    let full = FullProblem::permuted(problem, &partition.permutation);
    let dim_c = GLOBAL_DIM + NODE_DIM * partition.relevant.len();
    let mut strategy = SchurStrategy {
        dim_c,
        settings: opts.linear_settings(),
    };
    let out = lm_driver(&full, state0, opts, &mut strategy);
    let total = start.elapsed();
    let rep = report(
        Strategy::Marginalized,
        problem,
        initial,
        &out.point,
        &out,
        total,
        dim_c,
    );
    Ok((out.point, rep))
}

fn absorb<P>(rep: &mut SolveReport, out: &LmOutcome<P>) {
    rep.iterations += out.iterations;
    rep.timings.assembly_ms += ms(out.assembly);
    rep.timings.linear_ms += ms(out.linear);
    rep.pcg_iterations += out.pcg_iterations;
    rep.pcg_unconverged += out.pcg_unconverged;
    rep.linear_failures += out.linear_failures;
    if rep.termination == Termination::Empty || (rep.converged && !out.termination.converged()) {
        rep.termination = out.termination;
    }
    rep.converged &= out.termination.converged();
}

/// Level I over the global pose and relevant nodes, then Level II over the
/// irrelevant nodes with the Level I result frozen.
pub fn solve_decoupled(
    problem: &EdProblem<'_>,
    partition: &Partition,
    state0: DeformState,
    opts: &SolveOptions,
) -> Result<(DeformState, SolveReport)> {
    opts.validate()?;
    problem.validate(&state0)?;
    check_partition(problem, partition)?;
    let initial = problem.energy(&state0);
    let start = Instant::now();
    let settings = opts.linear_settings();
    let mut state = state0;
    let mut rep = SolveReport {
        strategy: Strategy::Decoupled,
        initial_energy: initial,
        energy: initial,
        iterations: 0,
        level1_iterations: 0,
        level2_iterations: 0,
        converged: true,
        termination: Termination::Empty,
        timings: PhaseTimings::default(),
        full_dim: state.dim(),
        level1_dim: GLOBAL_DIM + NODE_DIM * partition.relevant.len(),
        level2_dim: NODE_DIM * partition.irrelevant.len(),
        pcg_iterations: 0,
        pcg_unconverged: 0,
        linear_failures: 0,
        energy_history: Vec::new(),
        steps: Vec::new(),
    };
    for pass in 0..opts.decoupled_passes {
        let t = Instant::now();
        let level = LevelOne::new(problem, &state, &partition.relevant);
        let out = lm_driver(
            &level,
            level.start(),
            opts,
            &mut NormalStrategy { settings },
        );
        rep.timings.level1_ms += ms(t.elapsed());
        rep.level1_iterations += out.iterations;
        absorb(&mut rep, &out);
        if pass == 0 {
            rep.energy_history = out.history.clone();
        }
        rep.steps.extend(out.steps.iter().cloned());
        state.global = out.point.global;
        for (l, &j) in partition.relevant.iter().enumerate() {
            state.nodes[j] = out.point.nodes[l];
        }

        if partition.irrelevant.is_empty() {
            continue;
        }
        let t = Instant::now();
        let level = LevelTwo::new(problem, &state, &partition.relevant, &partition.irrelevant);
        let out = lm_driver(
            &level,
            level.start(),
            opts,
            &mut NormalStrategy { settings },
        );
        rep.timings.level2_ms += ms(t.elapsed());
        rep.level2_iterations += out.iterations;
        absorb(&mut rep, &out);
        for (l, &j) in partition.irrelevant.iter().enumerate() {
            state.nodes[j] = out.point[l];
        }
    }
    rep.timings.total_ms = ms(start.elapsed());
    rep.energy = problem.energy(&state);
    Ok((state, rep))
}

/// Runs `strategy`. The batch solver ignores the partition.
pub fn solve(
    strategy: Strategy,
    problem: &EdProblem<'_>,
    partition: &Partition,
    state0: DeformState,
    opts: &SolveOptions,
) -> Result<(DeformState, SolveReport)> {
    match strategy {
        Strategy::Batch => solve_batch(problem, state0, opts),
        Strategy::Marginalized => solve_marginalized(problem, partition, state0, opts),
        Strategy::Decoupled => solve_decoupled(problem, partition, state0, opts),
    }
}

/// Reorders a step from the relevant-first layout of `permutation` to natural
/// node order.
pub fn step_to_natural(step: &[f64], permutation: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; step.len()];
    out[..GLOBAL_DIM].copy_from_slice(&step[..GLOBAL_DIM]);
    for (j, &p) in permutation.iter().enumerate() {
        let (src, dst) = (GLOBAL_DIM + NODE_DIM * p, GLOBAL_DIM + NODE_DIM * j);
        out[dst..dst + NODE_DIM].copy_from_slice(&step[src..src + NODE_DIM]);
    }
    out
}

#[cfg(test)]
mod tests;
