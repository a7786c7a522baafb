//! Damped Gauss-Newton (Levenberg) iteration over a generic least-squares
//! problem.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::sparse::SparseRows;

use super::linear::{norm, LinearError, LinearStats};
use super::SolveOptions;

/// Stacked residual vector with its Jacobian.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residuals: Vec<f64>,
    pub jacobian: SparseRows,
}

impl Linearization {
    pub fn cost(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }

    /// `Jᵀ r`.
    pub fn gradient(&self) -> Vec<f64> {
        self.jacobian.tr_mul_vec(&self.residuals)
    }
}

/// A sum of squares over points on a manifold with a flat tangent space.
pub trait LeastSquares {
    type Point: Clone;
    fn dim(&self) -> usize;
    fn linearize(&self, x: &Self::Point) -> Linearization;
    /// `‖r(x)‖²` without building the Jacobian.
    fn cost(&self, x: &Self::Point) -> f64;
    fn retract(&self, x: &Self::Point, step: &[f64]) -> Self::Point;
}

/// Solves `(JᵀJ + mu I) step = -Jᵀ r` for one linearization.
pub trait StepStrategy {
    fn step(
        &mut self,
        lin: &Linearization,
        mu: f64,
    ) -> Result<(Vec<f64>, LinearStats), LinearError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    CostTolerance,
    MaxIterations,
    /// Damping grew past its cap without finding a decreasing step.
    DampingExhausted,
    /// Nothing to optimise.
    Empty,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(
            self,
            Termination::GradientTolerance
                | Termination::StepTolerance
                | Termination::CostTolerance
                | Termination::Empty
        )
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome<P> {
    pub point: P,
    /// Outer iterations, accepted or not.
    pub iterations: usize,
    pub accepted: usize,
    pub termination: Termination,
    /// Cost at the start and after every accepted step.
    pub history: Vec<f64>,
    /// Accepted steps, kept only when requested.
    pub steps: Vec<Vec<f64>>,
    pub assembly: Duration,
    pub linear: Duration,
    pub pcg_iterations: usize,
    pub pcg_unconverged: usize,
    pub linear_failures: usize,
}

impl<P> LmOutcome<P> {
    pub fn final_cost(&self) -> f64 {
        *self
            .history
            .last()
            .expect("history starts with the initial cost")
    }
}

/// Runs damped Gauss-Newton from `x0`. A step is accepted only if it lowers
/// the cost; otherwise the damping grows and the step is recomputed.
pub fn lm_driver<P, S>(
    problem: &P,
    x0: P::Point,
    opts: &SolveOptions,
    strategy: &mut S,
) -> LmOutcome<P::Point>
where
    P: LeastSquares,
    S: StepStrategy,
{
    let mut out = LmOutcome {
        point: x0,
        iterations: 0,
        accepted: 0,
        termination: Termination::MaxIterations,
        history: Vec::new(),
        steps: Vec::new(),
        assembly: Duration::ZERO,
        linear: Duration::ZERO,
        pcg_iterations: 0,
        pcg_unconverged: 0,
        linear_failures: 0,
    };
    let t = Instant::now();
    let mut lin = problem.linearize(&out.point);
    out.assembly += t.elapsed();
    let mut cost = lin.cost();
    out.history.push(cost);
    if problem.dim() == 0 {
        out.termination = Termination::Empty;
        return out;
    }
    let mut mu = opts.initial_damping;
    let mut fresh = true;
    let mut grad_inf = 0.0;
    while out.iterations < opts.max_outer_iterations {
        if fresh {
            grad_inf = lin.gradient().iter().fold(0.0_f64, |m, g| m.max(g.abs()));
            fresh = false;
        }
        if grad_inf <= opts.gradient_tolerance {
            out.termination = Termination::GradientTolerance;
            return out;
        }
        out.iterations += 1;
        let t = Instant::now();
        let solved = strategy.step(&lin, mu);
        out.linear += t.elapsed();
        let step = match solved {
            Ok((step, stats)) => {
                out.pcg_iterations += stats.pcg_iterations;
                out.pcg_unconverged += usize::from(stats.pcg_unconverged);
                step
            }
            Err(_) => {
                out.linear_failures += 1;
                mu = (mu * opts.damping_up).max(opts.min_damping);
                if mu > opts.max_damping {
                    out.termination = Termination::DampingExhausted;
                    return out;
                }
                continue;
            }
        };
        if step.iter().fold(0.0_f64, |m, s| m.max(s.abs())) <= opts.step_tolerance {
            out.termination = Termination::StepTolerance;
            return out;
        }
        let t = Instant::now();
        let candidate = problem.retract(&out.point, &step);
        let new_cost = problem.cost(&candidate);
        out.assembly += t.elapsed();
        if new_cost < cost {
            let decrease = cost - new_cost;
            out.point = candidate;
            let t = Instant::now();
            lin = problem.linearize(&out.point);
            out.assembly += t.elapsed();
            cost = new_cost;
            fresh = true;
            out.accepted += 1;
            out.history.push(cost);
            if opts.record_steps {
                out.steps.push(step);
            }
            mu = (mu * opts.damping_down).max(opts.min_damping);
            if decrease <= opts.cost_tolerance * cost {
                out.termination = Termination::CostTolerance;
                return out;
            }
        } else {
            mu = (mu * opts.damping_up).max(opts.min_damping);
            if mu > opts.max_damping || norm(&step) == 0.0 {
                out.termination = Termination::DampingExhausted;
                return out;
            }
        }
    }
    out.termination = Termination::MaxIterations;
    out
}
