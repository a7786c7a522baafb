//! Finite-difference verification of the analytic Jacobians.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::energy::{e_data, e_reg, e_rot, ResidualBlock, Term};
use crate::instance::RandomInstance;
use crate::state::{DeformState, GLOBAL_DIM, NODE_DIM};

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOLERANCE: f64 = 1e-5;
/// Entries below this magnitude are compared absolutely: central differences
/// carry roundoff near `1e-16 |r| / h`, which swamps the relative error of
/// tiny entries.
pub const SCALE_FLOOR: f64 = 1.0;

/// Perturbs parameter `col` (natural layout) by `h`. Global rotation
/// coordinates are applied as a left increment, matching the Jacobian.
pub fn perturb(state: &DeformState, col: usize, h: f64) -> DeformState {
    let mut out = state.clone();
    if col < GLOBAL_DIM {
        let mut step = [0.0; GLOBAL_DIM];
        step[col] = h;
        if col < 3 {
            let r = nalgebra::Rotation3::new(nalgebra::Vector3::new(step[0], step[1], step[2]));
            out.global.rotation = r.matrix() * out.global.rotation;
        } else {
            out.global.translation[col - 3] += h;
        }
    } else {
        let j = (col - GLOBAL_DIM) / NODE_DIM;
        let mut step = [0.0; NODE_DIM];
        step[(col - GLOBAL_DIM) % NODE_DIM] = h;
        out.nodes[j].add_step(&step);
    }
    out
}

/// Error between an analytic entry and its finite-difference estimate.
pub fn entry_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Largest entry error of `block`'s Jacobian against central differences of
/// `eval`.
pub fn max_jacobian_error(
    state: &DeformState,
    block: &ResidualBlock,
    eval: impl Fn(&DeformState) -> Vec<f64>,
) -> f64 {
    let dense = block.jacobian.to_dense();
    let mut worst = 0.0f64;
    for col in 0..state.dim() {
        let plus = eval(&perturb(state, col, FD_STEP));
        let minus = eval(&perturb(state, col, -FD_STEP));
        for row in 0..block.len() {
            let fd = (plus[row] - minus[row]) / (2.0 * FD_STEP);
            worst = worst.max(entry_error(dense[(row, col)], fd));
        }
    }
    worst
}

#[derive(Debug, Clone, Serialize)]
pub struct TermCheck {
    pub term: Term,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub instances: usize,
    pub terms: Vec<TermCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }
}

/// Runs the finite-difference suite over `instances` random problems.
/// `corrupt` deliberately damages one term's Jacobian (negative control).
pub fn check_gradients(seed: u64, instances: usize, corrupt: Option<Term>) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..instances {
        let inst = RandomInstance::generate(&mut rng, 6, 12);
        let data = inst.data();
        let alpha = 1.0;
        for (slot, term) in Term::ALL.into_iter().enumerate() {
            let eval = |s: &DeformState| -> ResidualBlock {
                match term {
                    Term::Rot => e_rot(s),
                    Term::Reg => e_reg(s, &inst.graph, alpha),
                    Term::Data => e_data(s, &data).expect("valid instance"),
                }
            };
            let mut block = eval(&inst.state);
            if corrupt == Some(term) {
                block.jacobian.scale(1.01);
            }
            let err = max_jacobian_error(&inst.state, &block, |s| eval(s).residuals);
            worst[slot] = worst[slot].max(err);
        }
    }
    GradCheckReport {
        seed,
        instances,
        terms: Term::ALL
            .into_iter()
            .zip(worst)
            .map(|(term, max_error)| TermCheck {
                term,
                max_error,
                passed: max_error <= REL_TOLERANCE,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_seed_passes() {
        let report = check_gradients(0, 5, None);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_jacobian_is_reported() {
        let report = check_gradients(1, 2, Some(Term::Reg));
        assert!(!report.passed());
        let failed: Vec<Term> = report
            .terms
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.term)
            .collect();
        assert_eq!(failed, vec![Term::Reg]);
    }
}
