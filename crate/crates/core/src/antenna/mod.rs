//! Joint beamformer and antenna-position solver.
//!
//! The nonconvex coupling between effective gains, beamformers, element
//! responses, and element positions is relaxed into explicit equality
//! constraints with multipliers and a growing quadratic penalty. Four
//! closed-form-ish subproblems are swept cyclically (auxiliary gains and
//! times, per-element phases, beamformers on the unit sphere, positions
//! under spacing), the outer loop tightens the penalty, and an outermost
//! enumeration picks the best round split.

pub mod hybrid;
pub mod pdd;
pub mod subproblems;

pub use hybrid::{hybrid_sca_pdd, HybridConfig, HybridProblem, JointDecision, PairOutcome};
pub use pdd::{
    block_b_sweep, pdd_outer, penalized_objective, residuals, solve_block_b, BlockBConfig,
    BlockBOutcome, BlockBProblem, BlockBState, PenaltyState,
};
pub use subproblems::{
    beamformer_update, ma_position_update, solve_aux, unit_modulus_update, RateContext,
};

use crate::error::{Error, Result};
use crate::linalg::C;
use crate::scalar::Scalar;

/// Relaxed coupling variables: communication times, per-user effective
/// gains, and per-user copies of the element response vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxState<T> {
    /// Broadcast time, s.
    pub t1: T,
    /// Upload window, s.
    pub t2: T,
    /// Effective uplink gain per user (combiner applied).
    pub g_ul: Vec<C<T>>,
    /// Effective downlink gain per user (precoder applied).
    pub g_dl: Vec<C<T>>,
    /// Per-user relaxed copy of the uplink response vector, one entry per
    /// element, each unit modulus.
    pub theta_ul: Vec<Vec<C<T>>>,
    pub theta_dl: Vec<Vec<C<T>>>,
}

/// Tolerance on the constant-modulus invariant.
pub const MODULUS_TOL: f64 = 1e-9;

impl<T: Scalar> AuxState<T> {
    pub fn num_users(&self) -> usize {
        self.g_ul.len()
    }

    pub fn validate(&self, num_elements: usize) -> Result<()> {
        let u = self.g_ul.len();
        if self.g_dl.len() != u || self.theta_ul.len() != u || self.theta_dl.len() != u {
            return Err(Error::dimension("per-user auxiliary fields disagree in length"));
        }
        if u == 0 {
            return Err(Error::dimension("auxiliary state needs at least one user"));
        }
        if self.t1 < T::zero() || self.t2 < T::zero() {
            return Err(Error::domain("communication times cannot be negative"));
        }
        let tol = crate::scalar::real::<T>(MODULUS_TOL);
        for theta in self.theta_ul.iter().chain(&self.theta_dl) {
            if theta.len() != num_elements {
                return Err(Error::dimension("response copies must cover every element"));
            }
            for (i, e) in theta.iter().enumerate() {
                let m = (e.re * e.re + e.im * e.im).sqrt();
                if (m - T::one()).abs() > tol {
                    return Err(Error::domain(format!(
                        "response copy entry {i} has modulus {m}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Progress record of one full solver run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SolverReport {
    /// Bound value after each alternation of the winning round split.
    pub objective_trace: Vec<f64>,
    /// Max coupling violation after each alternation of the winning split.
    pub constraint_violation_trace: Vec<f64>,
    /// Total subproblem sweeps across every enumerated round split.
    pub inner_iterations: usize,
    pub converged: bool,
    /// Winning (pretrain, finetune) round counts.
    pub best_mn: (usize, usize),
}

impl SolverReport {
    pub fn validate(&self) -> Result<()> {
        if self.converged
            && (self.objective_trace.is_empty() || self.constraint_violation_trace.is_empty())
        {
            return Err(Error::domain("a converged report must carry its traces"));
        }
        Ok(())
    }
}
