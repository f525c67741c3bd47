//! Penalty-dual machinery tying the consistency residuals together: the
//! gains must match what the beamformers see, and the response copies must
//! match the array at its current element positions.

use crate::channel::{array_response, ArrayGeometry, Beamformer, LinkDirection};
use crate::error::{Error, Result};
use crate::linalg::{cdot, C};
use crate::scalar::{real, Scalar};

use super::subproblems::{
    beamformer_update, ma_position_update, solve_aux, unit_modulus_update, RateContext,
};
use super::AuxState;

/// A violation must shrink to this fraction of the previous one for the
/// multipliers to move; otherwise the penalty weight grows instead.
pub const IMPROVE_RATIO: f64 = 0.9;
/// Hard ceiling on the penalty weight.
pub const PENALTY_CAP: f64 = 1e12;

/// Index arithmetic for the flattened residual vector: per user, one gain
/// consistency residual per direction followed by the two response-copy
/// blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualLayout {
    pub users: usize,
    pub elements: usize,
}

impl ResidualLayout {
    pub fn len(&self) -> usize {
        self.users * (2 + 2 * self.elements)
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn stride(&self) -> usize {
        2 + 2 * self.elements
    }
    pub fn gain_ul(&self, user: usize) -> usize {
        user * self.stride()
    }
    pub fn gain_dl(&self, user: usize) -> usize {
        self.gain_ul(user) + 1
    }
    pub fn copy_ul(&self, user: usize, element: usize) -> usize {
        self.gain_ul(user) + 2 + element
    }
    pub fn copy_dl(&self, user: usize, element: usize) -> usize {
        self.gain_ul(user) + 2 + self.elements + element
    }
}

/// Dual multipliers and penalty weight. Multipliers live in a flat real
/// vector, two entries (re, im) per complex residual.
#[derive(Debug, Clone)]
pub struct PenaltyState<T> {
    pub penalty_weight: T,
    pub multipliers: Vec<T>,
    pub violation_history: Vec<T>,
}

impl<T: Scalar> PenaltyState<T> {
    pub fn new(layout: ResidualLayout, initial_weight: T) -> Result<Self> {
        if !(initial_weight > T::zero()) {
            return Err(Error::config("penalty weight must be positive"));
        }
        Ok(PenaltyState {
            penalty_weight: initial_weight,
            multipliers: vec![T::zero(); 2 * layout.len()],
            violation_history: Vec::new(),
        })
    }

    pub fn num_residuals(&self) -> usize {
        self.multipliers.len() / 2
    }

    pub fn multiplier(&self, k: usize) -> C<T> {
        C::new(self.multipliers[2 * k], self.multipliers[2 * k + 1])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_weight > T::zero()) || !self.penalty_weight.is_finite() {
            return Err(Error::config("penalty weight must be positive and finite"));
        }
        if self.multipliers.len() % 2 != 0 {
            return Err(Error::dimension("multipliers must pair up as (re, im)"));
        }
        if self.multipliers.iter().any(|m| !m.is_finite()) {
            return Err(Error::numeric("multiplier is not finite"));
        }
        Ok(())
    }
}

/// Fixed context for one Block-B solve: user angles, carrier wavelength,
/// and the rate bookkeeping (with any time caps).
#[derive(Debug, Clone)]
pub struct BlockBProblem<T> {
    pub aoa: Vec<T>,
    pub aod: Vec<T>,
    pub wavelength: T,
    pub rates: RateContext<T>,
}

impl<T: Scalar> BlockBProblem<T> {
    pub fn num_users(&self) -> usize {
        self.aoa.len()
    }

    pub fn validate(&self) -> Result<()> {
        let u = self.aoa.len();
        if u == 0 || self.aod.len() != u || self.rates.num_users() != u {
            return Err(Error::dimension("per-user problem inputs disagree"));
        }
        if !(self.wavelength > T::zero()) || !self.wavelength.is_finite() {
            return Err(Error::domain("wavelength must be positive"));
        }
        self.rates.validate()
    }

    /// Array responses toward every user at the given element layout.
    pub fn responses(
        &self,
        geometry: &ArrayGeometry<T>,
    ) -> Result<(Vec<Vec<C<T>>>, Vec<Vec<C<T>>>)> {
        let ul = self
            .aoa
            .iter()
            .map(|&a| array_response(geometry, a, LinkDirection::Uplink, self.wavelength))
            .collect::<Result<Vec<_>>>()?;
        let dl = self
            .aod
            .iter()
            .map(|&a| array_response(geometry, a, LinkDirection::Downlink, self.wavelength))
            .collect::<Result<Vec<_>>>()?;
        Ok((ul, dl))
    }
}

/// Everything Block B moves: the auxiliary gains/times, both beamformers,
/// and the element layout.
#[derive(Debug, Clone)]
pub struct BlockBState<T> {
    pub aux: AuxState<T>,
    pub receive: Beamformer<T>,
    pub transmit: Beamformer<T>,
    pub geometry: ArrayGeometry<T>,
}

impl<T: Scalar> BlockBState<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.geometry.len();
        if self.receive.len() != n || self.transmit.len() != n {
            return Err(Error::dimension("beamformers disagree with the array size"));
        }
        self.aux.validate(n)
    }

    pub fn layout(&self) -> ResidualLayout {
        ResidualLayout {
            users: self.aux.num_users(),
            elements: self.geometry.len(),
        }
    }
}

/// Stacked consistency residuals: per user, gain-vs-beamformer on both
/// directions, then the response copies against the array at `x`.
pub fn residuals<T: Scalar>(
    state: &BlockBState<T>,
    problem: &BlockBProblem<T>,
) -> Result<Vec<C<T>>> {
    state.validate()?;
    problem.validate()?;
    let u = state.aux.num_users();
    if problem.num_users() != u {
        return Err(Error::dimension("problem and state disagree on the user count"));
    }
    let layout = state.layout();
    let (a_ul, a_dl) = problem.responses(&state.geometry)?;
    let mut r = vec![C::new(T::zero(), T::zero()); layout.len()];
    for i in 0..u {
        r[layout.gain_ul(i)] =
            state.aux.g_ul[i] - cdot(state.receive.weights(), &state.aux.theta_ul[i]);
        r[layout.gain_dl(i)] =
            state.aux.g_dl[i] - cdot(&state.aux.theta_dl[i], state.transmit.weights());
        for e in 0..layout.elements {
            r[layout.copy_ul(i, e)] = state.aux.theta_ul[i][e] - a_ul[i][e];
            r[layout.copy_dl(i, e)] = state.aux.theta_dl[i][e] - a_dl[i][e];
        }
    }
    Ok(r)
}

/// Largest residual modulus.
pub fn max_violation<T: Scalar>(residuals: &[C<T>]) -> T {
    residuals
        .iter()
        .map(|r| r.norm_sqr().sqrt())
        .fold(T::zero(), T::max)
}

/// The augmented penalty value `(mu/2) sum_k |r_k + lambda_k / mu|^2`.
pub fn penalized_objective<T: Scalar>(
    residuals: &[C<T>],
    penalty: &PenaltyState<T>,
) -> Result<T> {
    penalty.validate()?;
    if penalty.num_residuals() != residuals.len() {
        return Err(Error::dimension("multipliers disagree with the residual count"));
    }
    let mu = penalty.penalty_weight;
    let mut acc = T::zero();
    for (k, r) in residuals.iter().enumerate() {
        acc += (*r + penalty.multiplier(k) / mu).norm_sqr();
    }
    Ok(acc * mu / real::<T>(2.0))
}

/// One dual/penalty update from a fresh residual report: a multiplier step
/// when the violation shrank enough (the first report always counts),
/// otherwise a penalty-weight increase. A clean report changes nothing but
/// the history.
pub fn pdd_outer<T: Scalar>(
    penalty: &PenaltyState<T>,
    residuals: &[C<T>],
    growth: T,
) -> Result<PenaltyState<T>> {
    penalty.validate()?;
    if penalty.num_residuals() != residuals.len() {
        return Err(Error::dimension("multipliers disagree with the residual count"));
    }
    if !(growth > T::one()) {
        return Err(Error::config("penalty growth factor must exceed one"));
    }
    let violation = max_violation(residuals);
    let improved = match penalty.violation_history.last() {
        None => true,
        Some(&last) => violation <= real::<T>(IMPROVE_RATIO) * last,
    };
    let mut next = penalty.clone();
    if improved {
        let mu = next.penalty_weight;
        for (k, r) in residuals.iter().enumerate() {
            next.multipliers[2 * k] += mu * r.re;
            next.multipliers[2 * k + 1] += mu * r.im;
        }
    } else {
        next.penalty_weight = (next.penalty_weight * growth).min(real(PENALTY_CAP));
    }
    next.violation_history.push(violation);
    Ok(next)
}

fn shifted_gain_targets<T: Scalar>(
    state: &BlockBState<T>,
    penalty: &PenaltyState<T>,
) -> (Vec<C<T>>, Vec<C<T>>) {
    let layout = state.layout();
    let mu = penalty.penalty_weight;
    let u = layout.users;
    let mut ul = Vec::with_capacity(u);
    let mut dl = Vec::with_capacity(u);
    for i in 0..u {
        ul.push(state.aux.g_ul[i] + penalty.multiplier(layout.gain_ul(i)) / mu);
        dl.push(state.aux.g_dl[i] + penalty.multiplier(layout.gain_dl(i)) / mu);
    }
    (ul, dl)
}

/// One full coordinate sweep at fixed multipliers: auxiliary variables,
/// response copies, beamformers, then element positions. Every step except
/// the last minimizes its own subproblem exactly, and the position step is
/// guarded by an accept test, so the penalty value never goes up.
pub fn block_b_sweep<T: Scalar>(
    state: &BlockBState<T>,
    penalty: &PenaltyState<T>,
    problem: &BlockBProblem<T>,
) -> Result<BlockBState<T>> {
    state.validate()?;
    problem.validate()?;
    penalty.validate()?;
    let layout = state.layout();
    if penalty.num_residuals() != layout.len() {
        return Err(Error::dimension("penalty state sized for a different problem"));
    }
    let mu = penalty.penalty_weight;
    let u = layout.users;
    let mut next = state.clone();

    // auxiliary gains and times
    let shift_ul: Vec<C<T>> = (0..u).map(|i| penalty.multiplier(layout.gain_ul(i)) / mu).collect();
    let shift_dl: Vec<C<T>> = (0..u).map(|i| penalty.multiplier(layout.gain_dl(i)) / mu).collect();
    next.aux = solve_aux(
        &next.aux,
        &next.receive,
        &next.transmit,
        &problem.rates,
        Some(&shift_ul),
        Some(&shift_dl),
    )?;

    // response copies, one cyclic pass per user and direction
    let (a_ul, a_dl) = problem.responses(&next.geometry)?;
    let (g_ul_t, g_dl_t) = shifted_gain_targets(&next, penalty);
    for i in 0..u {
        let resp_ul: Vec<C<T>> = (0..layout.elements)
            .map(|e| a_ul[i][e] - penalty.multiplier(layout.copy_ul(i, e)) / mu)
            .collect();
        let mut th = next.aux.theta_ul[i].clone();
        unit_modulus_update(
            &mut th,
            next.receive.weights(),
            LinkDirection::Uplink,
            g_ul_t[i],
            &resp_ul,
        )?;
        next.aux.theta_ul[i] = th;

        let resp_dl: Vec<C<T>> = (0..layout.elements)
            .map(|e| a_dl[i][e] - penalty.multiplier(layout.copy_dl(i, e)) / mu)
            .collect();
        let mut th = next.aux.theta_dl[i].clone();
        unit_modulus_update(
            &mut th,
            next.transmit.weights(),
            LinkDirection::Downlink,
            g_dl_t[i],
            &resp_dl,
        )?;
        next.aux.theta_dl[i] = th;
    }

    // beamformers against the updated copies
    let (g_ul_t, g_dl_t) = shifted_gain_targets(&next, penalty);
    let (q, w, _) = beamformer_update(
        &next.receive,
        &next.transmit,
        &g_ul_t,
        &next.aux.theta_ul,
        &g_dl_t,
        &next.aux.theta_dl,
    )?;
    next.receive = q;
    next.transmit = w;

    // element positions, through the phase surrogate with an accept guard
    let shifted_ul: Vec<Vec<C<T>>> = (0..u)
        .map(|i| {
            (0..layout.elements)
                .map(|e| next.aux.theta_ul[i][e] + penalty.multiplier(layout.copy_ul(i, e)) / mu)
                .collect()
        })
        .collect();
    let shifted_dl: Vec<Vec<C<T>>> = (0..u)
        .map(|i| {
            (0..layout.elements)
                .map(|e| next.aux.theta_dl[i][e] + penalty.multiplier(layout.copy_dl(i, e)) / mu)
                .collect()
        })
        .collect();
    let candidate = ma_position_update(
        &shifted_ul,
        &shifted_dl,
        &problem.aoa,
        &problem.aod,
        problem.wavelength,
        &next.geometry,
    )?;
    let before = penalized_objective(&residuals(&next, problem)?, penalty)?;
    let mut moved = next.clone();
    moved.geometry = candidate;
    let after = penalized_objective(&residuals(&moved, problem)?, penalty)?;
    if after <= before + real(1e-12) {
        next = moved;
    }
    Ok(next)
}

/// Knobs for the penalized consistency solve.
#[derive(Debug, Clone)]
pub struct BlockBConfig {
    pub max_outer: usize,
    pub max_inner_sweeps: usize,
    pub violation_tol: f64,
    /// Relative stall tolerance on the inner penalty value.
    pub inner_obj_tol: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
}

impl Default for BlockBConfig {
    fn default() -> Self {
        BlockBConfig {
            max_outer: 200,
            max_inner_sweeps: 20,
            violation_tol: 1e-6,
            inner_obj_tol: 1e-10,
            initial_penalty: 1.0,
            penalty_growth: 5.0,
        }
    }
}

impl BlockBConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer == 0 || self.max_inner_sweeps == 0 {
            return Err(Error::config("iteration budgets must be positive"));
        }
        if !(self.violation_tol > 0.0) || !(self.inner_obj_tol > 0.0) {
            return Err(Error::config("tolerances must be positive"));
        }
        if !(self.initial_penalty > 0.0) || !(self.penalty_growth > 1.0) {
            return Err(Error::config("penalty weight must start positive and grow"));
        }
        Ok(())
    }
}

/// What a Block-B solve hands back.
#[derive(Debug, Clone)]
pub struct BlockBOutcome<T> {
    pub state: BlockBState<T>,
    pub penalty: PenaltyState<T>,
    pub converged: bool,
    pub sweeps: usize,
    pub final_violation: T,
}

/// Full penalty-dual loop: inner coordinate sweeps until the penalty value
/// stalls, then a dual/penalty update, until the residuals are consistent
/// to tolerance or the budget runs out.
pub fn solve_block_b<T: Scalar>(
    problem: &BlockBProblem<T>,
    init: &BlockBState<T>,
    config: &BlockBConfig,
) -> Result<BlockBOutcome<T>> {
    config.validate()?;
    init.validate()?;
    problem.validate()?;
    let layout = init.layout();
    let mut penalty = PenaltyState::new(layout, real::<T>(config.initial_penalty))?;
    let mut state = init.clone();
    let mut sweeps = 0usize;
    let tol = real::<T>(config.violation_tol);
    let growth = real::<T>(config.penalty_growth);

    for _ in 0..config.max_outer {
        let mut j_prev = penalized_objective(&residuals(&state, problem)?, &penalty)?;
        for _ in 0..config.max_inner_sweeps {
            state = block_b_sweep(&state, &penalty, problem)?;
            sweeps += 1;
            let j = penalized_objective(&residuals(&state, problem)?, &penalty)?;
            let scale = T::one().max(j_prev.abs());
            if j_prev - j <= real::<T>(config.inner_obj_tol) * scale {
                break;
            }
            j_prev = j;
        }
        let r = residuals(&state, problem)?;
        let violation = max_violation(&r);
        if violation <= tol {
            let mut done = penalty;
            done.violation_history.push(violation);
            return Ok(BlockBOutcome {
                state,
                penalty: done,
                converged: true,
                sweeps,
                final_violation: violation,
            });
        }
        penalty = pdd_outer(&penalty, &r, growth)?;
    }
    let r = residuals(&state, problem)?;
    let final_violation = max_violation(&r);
    Ok(BlockBOutcome {
        converged: final_violation <= tol,
        state,
        penalty,
        sweeps,
        final_violation,
    })
}
