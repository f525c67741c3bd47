//! Compute and communication resource accounting: phase plans, latency and
//! energy models, power-cap checking, and the convexified per-iteration step
//! over the continuous compute variables (server batches/frequencies, client
//! batches/frequencies) used by the alternating solver.
//!
//! Latency of a server round is `W * C / (f * c)` where `C` is work per
//! sample and `c` is work per cycle; compute energy is the cubic-in-frequency
//! CPU power `coeff * f^3` integrated over that time, which lands on the
//! familiar `coeff * f^2 * cycles` form.

use crate::error::{Error, Result};
use crate::scalar::{count, real, Scalar};

/// Round counts for the two phases. The fine-tuning phase must be nonempty;
/// pretraining may be skipped entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhasePlan {
    pub pretrain_rounds: usize,
    pub finetune_rounds: usize,
}

impl PhasePlan {
    pub fn new(pretrain_rounds: usize, finetune_rounds: usize) -> Result<Self> {
        if finetune_rounds == 0 {
            return Err(Error::domain("at least one fine-tuning round is required"));
        }
        Ok(PhasePlan {
            pretrain_rounds,
            finetune_rounds,
        })
    }
}

/// Compute-side constants for the server and every client.
#[derive(Debug, Clone)]
pub struct ComputeModel<T> {
    /// Work per training sample (e.g. FLOPs), shared by server and clients.
    pub flops_per_sample: T,
    /// Server work per CPU cycle.
    pub server_cycle_factor: T,
    /// Client work per CPU cycle, one entry per user.
    pub client_cycle_factor: Vec<T>,
    /// Server CPU power coefficient: power draw is `coeff * f^3`.
    pub cpu_power_coeff: T,
    /// Client CPU energy coefficients, one per user.
    pub client_power_coeff: Vec<T>,
    /// Dimensionless scale on the server energy term.
    pub energy_scale: T,
    /// Dimensionless exponent coefficient on the server energy term.
    pub energy_exponent_coeff: T,
}

impl<T: Scalar> ComputeModel<T> {
    pub fn validate(&self) -> Result<()> {
        if self.client_cycle_factor.is_empty()
            || self.client_cycle_factor.len() != self.client_power_coeff.len()
        {
            return Err(Error::dimension("client compute vectors disagree in length"));
        }
        let scalars = [
            ("flops_per_sample", self.flops_per_sample),
            ("server_cycle_factor", self.server_cycle_factor),
            ("cpu_power_coeff", self.cpu_power_coeff),
            ("energy_scale", self.energy_scale),
            ("energy_exponent_coeff", self.energy_exponent_coeff),
        ];
        for (name, v) in scalars {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be strictly positive")));
            }
        }
        for (i, (&c, &k)) in self
            .client_cycle_factor
            .iter()
            .zip(&self.client_power_coeff)
            .enumerate()
        {
            if !(c > T::zero()) || !(k > T::zero()) {
                return Err(Error::domain(format!("client {i} compute constants must be positive")));
            }
        }
        Ok(())
    }

    pub fn num_users(&self) -> usize {
        self.client_cycle_factor.len()
    }

    /// Server-side round latency `W * C / (f * c)`.
    pub fn server_round_latency(&self, batch: T, freq: T) -> Result<T> {
        if !(freq > T::zero()) {
            return Err(Error::domain("server frequency must be positive"));
        }
        Ok(batch * self.flops_per_sample / (freq * self.server_cycle_factor))
    }

    /// Instantaneous server CPU power `coeff * f^3`.
    pub fn server_cpu_power(&self, freq: T) -> T {
        self.cpu_power_coeff * freq * freq * freq
    }

    /// Server round energy: cubic power integrated over the round latency,
    /// scaled by the dimensionless knobs. Equals
    /// `scale * exp_coeff * coeff * f^2 * (W C / c)`.
    pub fn server_round_energy(&self, batch: T, freq: T) -> Result<T> {
        let t = self.server_round_latency(batch, freq)?;
        Ok(self.energy_scale * self.energy_exponent_coeff * self.server_cpu_power(freq) * t)
    }

    /// Client compute latency `b * C / (f * c_u)`.
    pub fn client_compute_latency(&self, user: usize, batch: T, freq: T) -> Result<T> {
        let c = self.client_constant(user)?;
        if !(freq > T::zero()) {
            return Err(Error::domain("client frequency must be positive"));
        }
        Ok(batch * self.flops_per_sample / (freq * c))
    }

    /// Client compute energy `kappa_u * f^2 * (b C / c_u)`.
    pub fn client_compute_energy(&self, user: usize, batch: T, freq: T) -> Result<T> {
        let c = self.client_constant(user)?;
        let cycles = batch * self.flops_per_sample / c;
        Ok(self.client_power_coeff[user] * freq * freq * cycles)
    }

    fn client_constant(&self, user: usize) -> Result<T> {
        self.client_cycle_factor
            .get(user)
            .copied()
            .ok_or_else(|| Error::dimension(format!("user {user} outside compute model")))
    }
}

/// Per-round decision record: who participates and with what powers,
/// batches, and frequencies, plus the server schedule in effect.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan<T> {
    pub selected: Vec<usize>,
    /// Transmit power per selected user, W.
    pub powers: Vec<T>,
    /// Local batch size per selected user.
    pub batch_sizes: Vec<u32>,
    /// Local CPU frequency per selected user, Hz.
    pub cpu_freqs: Vec<T>,
    /// Server batch size of the paired pretraining schedule.
    pub server_batch: u32,
    /// Server CPU frequency, Hz.
    pub server_freq: T,
}

impl<T: Scalar> RoundPlan<T> {
    pub fn validate(&self, num_users: usize, budget: &Budget<T>) -> Result<()> {
        let k = self.selected.len();
        if k == 0 {
            return Err(Error::domain("a round plan must select at least one user"));
        }
        if k > budget.max_users {
            return Err(Error::domain(format!(
                "{k} selected users exceed the concurrency cap {}",
                budget.max_users
            )));
        }
        if self.powers.len() != k || self.batch_sizes.len() != k || self.cpu_freqs.len() != k {
            return Err(Error::dimension("per-user plan fields disagree in length"));
        }
        let mut seen = vec![false; num_users];
        for &u in &self.selected {
            if u >= num_users {
                return Err(Error::dimension(format!("selected user {u} out of range")));
            }
            if seen[u] {
                return Err(Error::domain(format!("user {u} selected twice")));
            }
            seen[u] = true;
        }
        for (i, &p) in self.powers.iter().enumerate() {
            if !p.is_finite() || p < T::zero() || p > budget.max_power {
                return Err(Error::domain(format!(
                    "power {p} for slot {i} outside [0, {}]",
                    budget.max_power
                )));
            }
        }
        for (&b, &f) in self.batch_sizes.iter().zip(&self.cpu_freqs) {
            if b == 0 {
                return Err(Error::domain("batch sizes must be at least 1"));
            }
            if !(f > T::zero()) {
                return Err(Error::domain("client frequencies must be positive"));
            }
        }
        if self.server_batch == 0 || !(self.server_freq > T::zero()) {
            return Err(Error::domain("server schedule must be positive"));
        }
        Ok(())
    }
}

/// System-level caps for a whole experiment.
#[derive(Debug, Clone)]
pub struct Budget<T> {
    /// End-to-end latency cap, seconds.
    pub latency_cap_s: T,
    /// Total energy cap, joules.
    pub energy_cap_j: T,
    /// Model payload per direction, bits.
    pub payload_bits: T,
    /// Per-user average-power caps, W.
    pub avg_power_caps: Vec<T>,
    /// Instantaneous per-user power cap, W.
    pub max_power: T,
    /// Concurrency cap on participants per round.
    pub max_users: usize,
}

impl<T: Scalar> Budget<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latency_cap_s", self.latency_cap_s),
            ("energy_cap_j", self.energy_cap_j),
            ("payload_bits", self.payload_bits),
            ("max_power", self.max_power),
        ] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be strictly positive")));
            }
        }
        if self.avg_power_caps.is_empty() {
            return Err(Error::dimension("need per-user average power caps"));
        }
        for (i, &c) in self.avg_power_caps.iter().enumerate() {
            if !(c > T::zero()) {
                return Err(Error::domain(format!("average power cap for user {i} not positive")));
            }
        }
        if self.max_users == 0 {
            return Err(Error::domain("concurrency cap must be at least 1"));
        }
        Ok(())
    }
}

/// Total pretraining latency `sum_m W_m C / (f_m c)`.
pub fn pretrain_latency<T: Scalar>(
    batches: &[T],
    freqs: &[T],
    model: &ComputeModel<T>,
) -> Result<T> {
    if batches.len() != freqs.len() {
        return Err(Error::dimension("pretraining batches/freqs length mismatch"));
    }
    let mut acc = T::zero();
    for (&w, &f) in batches.iter().zip(freqs) {
        acc += model.server_round_latency(w, f)?;
    }
    Ok(acc)
}

/// Fine-tuning round latency: the slowest selected user's download + compute
/// + upload chain. `rates_*` align with `plan.selected`.
pub fn round_latency<T: Scalar>(
    plan: &RoundPlan<T>,
    rates_dl: &[T],
    rates_ul: &[T],
    payload_bits: T,
    model: &ComputeModel<T>,
) -> Result<T> {
    let k = plan.selected.len();
    if rates_dl.len() != k || rates_ul.len() != k {
        return Err(Error::dimension("rates must align with the selected set"));
    }
    let mut worst = T::zero();
    for i in 0..k {
        if !(rates_dl[i] > T::zero()) || !(rates_ul[i] > T::zero()) {
            return Err(Error::infeasible(format!(
                "user {} has a zero link rate this round",
                plan.selected[i]
            )));
        }
        let u = plan.selected[i];
        let compute =
            model.client_compute_latency(u, count::<T>(plan.batch_sizes[i] as usize), plan.cpu_freqs[i])?;
        let total = payload_bits / rates_dl[i] + compute + payload_bits / rates_ul[i];
        worst = worst.max(total);
    }
    Ok(worst)
}

/// Communication time aggregates of one fine-tuning round: the broadcast
/// time `t1 = max_u payload / R_dl` and the upload window `t2 = max_u
/// payload / R_ul`.
pub fn round_comm_times<T: Scalar>(rates_dl: &[T], rates_ul: &[T], payload_bits: T) -> Result<(T, T)> {
    if rates_dl.is_empty() || rates_dl.len() != rates_ul.len() {
        return Err(Error::dimension("rate vectors must be nonempty and aligned"));
    }
    let mut t1 = T::zero();
    let mut t2 = T::zero();
    for (&rd, &ru) in rates_dl.iter().zip(rates_ul) {
        if !(rd > T::zero()) || !(ru > T::zero()) {
            return Err(Error::infeasible("zero rate while computing round times"));
        }
        t1 = t1.max(payload_bits / rd);
        t2 = t2.max(payload_bits / ru);
    }
    Ok((t1, t2))
}

/// Total energy over both phases: server compute, downlink broadcasts,
/// client compute, and client uploads. `t1`/`t2` are the per-round
/// communication time aggregates.
pub fn total_energy<T: Scalar>(
    pretrain: &[(T, T)],
    rounds: &[RoundPlan<T>],
    t1: &[T],
    t2: &[T],
    server_power: T,
    model: &ComputeModel<T>,
) -> Result<T> {
    if rounds.len() != t1.len() || rounds.len() != t2.len() {
        return Err(Error::dimension("round plans and comm times disagree in length"));
    }
    let mut acc = T::zero();
    for &(w, f) in pretrain {
        acc += model.server_round_energy(w, f)?;
    }
    for (n, plan) in rounds.iter().enumerate() {
        acc += server_power * t1[n];
        for (i, &u) in plan.selected.iter().enumerate() {
            acc += model.client_compute_energy(
                u,
                count::<T>(plan.batch_sizes[i] as usize),
                plan.cpu_freqs[i],
            )?;
            acc += plan.powers[i] * t2[n];
        }
    }
    Ok(acc)
}

/// One power-cap violation found by [`check_power`].
#[derive(Debug, Clone, PartialEq)]
pub enum PowerViolation<T> {
    Instantaneous { round: usize, user: usize, value: T, cap: T },
    Average { user: usize, value: T, cap: T },
}

/// Outcome of checking a full schedule against the power caps. Boundary
/// values pass; only strict excess is a violation.
#[derive(Debug, Clone)]
pub struct PowerReport<T> {
    pub violations: Vec<PowerViolation<T>>,
}

impl<T> PowerReport<T> {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn check_power<T: Scalar>(plans: &[RoundPlan<T>], budget: &Budget<T>) -> Result<PowerReport<T>> {
    budget.validate()?;
    let num_users = budget.avg_power_caps.len();
    let rounds = plans.len();
    if rounds == 0 {
        return Err(Error::dimension("power check needs at least one round"));
    }
    let mut totals = vec![T::zero(); num_users];
    let mut violations = Vec::new();
    for (n, plan) in plans.iter().enumerate() {
        for (i, &u) in plan.selected.iter().enumerate() {
            if u >= num_users {
                return Err(Error::dimension(format!("selected user {u} out of range")));
            }
            let p = plan.powers[i];
            if p > budget.max_power {
                violations.push(PowerViolation::Instantaneous {
                    round: n,
                    user: u,
                    value: p,
                    cap: budget.max_power,
                });
            }
            totals[u] += p;
        }
    }
    for (u, &tot) in totals.iter().enumerate() {
        let avg = tot / count::<T>(rounds);
        if avg > budget.avg_power_caps[u] {
            violations.push(PowerViolation::Average {
                user: u,
                value: avg,
                cap: budget.avg_power_caps[u],
            });
        }
    }
    Ok(PowerReport { violations })
}

/// Tangent of the convex term `1/x` at `x0`: `1/x0 - (x - x0)/x0^2`.
/// Underestimates `1/x` for every `x > 0` and touches it at `x0`.
pub fn linearize_reciprocal<T: Scalar>(x: T, x0: T) -> T {
    T::one() / x0 - (x - x0) / (x0 * x0)
}

/// Tangent of `x^2` at `x0`.
pub fn linearize_square<T: Scalar>(x: T, x0: T) -> T {
    x0 * x0 + real::<T>(2.0) * x0 * (x - x0)
}

/// Tangent of `x^3` at `x0`. Used where the cubic CPU-power law enters a
/// constraint.
pub fn linearize_cube<T: Scalar>(x: T, x0: T) -> T {
    x0 * x0 * x0 + real::<T>(3.0) * x0 * x0 * (x - x0)
}

/// Continuous relaxation of the compute decisions: server batches and
/// frequencies per pretraining round, client batches and frequencies per
/// fine-tuning round (aligned with that round's selected users).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAVars<T> {
    pub server_batches: Vec<T>,
    pub server_freqs: Vec<T>,
    pub client_batches: Vec<Vec<T>>,
    pub client_freqs: Vec<Vec<T>>,
}

impl<T: Scalar> BlockAVars<T> {
    pub fn num_pretrain(&self) -> usize {
        self.server_batches.len()
    }
    pub fn num_rounds(&self) -> usize {
        self.client_batches.len()
    }

    fn check_shape(&self) -> Result<()> {
        if self.server_freqs.len() != self.server_batches.len()
            || self.client_freqs.len() != self.client_batches.len()
        {
            return Err(Error::dimension("block-A variable shapes disagree"));
        }
        for (b, f) in self.client_batches.iter().zip(&self.client_freqs) {
            if b.len() != f.len() {
                return Err(Error::dimension("per-round client vectors disagree"));
            }
        }
        Ok(())
    }

    fn flatten(&self) -> Vec<T> {
        let mut z = Vec::new();
        z.extend_from_slice(&self.server_batches);
        z.extend_from_slice(&self.server_freqs);
        for (b, f) in self.client_batches.iter().zip(&self.client_freqs) {
            z.extend_from_slice(b);
            z.extend_from_slice(f);
        }
        z
    }

    fn unflatten_like(&self, z: &[T]) -> BlockAVars<T> {
        let m = self.server_batches.len();
        let mut out = self.clone();
        out.server_batches.copy_from_slice(&z[0..m]);
        out.server_freqs.copy_from_slice(&z[m..2 * m]);
        let mut at = 2 * m;
        for n in 0..self.client_batches.len() {
            let k = self.client_batches[n].len();
            out.client_batches[n].copy_from_slice(&z[at..at + k]);
            at += k;
            out.client_freqs[n].copy_from_slice(&z[at..at + k]);
            at += k;
        }
        out
    }

    /// Largest coordinate-wise distance to another plan of the same shape.
    pub fn linf_distance(&self, other: &BlockAVars<T>) -> T {
        let a = self.flatten();
        let b = other.flatten();
        a.iter()
            .zip(&b)
            .map(|(&x, &y)| (x - y).abs())
            .fold(T::zero(), T::max)
    }
}

/// Box bounds on the four variable families.
#[derive(Debug, Clone, Copy)]
pub struct BlockABounds<T> {
    pub server_batch: (T, T),
    pub server_freq: (T, T),
    pub client_batch: (T, T),
    pub client_freq: (T, T),
}

impl<T: Scalar> BlockABounds<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("server_batch", self.server_batch),
            ("server_freq", self.server_freq),
            ("client_batch", self.client_batch),
            ("client_freq", self.client_freq),
        ] {
            if !(lo > T::zero()) || !(hi > lo) {
                return Err(Error::domain(format!("{name} bounds must satisfy 0 < lo < hi")));
            }
        }
        Ok(())
    }
}

/// Quantities held fixed while the compute variables move: per-round
/// communication times, transmit powers, and the selected sets.
#[derive(Debug, Clone)]
pub struct BlockACouplings<T> {
    pub t1: Vec<T>,
    pub t2: Vec<T>,
    pub powers: Vec<Vec<T>>,
    pub selected: Vec<Vec<usize>>,
    pub server_power: T,
}

/// Objective over the continuous compute variables, with analytic gradient.
pub trait BlockAObjective<T: Scalar> {
    fn value(&self, vars: &BlockAVars<T>) -> T;
    fn gradient(&self, vars: &BlockAVars<T>) -> BlockAVars<T>;
}

/// Settings for the convexified step.
#[derive(Debug, Clone, Copy)]
pub struct BlockASettings<T> {
    /// Trust radius as a fraction of each box width (coordinate-wise).
    pub trust_fraction: T,
    /// Maximum projected-gradient iterations per penalty level.
    pub max_iterations: usize,
}

impl<T: Scalar> Default for BlockASettings<T> {
    fn default() -> Self {
        BlockASettings {
            trust_fraction: real(0.2),
            max_iterations: 400,
        }
    }
}

struct LinearTerm<T> {
    bias: T,
    coef: Vec<T>,
}

impl<T: Scalar> LinearTerm<T> {
    fn zero(dim: usize) -> Self {
        LinearTerm {
            bias: T::zero(),
            coef: vec![T::zero(); dim],
        }
    }
    fn eval(&self, z: &[T]) -> T {
        self.bias + crate::linalg::dot(&self.coef, z)
    }
}

/// One step of the convexified compute subproblem: minimizes the provided
/// objective subject to the latency and energy budgets with their nonconvex
/// monomials replaced by first-order expansions around `prev`, box bounds,
/// and a coordinate-wise trust region centered at `prev`. Solved by
/// projected gradient with backtracking on a quadratic-penalty form.
///
/// The returned plan satisfies the linearized constraints to a relative
/// tolerance of 1e-6, stays in every box, and moves at most
/// `trust_fraction * width` per coordinate. Errors with `Infeasible` when
/// the linearized constraint set has no point inside the trust box.
pub fn sca_surrogate_block_a<T: Scalar>(
    prev: &BlockAVars<T>,
    coup: &BlockACouplings<T>,
    model: &ComputeModel<T>,
    budget: &Budget<T>,
    bounds: &BlockABounds<T>,
    objective: &dyn BlockAObjective<T>,
    settings: &BlockASettings<T>,
) -> Result<BlockAVars<T>> {
    prev.check_shape()?;
    model.validate()?;
    budget.validate()?;
    bounds.validate()?;
    let n_rounds = prev.num_rounds();
    if coup.t1.len() != n_rounds
        || coup.t2.len() != n_rounds
        || coup.powers.len() != n_rounds
        || coup.selected.len() != n_rounds
    {
        return Err(Error::dimension("couplings do not match the round count"));
    }
    for n in 0..n_rounds {
        if coup.selected[n].len() != prev.client_batches[n].len()
            || coup.powers[n].len() != prev.client_batches[n].len()
        {
            return Err(Error::dimension("couplings do not match the selected sets"));
        }
    }

    let z0 = prev.flatten();
    let dim = z0.len();
    if dim == 0 {
        return Ok(prev.clone());
    }

    // Per-coordinate boxes, then intersect with the trust region.
    let (lo_box, hi_box) = coordinate_boxes(prev, bounds);
    let mut lo = vec![T::zero(); dim];
    let mut hi = vec![T::zero(); dim];
    for i in 0..dim {
        let width = hi_box[i] - lo_box[i];
        let delta = settings.trust_fraction * width;
        let center = z0[i].max(lo_box[i]).min(hi_box[i]);
        lo[i] = lo_box[i].max(center - delta);
        hi[i] = hi_box[i].min(center + delta);
    }

    let constraints = build_linearized_constraints(prev, coup, model, budget)?;

    // Work in box-normalized coordinates so one step size fits every family.
    let to_actual = |y: &[T]| -> Vec<T> {
        (0..dim).map(|i| lo[i] + (hi[i] - lo[i]) * y[i]).collect()
    };
    let mut y: Vec<T> = (0..dim)
        .map(|i| {
            let w = hi[i] - lo[i];
            if w > T::zero() {
                ((z0[i].max(lo[i]).min(hi[i])) - lo[i]) / w
            } else {
                T::zero()
            }
        })
        .collect();

    let penalties = [1e2, 1e4, 1e6, 1e9];
    let mut vars = prev.clone();
    for &pen_f in &penalties {
        let pen = real::<T>(pen_f);
        let eval = |y: &[T]| -> (T, Vec<T>) {
            let z = to_actual(y);
            vars_eval(&z, prev, objective, &constraints, pen, &lo, &hi)
        };
        let (mut fval, mut grad) = eval(&y);
        let mut stall = 0;
        for _ in 0..settings.max_iterations {
            let mut step = real::<T>(0.5);
            let mut accepted = false;
            while step > real(1e-14) {
                let cand: Vec<T> = (0..dim)
                    .map(|i| (y[i] - step * grad[i]).max(T::zero()).min(T::one()))
                    .collect();
                let (fc, gc) = eval(&cand);
                if fc < fval - real::<T>(1e-14) * fval.abs() {
                    let moved: T = cand
                        .iter()
                        .zip(&y)
                        .map(|(&a, &b)| (a - b).abs())
                        .fold(T::zero(), T::max);
                    y = cand;
                    fval = fc;
                    grad = gc;
                    accepted = true;
                    if moved < real(1e-12) {
                        stall += 1;
                    } else {
                        stall = 0;
                    }
                    break;
                }
                step = step * real(0.25);
            }
            if !accepted {
                stall += 1;
            }
            if stall >= 2 {
                break;
            }
        }
        vars = prev.unflatten_like(&to_actual(&y));
        let worst = worst_violation(&vars.flatten(), &constraints);
        if worst <= real(1e-6) {
            break;
        }
    }

    let z_final = vars.flatten();
    let worst = worst_violation(&z_final, &constraints);
    if worst > real(1e-6) {
        return Err(Error::infeasible(format!(
            "compute subproblem: linearized budget violation {worst} persists at the trust boundary"
        )));
    }
    Ok(vars)
}

fn coordinate_boxes<T: Scalar>(prev: &BlockAVars<T>, bounds: &BlockABounds<T>) -> (Vec<T>, Vec<T>) {
    let m = prev.server_batches.len();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    lo.extend(std::iter::repeat(bounds.server_batch.0).take(m));
    hi.extend(std::iter::repeat(bounds.server_batch.1).take(m));
    lo.extend(std::iter::repeat(bounds.server_freq.0).take(m));
    hi.extend(std::iter::repeat(bounds.server_freq.1).take(m));
    for b in &prev.client_batches {
        let k = b.len();
        lo.extend(std::iter::repeat(bounds.client_batch.0).take(k));
        hi.extend(std::iter::repeat(bounds.client_batch.1).take(k));
        lo.extend(std::iter::repeat(bounds.client_freq.0).take(k));
        hi.extend(std::iter::repeat(bounds.client_freq.1).take(k));
    }
    (lo, hi)
}

struct LinearizedConstraints<T> {
    /// Latency: base linear part plus, per round, a max over per-user pieces.
    latency_base: LinearTerm<T>,
    latency_pieces: Vec<Vec<LinearTerm<T>>>,
    /// Energy: fully linear.
    energy: LinearTerm<T>,
    latency_scale: T,
    energy_scale: T,
}

/// Tangent plane of the ratio `scale * a/b` at `(a0, b0)`:
/// `(bias, coef_a, coef_b)` with value `bias + coef_a * a + coef_b * b`.
fn tangent_ratio<T: Scalar>(scale: T, a0: T, b0: T) -> (T, T, T) {
    let coef_a = scale / b0;
    let coef_b = -scale * a0 / (b0 * b0);
    let bias = scale * a0 / b0 - coef_a * a0 - coef_b * b0;
    (bias, coef_a, coef_b)
}

/// Tangent plane of the monomial `scale * a * b^2` at `(a0, b0)`.
fn tangent_quad_product<T: Scalar>(scale: T, a0: T, b0: T) -> (T, T, T) {
    let coef_a = scale * b0 * b0;
    let coef_b = scale * real::<T>(2.0) * a0 * b0;
    let bias = scale * a0 * b0 * b0 - coef_a * a0 - coef_b * b0;
    (bias, coef_a, coef_b)
}

fn build_linearized_constraints<T: Scalar>(
    prev: &BlockAVars<T>,
    coup: &BlockACouplings<T>,
    model: &ComputeModel<T>,
    budget: &Budget<T>,
) -> Result<LinearizedConstraints<T>> {
    let m = prev.server_batches.len();
    let dim = prev.flatten().len();
    let mut lat = LinearTerm::zero(dim);
    let mut en = LinearTerm::zero(dim);

    // index helpers into the flat layout
    let sb = |i: usize| i;
    let sf = |i: usize| m + i;
    let mut round_offsets = Vec::with_capacity(prev.client_batches.len());
    let mut at = 2 * m;
    for b in &prev.client_batches {
        round_offsets.push(at);
        at += 2 * b.len();
    }
    let cb = |n: usize, j: usize| round_offsets[n] + j;
    let cf = |n: usize, j: usize, k: usize| round_offsets[n] + k + j;

    let c_over = model.flops_per_sample / model.server_cycle_factor;
    let e_coef = model.energy_scale * model.energy_exponent_coeff * model.cpu_power_coeff * c_over;
    for i in 0..m {
        let w0 = prev.server_batches[i];
        let f0 = prev.server_freqs[i];
        if !(f0 > T::zero()) || !(w0 > T::zero()) {
            return Err(Error::domain("expansion point must be strictly positive"));
        }
        // latency monomial W/f and energy monomial W f^2, both at (w0, f0)
        let (b0, ca, cf_) = tangent_ratio(c_over, w0, f0);
        lat.bias += b0;
        lat.coef[sb(i)] += ca;
        lat.coef[sf(i)] += cf_;
        let (b1, ea, ef) = tangent_quad_product(e_coef, w0, f0);
        en.bias += b1;
        en.coef[sb(i)] += ea;
        en.coef[sf(i)] += ef;
    }

    // Per-round, per-user latency chains: the payload times are fixed
    // couplings; the compute term b/f is expanded at the previous point.
    let mut pieces = Vec::with_capacity(prev.client_batches.len());
    for n in 0..prev.client_batches.len() {
        let k = prev.client_batches[n].len();
        let mut per_user = Vec::with_capacity(k);
        en.bias += coup.server_power * coup.t1[n];
        for j in 0..k {
            let u = coup.selected[n][j];
            let cu = model.flops_per_sample
                / *model
                    .client_cycle_factor
                    .get(u)
                    .ok_or_else(|| Error::dimension(format!("user {u} outside compute model")))?;
            let b0 = prev.client_batches[n][j];
            let f0 = prev.client_freqs[n][j];
            if !(f0 > T::zero()) || !(b0 > T::zero()) {
                return Err(Error::domain("expansion point must be strictly positive"));
            }
            let mut piece = LinearTerm::zero(dim);
            let (bias, cb_, cf2) = tangent_ratio(cu, b0, f0);
            piece.bias = coup.t1[n] + coup.t2[n] + bias;
            piece.coef[cb(n, j)] = cb_;
            piece.coef[cf(n, j, k)] = cf2;
            per_user.push(piece);

            // energy: upload at fixed power plus compute kappa * f^2 * cycles
            en.bias += coup.powers[n][j] * coup.t2[n];
            let (be, ea, ef) = tangent_quad_product(model.client_power_coeff[u] * cu, b0, f0);
            en.bias += be;
            en.coef[cb(n, j)] += ea;
            en.coef[cf(n, j, k)] += ef;
        }
        pieces.push(per_user);
    }

    lat.bias -= budget.latency_cap_s;
    en.bias -= budget.energy_cap_j;

    Ok(LinearizedConstraints {
        latency_base: lat,
        latency_pieces: pieces,
        energy: en,
        latency_scale: budget.latency_cap_s,
        energy_scale: budget.energy_cap_j,
    })
}

impl<T: Scalar> LinearizedConstraints<T> {
    /// Normalized violations `(latency, energy)` and the argmax users.
    fn violations(&self, z: &[T]) -> (T, Vec<usize>, T) {
        let mut lat = self.latency_base.eval(z);
        let mut arg = Vec::with_capacity(self.latency_pieces.len());
        for per_user in &self.latency_pieces {
            let mut best = T::neg_infinity();
            let mut bi = 0;
            for (j, p) in per_user.iter().enumerate() {
                let v = p.eval(z);
                if v > best {
                    best = v;
                    bi = j;
                }
            }
            if per_user.is_empty() {
                best = T::zero();
            }
            lat += best;
            arg.push(bi);
        }
        let en = self.energy.eval(z);
        (lat / self.latency_scale, arg, en / self.energy_scale)
    }
}

fn worst_violation<T: Scalar>(z: &[T], cons: &LinearizedConstraints<T>) -> T {
    let (lat, _, en) = cons.violations(z);
    lat.max(en).max(T::zero())
}

fn vars_eval<T: Scalar>(
    z: &[T],
    shape: &BlockAVars<T>,
    objective: &dyn BlockAObjective<T>,
    cons: &LinearizedConstraints<T>,
    pen: T,
    lo: &[T],
    hi: &[T],
) -> (T, Vec<T>) {
    let vars = shape.unflatten_like(z);
    let f = objective.value(&vars);
    let gv = objective.gradient(&vars).flatten();
    let (lat, arg, en) = cons.violations(z);
    let lat_pos = lat.max(T::zero());
    let en_pos = en.max(T::zero());
    let total = f + pen * (lat_pos * lat_pos + en_pos * en_pos);
    let dim = z.len();
    let mut grad = gv;
    if lat_pos > T::zero() {
        let s = real::<T>(2.0) * pen * lat_pos / cons.latency_scale;
        for i in 0..dim {
            grad[i] += s * cons.latency_base.coef[i];
        }
        for (n, per_user) in cons.latency_pieces.iter().enumerate() {
            if let Some(p) = per_user.get(arg[n]) {
                for i in 0..dim {
                    grad[i] += s * p.coef[i];
                }
            }
        }
    }
    if en_pos > T::zero() {
        let s = real::<T>(2.0) * pen * en_pos / cons.energy_scale;
        for i in 0..dim {
            grad[i] += s * cons.energy.coef[i];
        }
    }
    // chain rule into normalized coordinates
    for i in 0..dim {
        grad[i] *= hi[i] - lo[i];
    }
    (total, grad)
}
