//! Joint planner: enumerates pretraining/fine-tuning round counts and, for
//! each pair, alternates between the compute subproblem (batches and
//! frequencies under the budgets) and the consistency subproblem (gains,
//! response copies, beamformers, element positions) until the bound value
//! settles. The winner is the feasible pair with the smallest bound.

use crate::error::{Error, Result};
use crate::fl::{matched_receive_scale, mismatch_noise_proxy, PsiInputs, PsiModel};
use crate::linalg::C;
use crate::resource::{
    check_power, pretrain_latency, round_latency, sca_surrogate_block_a, BlockABounds,
    BlockACouplings, BlockASettings, BlockAVars, BlockAObjective, Budget, ComputeModel,
    PhasePlan, RoundPlan, total_energy,
};
use crate::scalar::{count, real, Scalar};

use super::pdd::{solve_block_b, BlockBConfig, BlockBProblem, BlockBState};
use super::SolverReport;

/// Everything the joint planner needs: the channel-side problem with an
/// initial layout, the bound ingredients, and the compute-side budgets.
#[derive(Debug, Clone)]
pub struct HybridProblem<T> {
    /// Angles, wavelength, and rate bookkeeping; the time caps inside are
    /// ignored and refilled per candidate pair.
    pub channel: BlockBProblem<T>,
    pub init: BlockBState<T>,
    /// Bound ingredients; `analog_error_sq` is overwritten per pair.
    pub psi: PsiInputs<T>,
    pub compute: ComputeModel<T>,
    pub budget: Budget<T>,
    pub bounds: BlockABounds<T>,
    /// Gradient-norm bound feeding the aggregation-error proxy.
    pub grad_norm_bound: T,
    /// Receiver noise variance per coordinate.
    pub noise_variance: T,
    /// Coordinates carried per analog aggregation.
    pub update_dim: usize,
}

impl<T: Scalar> HybridProblem<T> {
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.init.validate()?;
        self.compute.validate()?;
        self.budget.validate()?;
        self.bounds.validate()?;
        let u = self.channel.num_users();
        if self.init.aux.num_users() != u || self.compute.num_users() != u {
            return Err(Error::dimension("user counts disagree across the problem"));
        }
        if (self.budget.payload_bits - self.channel.rates.payload_bits).abs()
            > real::<T>(1e-9) * self.budget.payload_bits
        {
            return Err(Error::config(
                "budget and rate context disagree on the payload size",
            ));
        }
        if !(self.grad_norm_bound >= T::zero()) || !(self.noise_variance >= T::zero()) {
            return Err(Error::domain("proxy inputs must be nonnegative"));
        }
        if self.update_dim == 0 {
            return Err(Error::domain("aggregation dimension must be positive"));
        }
        if !(self.bounds.client_batch.0 >= T::one()) || !(self.bounds.server_batch.0 >= T::one()) {
            return Err(Error::config(
                "batch lower bounds below one would quantize to empty batches",
            ));
        }
        Ok(())
    }
}

/// Knobs for the joint enumeration.
#[derive(Debug, Clone)]
pub struct HybridConfig<T> {
    pub pretrain_candidates: Vec<usize>,
    pub finetune_candidates: Vec<usize>,
    /// Relative change of the bound value at which a pair's alternation
    /// stops.
    pub rel_tol: f64,
    pub max_alternations: usize,
    pub block_b: BlockBConfig,
    pub block_a: BlockASettings<T>,
}

impl<T: Scalar> Default for HybridConfig<T> {
    fn default() -> Self {
        HybridConfig {
            pretrain_candidates: Vec::new(),
            finetune_candidates: Vec::new(),
            rel_tol: 1e-4,
            max_alternations: 50,
            block_b: BlockBConfig::default(),
            block_a: BlockASettings::default(),
        }
    }
}

impl<T: Scalar> HybridConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_candidates.is_empty() || self.finetune_candidates.is_empty() {
            return Err(Error::config("need at least one candidate round count per phase"));
        }
        if self.finetune_candidates.iter().any(|&n| n == 0) {
            return Err(Error::config("fine-tuning needs at least one round"));
        }
        if !(self.rel_tol > 0.0) || self.max_alternations == 0 {
            return Err(Error::config("tolerance and alternation budget must be positive"));
        }
        self.block_b.validate()
    }
}

/// How one candidate pair fared.
#[derive(Debug, Clone)]
pub struct PairOutcome<T> {
    pub pretrain_rounds: usize,
    pub finetune_rounds: usize,
    pub objective: Option<T>,
    pub feasible: bool,
    pub reason: Option<String>,
    pub alternations: usize,
    pub consistency_sweeps: usize,
}

/// The winning joint plan.
#[derive(Debug, Clone)]
pub struct JointDecision<T> {
    pub plan: PhasePlan,
    pub vars: BlockAVars<T>,
    pub round_plans: Vec<RoundPlan<T>>,
    pub state: BlockBState<T>,
    /// Broadcast and upload windows shared by every fine-tuning round.
    pub t1: T,
    pub t2: T,
    /// Per-round aggregation error fed to the bound.
    pub analog_error_sq: Vec<T>,
    pub objective: T,
}

enum PairResult<T> {
    Feasible(Box<JointDecision<T>>, Vec<f64>, Vec<f64>, bool),
    Infeasible(String),
}

struct PairRun<T> {
    result: PairResult<T>,
    alternations: usize,
    sweeps: usize,
}

fn midpoint<T: Scalar>(b: (T, T)) -> T {
    (b.0 + b.1) / real::<T>(2.0)
}

fn init_vars<T: Scalar>(
    m_rounds: usize,
    n_rounds: usize,
    users: usize,
    bounds: &BlockABounds<T>,
) -> BlockAVars<T> {
    BlockAVars {
        server_batches: vec![midpoint(bounds.server_batch); m_rounds],
        server_freqs: vec![midpoint(bounds.server_freq); m_rounds],
        client_batches: vec![vec![midpoint(bounds.client_batch); users]; n_rounds],
        client_freqs: vec![vec![midpoint(bounds.client_freq); users]; n_rounds],
    }
}

/// Per-round aggregation error proxies for the current batch plan and
/// uplink gains, under a matched receive scale.
fn analog_profile<T: Scalar>(
    problem: &HybridProblem<T>,
    state: &BlockBState<T>,
    vars: &BlockAVars<T>,
) -> Result<Vec<T>> {
    let u = problem.channel.num_users();
    let powers = &problem.channel.rates.powers;
    // amplitude seen by the receiver: beamformed gain times path amplitude
    let amplitudes: Vec<C<T>> = (0..u)
        .map(|i| state.aux.g_ul[i] * problem.channel.rates.ul_gain_sq_scale[i].sqrt())
        .collect();
    let eta = matched_receive_scale(&amplitudes, powers)?;
    let realized: Vec<T> = amplitudes
        .iter()
        .zip(powers)
        .map(|(g, &p)| g.norm_sqr().sqrt() * p.sqrt() / eta)
        .collect();
    let mut profile = Vec::with_capacity(vars.num_rounds());
    for batches in &vars.client_batches {
        let total: T = batches.iter().copied().sum();
        let target: Vec<T> = batches.iter().map(|&b| b / total).collect();
        profile.push(mismatch_noise_proxy(
            &realized,
            &target,
            problem.grad_norm_bound,
            problem.noise_variance / (eta * eta),
            problem.update_dim,
        )?);
    }
    Ok(profile)
}

/// Time caps for the consistency solve: whatever the latency budget leaves
/// after the server phase and the slowest per-round compute, split evenly
/// between broadcast and upload.
fn comm_caps<T: Scalar>(
    problem: &HybridProblem<T>,
    vars: &BlockAVars<T>,
) -> Result<Option<T>> {
    let server = pretrain_latency(&vars.server_batches, &vars.server_freqs, &problem.compute)?;
    let mut compute_total = T::zero();
    for (batches, freqs) in vars.client_batches.iter().zip(&vars.client_freqs) {
        let mut worst = T::zero();
        for (user, (&b, &f)) in batches.iter().zip(freqs).enumerate() {
            worst = worst.max(problem.compute.client_compute_latency(user, b, f)?);
        }
        compute_total += worst;
    }
    let slack = problem.budget.latency_cap_s - server - compute_total;
    if !(slack > T::zero()) {
        return Ok(None);
    }
    let per_round = slack / count::<T>(vars.num_rounds());
    Ok(Some(per_round / real::<T>(2.0)))
}

fn quantize_vars<T: Scalar>(vars: &BlockAVars<T>) -> BlockAVars<T> {
    BlockAVars {
        server_batches: vars.server_batches.iter().map(|&w| w.floor().max(T::one())).collect(),
        server_freqs: vars.server_freqs.clone(),
        client_batches: vars
            .client_batches
            .iter()
            .map(|row| row.iter().map(|&b| b.floor().max(T::one())).collect())
            .collect(),
        client_freqs: vars.client_freqs.clone(),
    }
}

fn run_pair<T: Scalar>(
    problem: &HybridProblem<T>,
    config: &HybridConfig<T>,
    m_rounds: usize,
    n_rounds: usize,
) -> Result<PairRun<T>> {
    let users = problem.channel.num_users();
    let mut vars = init_vars(m_rounds, n_rounds, users, &problem.bounds);
    let mut state = problem.init.clone();
    let mut sweeps = 0usize;
    let mut objective_trace: Vec<f64> = Vec::new();
    let mut violation_trace: Vec<f64> = Vec::new();
    let mut psi_prev: Option<T> = None;
    let mut alternations = 0usize;
    let mut settled = false;
    let max_reach = count::<T>(problem.init.geometry.len()).sqrt();

    let infeasible = |reason: String, alternations: usize, sweeps: usize| {
        Ok(PairRun {
            result: PairResult::Infeasible(reason),
            alternations,
            sweeps,
        })
    };

    let mut caps;
    loop {
        if alternations >= config.max_alternations {
            break;
        }
        alternations += 1;

        caps = match comm_caps(problem, &vars)? {
            Some(c) => c,
            None => {
                return infeasible(
                    "compute alone exhausts the latency budget".into(),
                    alternations,
                    sweeps,
                )
            }
        };
        let mut channel = problem.channel.clone();
        channel.rates.t1_cap = Some(caps);
        channel.rates.t2_cap = Some(caps);

        // a gain floor beyond ||theta|| = sqrt(elements) can never be met
        for user in 0..users {
            let floor = channel
                .rates
                .ul_gain_floor(user)?
                .max(channel.rates.dl_gain_floor(user)?);
            if floor > max_reach {
                return infeasible(
                    format!(
                        "user {user} needs gain {floor:.3} but the array tops out at {max_reach:.3}"
                    ),
                    alternations,
                    sweeps,
                );
            }
        }

        let outcome = solve_block_b(&channel, &state, &config.block_b)?;
        sweeps += outcome.sweeps;
        if !outcome.converged {
            return infeasible(
                format!(
                    "consistency residuals stalled at {}",
                    outcome.final_violation
                ),
                alternations,
                sweeps,
            );
        }
        state = outcome.state;
        violation_trace.push(
            outcome
                .final_violation
                .to_f64()
                .unwrap_or(f64::INFINITY),
        );

        // rebuild the bound around the fresh gains and solve the compute side
        let mut psi_inputs = problem.psi.clone();
        psi_inputs.analog_error_sq = analog_profile(problem, &state, &vars)?;
        let model = PsiModel::new(psi_inputs)?;
        let coup = BlockACouplings {
            t1: vec![state.aux.t1; n_rounds],
            t2: vec![state.aux.t2; n_rounds],
            powers: vec![problem.channel.rates.powers.clone(); n_rounds],
            selected: vec![(0..users).collect(); n_rounds],
            server_power: problem.channel.rates.server_power,
        };
        vars = match sca_surrogate_block_a(
            &vars,
            &coup,
            &problem.compute,
            &problem.budget,
            &problem.bounds,
            &model,
            &config.block_a,
        ) {
            Ok(v) => v,
            Err(Error::Infeasible(msg)) => {
                return infeasible(
                    format!("compute subproblem infeasible: {msg}"),
                    alternations,
                    sweeps,
                )
            }
            Err(e) => return Err(e),
        };
        let psi = model.value(&vars);
        objective_trace.push(psi.to_f64().unwrap_or(f64::INFINITY));
        if let Some(prev) = psi_prev {
            let scale = T::one().max(prev.abs());
            if (prev - psi).abs() <= real::<T>(config.rel_tol) * scale {
                settled = true;
                break;
            }
        }
        psi_prev = Some(psi);
    }

    // quantize and confirm the plan against the true constraints
    let vars_q = quantize_vars(&vars);
    let mut psi_inputs = problem.psi.clone();
    psi_inputs.analog_error_sq = analog_profile(problem, &state, &vars_q)?;
    let model = PsiModel::new(psi_inputs)?;
    let objective = model.value(&vars_q);

    let (server_batch, server_freq) = if m_rounds > 0 {
        (
            vars_q.server_batches[0].to_f64().unwrap_or(1.0) as u32,
            vars_q.server_freqs[0],
        )
    } else {
        (1, problem.bounds.server_freq.0)
    };
    let powers = problem.channel.rates.powers.clone();
    let mut plans = Vec::with_capacity(n_rounds);
    for n in 0..n_rounds {
        plans.push(RoundPlan {
            selected: (0..users).collect(),
            powers: powers.clone(),
            batch_sizes: vars_q.client_batches[n]
                .iter()
                .map(|&b| b.to_f64().unwrap_or(1.0) as u32)
                .collect(),
            cpu_freqs: vars_q.client_freqs[n].clone(),
            server_batch,
            server_freq,
        });
        if let Err(e) = plans[n].validate(users, &problem.budget) {
            return infeasible(format!("round {n} plan invalid: {e}"), alternations, sweeps);
        }
    }

    let rates_dl: Vec<T> = (0..users)
        .map(|i| problem.channel.rates.dl_rate(i, state.aux.g_dl[i]))
        .collect::<Result<_>>()?;
    let rates_ul: Vec<T> = (0..users)
        .map(|i| problem.channel.rates.ul_rate(i, state.aux.g_ul[i]))
        .collect::<Result<_>>()?;
    let payload = problem.budget.payload_bits;
    let mut latency =
        pretrain_latency(&vars_q.server_batches, &vars_q.server_freqs, &problem.compute)?;
    for plan in &plans {
        latency += round_latency(plan, &rates_dl, &rates_ul, payload, &problem.compute)?;
    }
    let tol = real::<T>(1e-6);
    if latency > problem.budget.latency_cap_s * (T::one() + tol) {
        return infeasible(
            format!(
                "quantized plan misses the latency cap: {latency} > {}",
                problem.budget.latency_cap_s
            ),
            alternations,
            sweeps,
        );
    }
    let pre_pairs: Vec<(T, T)> = vars_q
        .server_batches
        .iter()
        .zip(&vars_q.server_freqs)
        .map(|(&w, &f)| (w, f))
        .collect();
    let t1s = vec![state.aux.t1; n_rounds];
    let t2s = vec![state.aux.t2; n_rounds];
    let energy = total_energy(
        &pre_pairs,
        &plans,
        &t1s,
        &t2s,
        problem.channel.rates.server_power,
        &problem.compute,
    )?;
    if energy > problem.budget.energy_cap_j * (T::one() + tol) {
        return infeasible(
            format!(
                "quantized plan misses the energy cap: {energy} > {}",
                problem.budget.energy_cap_j
            ),
            alternations,
            sweeps,
        );
    }
    let power_report = check_power(&plans, &problem.budget)?;
    if !power_report.is_ok() {
        return infeasible(
            format!("quantized plan violates power caps: {:?}", power_report.violations),
            alternations,
            sweeps,
        );
    }

    let analog = analog_profile(problem, &state, &vars_q)?;
    let decision = JointDecision {
        plan: PhasePlan::new(m_rounds, n_rounds)?,
        vars: vars_q,
        round_plans: plans,
        t1: state.aux.t1,
        t2: state.aux.t2,
        state,
        analog_error_sq: analog,
        objective,
    };
    Ok(PairRun {
        result: PairResult::Feasible(Box::new(decision), objective_trace, violation_trace, settled),
        alternations,
        sweeps,
    })
}

/// Enumerate every candidate round pair, alternate the two subproblem
/// blocks on each, and keep the feasible pair with the smallest bound
/// value; ties go to fewer total rounds. Errors with the full reason list
/// when nothing is feasible.
pub fn hybrid_sca_pdd<T: Scalar>(
    problem: &HybridProblem<T>,
    config: &HybridConfig<T>,
) -> Result<(JointDecision<T>, SolverReport, Vec<PairOutcome<T>>)> {
    problem.validate()?;
    config.validate()?;

    let mut outcomes: Vec<PairOutcome<T>> = Vec::new();
    let mut best: Option<(JointDecision<T>, Vec<f64>, Vec<f64>, bool)> = None;
    let mut total_sweeps = 0usize;

    for &m_rounds in &config.pretrain_candidates {
        for &n_rounds in &config.finetune_candidates {
            let run = run_pair(problem, config, m_rounds, n_rounds)?;
            total_sweeps += run.sweeps;
            match run.result {
                PairResult::Infeasible(reason) => {
                    outcomes.push(PairOutcome {
                        pretrain_rounds: m_rounds,
                        finetune_rounds: n_rounds,
                        objective: None,
                        feasible: false,
                        reason: Some(reason),
                        alternations: run.alternations,
                        consistency_sweeps: run.sweeps,
                    });
                }
                PairResult::Feasible(decision, obj_trace, vio_trace, settled) => {
                    outcomes.push(PairOutcome {
                        pretrain_rounds: m_rounds,
                        finetune_rounds: n_rounds,
                        objective: Some(decision.objective),
                        feasible: true,
                        reason: None,
                        alternations: run.alternations,
                        consistency_sweeps: run.sweeps,
                    });
                    let replace = match &best {
                        None => true,
                        Some((cur, _, _, _)) => {
                            let scale = T::one().max(cur.objective.abs());
                            let diff = decision.objective - cur.objective;
                            if diff.abs() <= real::<T>(1e-12) * scale {
                                m_rounds + n_rounds
                                    < cur.plan.pretrain_rounds + cur.plan.finetune_rounds
                            } else {
                                diff < T::zero()
                            }
                        }
                    };
                    if replace {
                        best = Some((*decision, obj_trace, vio_trace, settled));
                    }
                }
            }
        }
    }

    match best {
        Some((decision, objective_trace, constraint_violation_trace, settled)) => {
            let report = SolverReport {
                objective_trace,
                constraint_violation_trace,
                inner_iterations: total_sweeps,
                converged: settled,
                best_mn: (decision.plan.pretrain_rounds, decision.plan.finetune_rounds),
            };
            report.validate()?;
            Ok((decision, report, outcomes))
        }
        None => Err(Error::AllPairsInfeasible {
            reasons: outcomes
                .into_iter()
                .map(|o| {
                    format!(
                        "M={} N={}: {}",
                        o.pretrain_rounds,
                        o.finetune_rounds,
                        o.reason.unwrap_or_else(|| "unknown".into())
                    )
                })
                .collect(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ArrayGeometry, Beamformer, BeamformerRole};
    use crate::antenna::subproblems::RateContext;
    use crate::antenna::AuxState;
    use crate::linalg::cnorm2;

    fn c(re: f64, im: f64) -> C<f64> {
        C::new(re, im)
    }

    fn toy_problem(users: usize, elements: usize, latency_cap: f64) -> HybridProblem<f64> {
        let channel = BlockBProblem {
            aoa: (0..users).map(|i| 0.4 + 0.5 * i as f64).collect(),
            aod: (0..users).map(|i| 1.1 - 0.3 * i as f64).collect(),
            wavelength: 1.0,
            rates: RateContext {
                payload_bits: 1e6,
                ul_bandwidth: vec![1e6; users],
                ul_noise_density: 1e-6,
                powers: vec![0.5; users],
                ul_gain_sq_scale: vec![2.0; users],
                dl_bandwidth: 1e6,
                dl_noise_density: 1e-6,
                server_power: 1.0,
                dl_gain_sq_scale: vec![2.0; users],
                t1_cap: None,
                t2_cap: None,
            },
        };
        let geometry = ArrayGeometry::uniform(elements, 0.6, 0.5, (0.0, 8.0)).unwrap();
        let (a_ul, a_dl) = channel.responses(&geometry).unwrap();
        let mut qv = vec![c(0.0, 0.0); elements];
        qv[0] = c(1.0, 0.0);
        let receive = Beamformer::new(qv.clone(), BeamformerRole::Receive).unwrap();
        let transmit = Beamformer::new(qv, BeamformerRole::Transmit).unwrap();
        let init = BlockBState {
            aux: AuxState {
                t1: 1.0,
                t2: 1.0,
                g_ul: vec![c(0.5, 0.0); users],
                g_dl: vec![c(0.5, 0.0); users],
                theta_ul: a_ul,
                theta_dl: a_dl,
            },
            receive,
            transmit,
            geometry,
        };
        HybridProblem {
            channel,
            init,
            psi: PsiInputs {
                initial_loss: 2.0,
                optimal_pre: 0.5,
                optimal_fine: 0.4,
                strong_convexity_pre: 1.0,
                strong_convexity_fine: 1.0,
                smoothness_pre: 2.0,
                smoothness_fine: 2.0,
                lr_pre: 0.5,
                lr_fine: 0.5,
                sample_variance_pre: 0.1,
                sample_variance_fine: 0.1,
                analog_error_sq: Vec::new(),
                shift_sensitivity: 1.0,
                shift_distance: 0.05,
            },
            compute: ComputeModel {
                flops_per_sample: 1e6,
                server_cycle_factor: 1.0,
                client_cycle_factor: vec![1.0; users],
                cpu_power_coeff: 1e-27,
                client_power_coeff: vec![1e-27; users],
                energy_scale: 1.0,
                energy_exponent_coeff: 1.0,
            },
            budget: Budget {
                latency_cap_s: latency_cap,
                energy_cap_j: 50.0,
                payload_bits: 1e6,
                avg_power_caps: vec![0.5; users],
                max_power: 0.5,
                max_users: users,
            },
            bounds: BlockABounds {
                server_batch: (1.0, 256.0),
                server_freq: (1e8, 2e9),
                client_batch: (1.0, 64.0),
                client_freq: (1e8, 2e9),
            },
            grad_norm_bound: 1.0,
            noise_variance: 1e-4,
            update_dim: 16,
        }
    }

    fn toy_config(ms: &[usize], ns: &[usize]) -> HybridConfig<f64> {
        HybridConfig {
            pretrain_candidates: ms.to_vec(),
            finetune_candidates: ns.to_vec(),
            ..HybridConfig::default()
        }
    }

    #[test]
    fn single_pair_produces_a_validated_plan() {
        let problem = toy_problem(2, 2, 30.0);
        let config = toy_config(&[1], &[2]);
        let (decision, report, outcomes) = hybrid_sca_pdd(&problem, &config).unwrap();
        assert_eq!(report.best_mn, (1, 2));
        assert_eq!(outcomes.len(), 1);
        assert!(outcomes[0].feasible);
        assert!(!report.objective_trace.is_empty());
        assert!(report.inner_iterations >= 1);
        assert_eq!(decision.round_plans.len(), 2);
        for plan in &decision.round_plans {
            plan.validate(2, &problem.budget).unwrap();
        }
        // the consistency state really is consistent and unit-normalized
        decision.state.validate().unwrap();
        assert!((cnorm2(decision.state.receive.weights()).sqrt() - 1.0).abs() < 1e-9);
        assert!(decision.analog_error_sq.len() == 2);
        assert!(decision.objective.is_finite());
        // communication windows fit inside the latency budget
        assert!(decision.t1 + decision.t2 < 30.0);
    }

    #[test]
    fn hopeless_round_count_is_filtered_with_a_reason() {
        let problem = toy_problem(2, 4, 3.0);
        let config = toy_config(&[1], &[2, 8]);
        let (decision, report, outcomes) = hybrid_sca_pdd(&problem, &config).unwrap();
        assert_eq!(report.best_mn, (1, 2));
        assert_eq!(decision.plan.finetune_rounds, 2);
        let bad = outcomes
            .iter()
            .find(|o| o.finetune_rounds == 8)
            .expect("the 8-round pair was enumerated");
        assert!(!bad.feasible);
        assert!(bad.reason.is_some(), "infeasible pair must say why");
        let good = outcomes.iter().find(|o| o.finetune_rounds == 2).unwrap();
        assert!(good.feasible);
    }

    #[test]
    fn impossible_budget_reports_every_pair() {
        let problem = toy_problem(2, 2, 0.01);
        let config = toy_config(&[1], &[1, 2]);
        match hybrid_sca_pdd(&problem, &config) {
            Err(Error::AllPairsInfeasible { reasons }) => {
                assert_eq!(reasons.len(), 2);
                assert!(reasons.iter().all(|r| r.contains("M=1")));
            }
            other => panic!("expected AllPairsInfeasible, got {other:?}"),
        }
    }

    #[test]
    fn exact_ties_prefer_fewer_rounds() {
        // no gap, no noise, no shift: the bound equals the fine-phase
        // optimum for every pair, so the tie-break must pick the smallest
        let mut problem = toy_problem(2, 2, 30.0);
        problem.psi.initial_loss = 0.4;
        problem.psi.optimal_pre = 0.4;
        problem.psi.optimal_fine = 0.4;
        problem.psi.sample_variance_pre = 0.0;
        problem.psi.sample_variance_fine = 0.0;
        problem.psi.shift_distance = 0.0;
        problem.grad_norm_bound = 0.0;
        problem.noise_variance = 0.0;
        let config = toy_config(&[1, 2], &[1, 2]);
        let (decision, report, outcomes) = hybrid_sca_pdd(&problem, &config).unwrap();
        assert!(outcomes.iter().all(|o| o.feasible));
        assert_eq!(report.best_mn, (1, 1));
        assert_eq!(decision.plan.pretrain_rounds + decision.plan.finetune_rounds, 2);
    }
}
