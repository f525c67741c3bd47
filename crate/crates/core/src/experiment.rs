//! End-to-end drivers: one two-phase training run under a scheduling policy,
//! the policy-comparison factorial, and a numerical audit that checks the
//! closed-form loss bound against Monte-Carlo training runs.

use crate::channel::{
    downlink_rate, draw_round_channel, matched_filter_snr, post_combining_snr, rate_from_gain,
    ArrayGeometry, Beamformer, BeamformerRole, LinkState,
};
use crate::config::{ExperimentConfig, Setup};
use crate::error::{Error, Result};
use crate::fl::{
    convergence_bound, finetune_round, matched_receive_scale, pretrain_step, wasserstein_1d,
    weighted_batch_gradient, BoundInputs, OtaConfig, Phase, SyntheticTask, TaskKind,
};
use crate::linalg::{cdot, principal_component, sym_eigenvalues, C};
use crate::metrics::{avg_snr_db, gini_coefficient, jain_index, perplexity};
use crate::resource::{round_comm_times, round_latency, total_energy, Budget, RoundPlan};
use crate::rng::{label, stream_rng};
use crate::runlog::{RoundRecord, RunLog, RunSummary};
use crate::scalar::Scalar;
use crate::scheduler::{
    greedy_position_pass, select_gibbs, select_sca_pdd, select_topk_snr, ParticipationLedger,
    PolicyKind, RoundContext,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

type C64 = C<f64>;

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Matched receive/transmit pair for a fixed selection: dominant direction
/// of the drawn uplink vectors and of the line-of-sight downlink responses.
fn beams_for(
    link: &LinkState<f64>,
    geometry: &ArrayGeometry<f64>,
    realizations: &[Vec<C64>],
    selected: &[usize],
) -> Result<(Beamformer<f64>, Beamformer<f64>)> {
    let ones = vec![1.0; selected.len()];
    let hsel: Vec<Vec<C64>> = selected.iter().map(|&u| realizations[u].clone()).collect();
    let receive = Beamformer::new(principal_component(&hsel, &ones)?, BeamformerRole::Receive)?;
    let dl: Vec<Vec<C64>> = selected
        .iter()
        .map(|&u| link.dl_channel(geometry, u))
        .collect::<Result<_>>()?;
    let transmit = Beamformer::new(principal_component(&dl, &ones)?, BeamformerRole::Transmit)?;
    Ok((receive, transmit))
}

fn budget_trip(cum_latency: f64, cum_energy: f64, budget: &Budget<f64>) -> Option<String> {
    if cum_latency > budget.latency_cap_s {
        return Some(format!(
            "latency budget exceeded: {cum_latency:.6} s > cap {} s",
            budget.latency_cap_s
        ));
    }
    if cum_energy > budget.energy_cap_j {
        return Some(format!(
            "energy budget exceeded: {cum_energy:.6} J > cap {} J",
            budget.energy_cap_j
        ));
    }
    None
}

/// One full run: digital pretraining on the server task, then federated
/// fine-tuning rounds under the configured scheduling policy. Every random
/// draw is keyed to `(seed, label, round, index)` streams, so a repeated
/// call reproduces the log byte for byte. A tripped budget cap stops the
/// run after the offending round and leaves the partial log plus a halt
/// marker in place.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunLog> {
    let setup = cfg.build(seed)?;
    let task = SyntheticTask::generate(&setup.task)?;
    let dim = task.dim();
    let num_users = task.num_users();
    let k = setup.policy.k;

    let mut w = vec![0.0; dim];
    let mut geometry = setup.geometry.clone();
    let mut ledger = ParticipationLedger::new(num_users)?;
    let mut records: Vec<RoundRecord> = Vec::new();
    let mut halt: Option<String> = None;
    let mut cum_latency = 0.0;
    let mut cum_energy = 0.0;
    let mut snrs_linear: Vec<f64> = Vec::new();

    for round in 1..=setup.pretrain_rounds as u64 {
        let (next, loss_before) = pretrain_step(
            &task,
            &w,
            setup.lr_pretrain,
            setup.server_batch as usize,
            seed,
            round,
        )?;
        w = next;
        let latency = setup
            .compute
            .server_round_latency(setup.server_batch as f64, setup.server_freq_hz)?;
        let energy = setup
            .compute
            .server_round_energy(setup.server_batch as f64, setup.server_freq_hz)?;
        cum_latency += latency;
        cum_energy += energy;
        records.push(RoundRecord {
            round,
            phase: Phase::Pretrain,
            selected: vec![],
            snr_db: None,
            latency_s: latency,
            energy_j: energy,
            loss: loss_before,
            ppl: perplexity(loss_before)?,
            mismatch_norm: 0.0,
            jain_so_far: None,
            gini_so_far: None,
            note: None,
        });
        if let Some(msg) = budget_trip(cum_latency, cum_energy, &setup.budget) {
            halt = Some(msg);
            break;
        }
    }

    if halt.is_none() {
        for fine in 1..=setup.finetune_rounds as u64 {
            let round = setup.pretrain_rounds as u64 + fine;
            let mut realizations = draw_round_channel(&setup.fading, &setup.link, &geometry, fine)?;
            let mut notes: Vec<&str> = Vec::new();

            // Matched-filter SNR at full power: the selection quality signal.
            let quality: Vec<f64> = realizations
                .iter()
                .map(|h| matched_filter_snr(h, setup.pmax_w, setup.noise_power_w))
                .collect::<Result<_>>()?;

            let (selected, receive, transmit) = match setup.policy.kind {
                PolicyKind::DigitalFedavg | PolicyKind::OtaNopc | PolicyKind::TopkSnr => {
                    let sel = select_topk_snr(&quality, k)?;
                    let (rx, tx) = beams_for(&setup.link, &geometry, &realizations, &sel)?;
                    (sel, rx, tx)
                }
                PolicyKind::Gibbs => {
                    let mut rng = stream_rng(seed, label::POLICY, fine, 0);
                    let out =
                        select_gibbs(&quality, k, setup.policy.gibbs_temperature, &mut rng)?;
                    if out.uniform_fallback {
                        notes.push("gibbs_uniform_fallback");
                    }
                    let (rx, tx) = beams_for(&setup.link, &geometry, &realizations, &out.selected)?;
                    (out.selected, rx, tx)
                }
                PolicyKind::MaGreedy => {
                    let sel = select_topk_snr(&quality, k)?;
                    let score_powers = vec![setup.pmax_w; sel.len()];
                    let ones = vec![1.0; sel.len()];
                    let pass =
                        greedy_position_pass(&geometry, setup.greedy_grid_points, |cand| {
                            let draws =
                                draw_round_channel(&setup.fading, &setup.link, cand, fine)?;
                            let hsel: Vec<Vec<C64>> =
                                sel.iter().map(|&u| draws[u].clone()).collect();
                            let q = Beamformer::new(
                                principal_component(&hsel, &ones)?,
                                BeamformerRole::Receive,
                            )?;
                            post_combining_snr(&hsel, &q, &score_powers, setup.noise_power_w)
                        })?;
                    geometry = pass.geometry;
                    realizations =
                        draw_round_channel(&setup.fading, &setup.link, &geometry, fine)?;
                    let (rx, tx) = beams_for(&setup.link, &geometry, &realizations, &sel)?;
                    (sel, rx, tx)
                }
                PolicyKind::ScaPdd => {
                    let ctx = RoundContext {
                        link: &setup.link,
                        geometry: &geometry,
                        realizations: &realizations,
                        pmax: setup.pmax_w,
                        noise_power: setup.receiver_noise_w,
                        grad_norm_bound: setup.grad_norm_bound,
                        update_dim: dim,
                        payload_bits: setup.budget.payload_bits,
                        t1_cap: setup.t1_cap_s,
                        t2_cap: setup.t2_cap_s,
                    };
                    let sel = select_sca_pdd(&ctx, &ledger, &setup.policy, &setup.block_b)?;
                    if sel.fallback {
                        notes.push("sca_topk_fallback");
                    }
                    geometry = sel.geometry;
                    realizations =
                        draw_round_channel(&setup.fading, &setup.link, &geometry, fine)?;
                    (sel.selected, sel.receive, sel.transmit)
                }
            };

            let gains: Vec<C64> = selected
                .iter()
                .map(|&u| cdot(receive.weights(), &realizations[u]))
                .collect();
            let amps: Vec<f64> = gains.iter().map(|g| g.norm()).collect();

            // Analog policies invert the effective channel so every selected
            // update lands with the same weight; the no-power-control arm
            // transmits flat-out and eats the misalignment, and the digital
            // arm aggregates exactly anyway.
            let inversion = !matches!(
                setup.policy.kind,
                PolicyKind::DigitalFedavg | PolicyKind::OtaNopc
            );
            let amp_min = amps.iter().copied().fold(f64::INFINITY, f64::min);
            let powers: Vec<f64> = if inversion && amp_min > 0.0 {
                amps.iter()
                    .map(|a| setup.pmax_w * (amp_min / a).powi(2))
                    .collect()
            } else {
                if inversion {
                    notes.push("uniform_power_zero_gain");
                }
                vec![setup.pmax_w; selected.len()]
            };

            let ota = if setup.policy.kind == PolicyKind::DigitalFedavg {
                OtaConfig::ideal(seed)
            } else {
                let scale = matched_receive_scale(&gains, &powers)?;
                if !(scale > 0.0) {
                    return Err(Error::numeric(
                        "receive scale vanished; the aggregated channel collapsed",
                    ));
                }
                OtaConfig {
                    noise_variance: setup.receiver_noise_w / (scale * scale),
                    receive_scale: scale,
                    mode: setup.ota_mode,
                    seed,
                }
            };

            let batches = vec![setup.batch_size; selected.len()];
            let step = finetune_round(
                &task,
                &w,
                &selected,
                &batches,
                setup.lr_finetune,
                &gains,
                &powers,
                &ota,
                seed,
                round,
            )?;
            w = step.weights;
            let mismatch_norm = l2(&step.outcome.mismatch);

            ledger.record(&selected)?;
            let shares = ledger.shares::<f64>();
            let jain = jain_index(&shares)?;
            let gini = gini_coefficient(&shares)?;

            let sel_realz: Vec<Vec<C64>> =
                selected.iter().map(|&u| realizations[u].clone()).collect();
            let snr = post_combining_snr(&sel_realz, &receive, &powers, setup.noise_power_w)?;
            let snr_db = if snr > 0.0 {
                snrs_linear.push(snr);
                Some(10.0 * snr.log10())
            } else {
                None
            };

            // Digital uploads share the band in orthogonal blocks; analog
            // superposition reuses the whole band.
            let rates_ul: Vec<f64> = selected
                .iter()
                .zip(gains.iter().zip(&powers))
                .map(|(&u, (g, &p))| {
                    let bw = if setup.policy.kind == PolicyKind::DigitalFedavg {
                        setup.link.ul_bandwidth[u] / selected.len() as f64
                    } else {
                        setup.link.ul_bandwidth[u]
                    };
                    rate_from_gain(bw, setup.link.ul_noise_density, g.norm_sqr(), p)
                })
                .collect::<Result<_>>()?;
            let rates_dl: Vec<f64> = selected
                .iter()
                .map(|&u| downlink_rate(&setup.link, &geometry, &transmit, u))
                .collect::<Result<_>>()?;
            let (t1, t2) = round_comm_times(&rates_dl, &rates_ul, setup.budget.payload_bits)?;

            let plan = RoundPlan {
                selected: selected.clone(),
                powers: powers.clone(),
                batch_sizes: batches,
                cpu_freqs: vec![setup.client_freq_hz; selected.len()],
                server_batch: setup.server_batch,
                server_freq: setup.server_freq_hz,
            };
            plan.validate(num_users, &setup.budget)?;
            let latency = round_latency(
                &plan,
                &rates_dl,
                &rates_ul,
                setup.budget.payload_bits,
                &setup.compute,
            )?;
            let energy = total_energy(
                &[],
                std::slice::from_ref(&plan),
                &[t1],
                &[t2],
                setup.link.server_power,
                &setup.compute,
            )?;
            cum_latency += latency;
            cum_energy += energy;

            records.push(RoundRecord {
                round,
                phase: Phase::Finetune,
                selected,
                snr_db,
                latency_s: latency,
                energy_j: energy,
                loss: step.loss,
                ppl: perplexity(step.loss)?,
                mismatch_norm,
                jain_so_far: Some(jain),
                gini_so_far: Some(gini),
                note: if notes.is_empty() {
                    None
                } else {
                    Some(notes.join("+"))
                },
            });
            if let Some(msg) = budget_trip(cum_latency, cum_energy, &setup.budget) {
                halt = Some(msg);
                break;
            }
        }
    }

    let last_fine = records.iter().rev().find(|r| r.phase == Phase::Finetune);
    let summary = RunSummary {
        policy: setup.policy.kind,
        k,
        seed,
        jain_r30: last_fine.and_then(|r| r.jain_so_far).unwrap_or(f64::NAN),
        gini_r30: last_fine.and_then(|r| r.gini_so_far).unwrap_or(f64::NAN),
        ppl_r30: last_fine.map(|r| r.ppl).unwrap_or(f64::NAN),
        avg_snr_db: if snrs_linear.is_empty() {
            f64::NAN
        } else {
            avg_snr_db(&snrs_linear)?
        },
        total_latency_s: cum_latency,
        total_energy_j: cum_energy,
    };
    Ok(RunLog {
        records,
        summary,
        halt,
    })
}

/// One cell of the comparison factorial. `log` and `error` are mutually
/// exclusive: a failed run keeps its coordinates and the error text so the
/// sweep can finish without it.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub policy: PolicyKind,
    pub k: usize,
    pub seed: u64,
    pub log: Option<RunLog>,
    pub error: Option<String>,
}

/// Factorial sweep output, cells in `policies x ks x seeds` order.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub cells: Vec<CellRun>,
}

/// Header of the aggregate table: one row per `(policy, k)` coordinate with
/// the seed-mean and sample standard deviation of every summary metric.
pub const AGGREGATE_HEADER: &str = "policy,k,runs,jain_mean,jain_std,gini_mean,gini_std,\
ppl_mean,ppl_std,avg_snr_db_mean,avg_snr_db_std,total_latency_s_mean,total_latency_s_std,\
total_energy_j_mean,total_energy_j_std";

impl CompareReport {
    /// Summaries of the completed cells at one `(policy, k)` coordinate.
    pub fn summaries(&self, policy: PolicyKind, k: usize) -> Vec<&RunSummary> {
        self.cells
            .iter()
            .filter(|c| c.policy == policy && c.k == k)
            .filter_map(|c| c.log.as_ref().map(|l| &l.summary))
            .collect()
    }

    /// Seed-mean of one summary metric at `(policy, k)`; `None` when every
    /// cell there failed.
    pub fn mean_metric<F: Fn(&RunSummary) -> f64>(
        &self,
        policy: PolicyKind,
        k: usize,
        metric: F,
    ) -> Option<f64> {
        let vals: Vec<f64> = self.summaries(policy, k).iter().map(|s| metric(s)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// One line per failed cell, naming its coordinates.
    pub fn failures(&self) -> Vec<String> {
        self.cells
            .iter()
            .filter_map(|c| {
                c.error
                    .as_ref()
                    .map(|e| format!("{} k={} seed={}: {e}", c.policy, c.k, c.seed))
            })
            .collect()
    }

    /// One CSV row per completed cell, in sweep order: the comparison
    /// table body, whose row count equals the factorial size when no cell
    /// failed.
    pub fn cell_rows(&self) -> Vec<String> {
        self.cells
            .iter()
            .filter_map(|c| c.log.as_ref().map(|l| l.summary.csv_row()))
            .collect()
    }

    /// One aggregate row per `(policy, k)` coordinate, in first-appearance
    /// order, following [`AGGREGATE_HEADER`]. Coordinates whose every cell
    /// failed are skipped.
    pub fn aggregate_rows(&self) -> Vec<String> {
        let mut coords: Vec<(PolicyKind, usize)> = Vec::new();
        for c in &self.cells {
            if !coords.contains(&(c.policy, c.k)) {
                coords.push((c.policy, c.k));
            }
        }
        let cols: [fn(&RunSummary) -> f64; 6] = [
            |s| s.jain_r30,
            |s| s.gini_r30,
            |s| s.ppl_r30,
            |s| s.avg_snr_db,
            |s| s.total_latency_s,
            |s| s.total_energy_j,
        ];
        let mut rows = Vec::new();
        for (policy, k) in coords {
            let sums = self.summaries(policy, k);
            if sums.is_empty() {
                continue;
            }
            let n = sums.len() as f64;
            let mut row = format!("{},{},{}", policy, k, sums.len());
            for f in cols {
                let mean = sums.iter().map(|s| f(s)).sum::<f64>() / n;
                let std = if sums.len() < 2 {
                    0.0
                } else {
                    (sums.iter().map(|s| (f(s) - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                };
                row.push_str(&format!(",{mean},{std}"));
            }
            rows.push(row);
        }
        rows
    }
}

/// Runs the `policies x ks x seeds` factorial on a bounded worker pool.
/// Cell order and per-cell results are independent of `workers`; equal
/// seeds share channel and data draws across policies on purpose, so
/// policy columns are paired comparisons.
pub fn run_compare(
    cfg: &ExperimentConfig,
    policies: &[PolicyKind],
    ks: &[usize],
    seeds: &[u64],
    workers: usize,
) -> Result<CompareReport> {
    if policies.is_empty() || ks.is_empty() || seeds.is_empty() {
        return Err(Error::dimension(
            "comparison needs at least one policy, one k, and one seed",
        ));
    }
    if workers == 0 {
        return Err(Error::config("workers must be at least 1"));
    }
    let mut specs: Vec<(PolicyKind, usize, u64)> = Vec::new();
    for &policy in policies {
        for &k in ks {
            for &seed in seeds {
                specs.push((policy, k, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let cells: Vec<CellRun> = pool.install(|| {
        specs
            .par_iter()
            .map(|&(policy, k, seed)| {
                let mut cell_cfg = cfg.clone();
                cell_cfg.policy.kind = policy;
                cell_cfg.policy.k = k;
                match run_experiment(&cell_cfg, seed) {
                    Ok(log) => CellRun {
                        policy,
                        k,
                        seed,
                        log: Some(log),
                        error: None,
                    },
                    Err(e) => CellRun {
                        policy,
                        k,
                        seed,
                        log: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    Ok(CompareReport { cells })
}

/// One grid point of the bound audit with the bound's decomposition, the
/// Monte-Carlo estimate it must dominate, and the containment flag that
/// backs the variance constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckPoint {
    pub pretrain_rounds: usize,
    pub finetune_rounds: usize,
    pub noise_variance: f64,
    pub bound_total: f64,
    pub pre_gap: f64,
    pub handoff: f64,
    pub fine_decay: f64,
    pub noise_floor: f64,
    pub grad_avg_term: f64,
    pub empirical_mean: f64,
    pub empirical_std: f64,
    pub slack: f64,
    pub violated: bool,
    pub trajectories_contained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub points: Vec<BoundCheckPoint>,
    pub seeds_per_point: usize,
    /// Radius of the ball (around the fine-phase optimum) on which the
    /// variance and shift constants were maximized.
    pub ball_radius: f64,
    pub shift_distance: f64,
    pub shift_sensitivity: f64,
    pub violations: usize,
    pub all_contained: bool,
}

/// Exact maximum of a degree-<=2 polynomial over the ball of radius `r`
/// around `center`, read off by central differences. The step is large on
/// purpose: with no third derivative the differences are exact and a wide
/// stencil keeps rounding noise out of the Hessian.
fn quad_sup_on_ball<F>(f: F, center: &[f64], radius: f64, dim: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let h = 0.5;
    let f0 = f(center)?;
    let mut grad = vec![0.0; dim];
    let mut hess = vec![vec![0.0; dim]; dim];
    let mut at = center.to_vec();
    for i in 0..dim {
        at[i] = center[i] + h;
        let fp = f(&at)?;
        at[i] = center[i] - h;
        let fm = f(&at)?;
        at[i] = center[i];
        grad[i] = (fp - fm) / (2.0 * h);
        hess[i][i] = (fp - 2.0 * f0 + fm) / (h * h);
    }
    for i in 0..dim {
        for j in (i + 1)..dim {
            at[i] = center[i] + h;
            at[j] = center[j] + h;
            let fpp = f(&at)?;
            at[j] = center[j] - h;
            let fpm = f(&at)?;
            at[i] = center[i] - h;
            let fmm = f(&at)?;
            at[j] = center[j] + h;
            let fmp = f(&at)?;
            at[i] = center[i];
            at[j] = center[j];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    let gnorm = l2(&grad);
    let lmax = sym_eigenvalues(&hess)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(f0 + radius * gnorm + 0.5 * radius * radius * lmax.max(0.0))
}

/// Replays one two-phase run the way the bound models it: `m` stochastic
/// server steps, then `n` rounds of the uniformly weighted federated
/// gradient plus injected per-coordinate Gaussian noise of variance
/// `sigma2`. Returns the final mixture loss and whether the whole
/// trajectory stayed inside the constants' ball.
fn simulate_two_phase(
    task: &SyntheticTask<f64>,
    setup: &Setup,
    m: usize,
    n: usize,
    sigma2: f64,
    run_seed: u64,
    center: &[f64],
    radius: f64,
) -> Result<(f64, bool)> {
    let dim = task.dim();
    let mut w = vec![0.0; dim];
    let mut contained = l2_dist(&w, center) <= radius;
    let users: Vec<usize> = (0..task.num_users()).collect();
    let batches = vec![setup.batch_size; users.len()];
    let noise_std = sigma2.sqrt();
    for round in 1..=m as u64 {
        let (next, _) = pretrain_step(
            task,
            &w,
            setup.lr_pretrain,
            setup.server_batch as usize,
            run_seed,
            round,
        )?;
        w = next;
        contained &= l2_dist(&w, center) <= radius;
    }
    for fine in 1..=n as u64 {
        let round = m as u64 + fine;
        let mut g = weighted_batch_gradient(task, &w, &users, &batches, run_seed, round)?;
        if noise_std > 0.0 {
            let mut rng = stream_rng(run_seed, label::OTA_NOISE, round, 0);
            for gi in g.iter_mut() {
                *gi += noise_std * f64::std_normal(&mut rng);
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= setup.lr_finetune * gi;
        }
        contained &= l2_dist(&w, center) <= radius;
    }
    Ok((task.uniform_mixture_loss(&w)?, contained))
}

/// Audits the closed-form loss bound on a `(pretrain, finetune, noise)`
/// grid. Every constant fed to the bound is computed from the task
/// instance itself: curvature from the Hessian, gradient variances and the
/// phase-shift gap maximized exactly over a ball that the report confirms
/// contains the trajectories, and the target shift measured as a 1-D
/// transport distance. Quadratic task only — the constants are read off by
/// differences that are exact just for polynomials of degree two.
pub fn run_bound_check(
    cfg: &ExperimentConfig,
    pretrain_grid: &[usize],
    finetune_grid: &[usize],
    noise_grid: &[f64],
    seeds_per_point: usize,
) -> Result<BoundCheckReport> {
    let setup = cfg.build(cfg.run.master_seed)?;
    if setup.task.kind != TaskKind::Quadratic {
        return Err(Error::config("bound check supports the quadratic task only"));
    }
    if pretrain_grid.is_empty() || finetune_grid.is_empty() || noise_grid.is_empty() {
        return Err(Error::dimension("bound-check grid axes must be nonempty"));
    }
    if finetune_grid.iter().any(|&n| n == 0) {
        return Err(Error::config("fine-tuning round counts in the grid must be >= 1"));
    }
    if noise_grid.iter().any(|&s| !s.is_finite() || s < 0.0) {
        return Err(Error::domain("noise variances must be finite and nonnegative"));
    }
    if seeds_per_point == 0 {
        return Err(Error::dimension("bound check needs at least one seed per point"));
    }

    let task = SyntheticTask::generate(&setup.task)?;
    let dim = task.dim();
    let num_users = task.num_users();
    let w0 = vec![0.0; dim];
    let (mu, rho) = task.curvature_bounds()?;
    let (w_pre, optimal_pre) = task.server_optimum()?;
    let (w_fine, optimal_fine) = task.uniform_mixture_optimum()?;
    let initial_loss = task.server_loss(&w0)?;

    let radius = 3.0 * (l2_dist(&w0, &w_pre) + l2_dist(&w_pre, &w_fine) + 1.0);

    let server_var_sup =
        quad_sup_on_ball(|w| task.gradient_variance(None, w), &w_fine, radius, dim)?;
    let grad_variance_pre = server_var_sup / setup.server_batch as f64;
    let mut user_var_sum = 0.0;
    for u in 0..num_users {
        user_var_sum +=
            quad_sup_on_ball(|w| task.gradient_variance(Some(u), w), &w_fine, radius, dim)?;
    }
    let uu = num_users as f64;
    let grad_variance_fine = user_var_sum / (uu * uu * setup.batch_size as f64);

    let sup_diff = quad_sup_on_ball(
        |w| Ok(task.uniform_mixture_loss(w)? - task.server_loss(w)?),
        &w_fine,
        radius,
        dim,
    )?;
    let mut pooled: Vec<f64> = Vec::new();
    for u in 0..num_users {
        pooled.extend_from_slice(task.user_target_values(u)?);
    }
    let transport = wasserstein_1d(task.server_target_values(), &pooled)?;
    // Encode the measured gap robustly: the product sensitivity * distance
    // is what enters the bound, so a zero transport distance must not wipe
    // out a real gap.
    let shift_distance = if transport > 0.0 { transport } else { 1.0 };
    let shift_sensitivity = sup_diff.max(0.0) / shift_distance;

    let mut points = Vec::new();
    let mut violations = 0;
    let mut all_contained = true;
    for &m in pretrain_grid {
        for &n in finetune_grid {
            for &sigma2 in noise_grid {
                let inputs = BoundInputs {
                    initial_loss,
                    optimal_pre,
                    optimal_fine,
                    strong_convexity_pre: mu,
                    strong_convexity_fine: mu,
                    smoothness_pre: rho,
                    smoothness_fine: rho,
                    lr_pre: setup.lr_pretrain,
                    lr_fine: setup.lr_finetune,
                    grad_variance_pre,
                    grad_variance_fine,
                    analog_error_sq: sigma2 * dim as f64,
                    shift_sensitivity,
                    shift_distance,
                    pretrain_rounds: m,
                    finetune_rounds: n,
                };
                let bound = convergence_bound(&inputs)?;

                let mut finals = Vec::with_capacity(seeds_per_point);
                let mut contained = true;
                for s in 0..seeds_per_point {
                    // Same seed list at every grid point: trajectories are
                    // common-random-number paired along each axis.
                    let run_seed = setup.seed.wrapping_add(1 + s as u64);
                    let (final_loss, inside) =
                        simulate_two_phase(&task, &setup, m, n, sigma2, run_seed, &w_fine, radius)?;
                    finals.push(final_loss);
                    contained &= inside;
                }
                let mean = finals.iter().sum::<f64>() / finals.len() as f64;
                let std = if finals.len() < 2 {
                    0.0
                } else {
                    (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                        / (finals.len() as f64 - 1.0))
                        .sqrt()
                };
                let violated = mean > bound.total;
                violations += violated as usize;
                all_contained &= contained;
                points.push(BoundCheckPoint {
                    pretrain_rounds: m,
                    finetune_rounds: n,
                    noise_variance: sigma2,
                    bound_total: bound.total,
                    pre_gap: bound.pre_gap,
                    handoff: bound.handoff,
                    fine_decay: bound.fine_decay,
                    noise_floor: bound.noise_floor,
                    grad_avg_term: bound.grad_avg_term,
                    empirical_mean: mean,
                    empirical_std: std,
                    slack: bound.total - mean,
                    violated,
                    trajectories_contained: contained,
                });
            }
        }
    }
    Ok(BoundCheckReport {
        points,
        seeds_per_point,
        ball_radius: radius,
        shift_distance,
        shift_sensitivity,
        violations,
        all_contained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.rounds.pretrain = 3;
        cfg.rounds.finetune = 4;
        cfg.task.dim = 8;
        cfg.task.num_samples = 24;
        cfg.task.num_users = 5;
        cfg.array.num_elements = 4;
        cfg.array.aperture_wavelengths = 2.0;
        cfg.policy.kind = PolicyKind::TopkSnr;
        cfg.policy.k = 2;
        cfg
    }

    #[test]
    fn same_config_same_seed_reproduces_the_log_bytes() {
        let cfg = tiny_cfg();
        let a = run_experiment(&cfg, 11).unwrap();
        let b = run_experiment(&cfg, 11).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        assert_eq!(a.summary.csv_row(), b.summary.csv_row());
    }

    #[test]
    fn zero_finetune_rounds_leave_only_pretrain_records() {
        let mut cfg = tiny_cfg();
        cfg.rounds.finetune = 0;
        let log = run_experiment(&cfg, 3).unwrap();
        assert_eq!(log.records.len(), 3);
        assert!(log.records.iter().all(|r| r.phase == Phase::Pretrain));
        assert!(log.summary.jain_r30.is_nan());
        assert!(log.summary.avg_snr_db.is_nan());
        assert!(log.halt.is_none());
    }

    #[test]
    fn digital_matches_ideal_analog_topk_weight_for_weight() {
        let mut digital = tiny_cfg();
        digital.policy.kind = PolicyKind::DigitalFedavg;
        let mut analog = tiny_cfg();
        analog.policy.kind = PolicyKind::TopkSnr;
        analog.ota.mode = "ideal".into();
        let a = run_experiment(&digital, 5).unwrap();
        let b = run_experiment(&analog, 5).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.selected, rb.selected);
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
        // Power control still differs, so the radio columns must not match.
        assert_ne!(
            a.summary.total_energy_j.to_bits(),
            b.summary.total_energy_j.to_bits()
        );
    }

    #[test]
    fn aligned_policies_cancel_the_mismatch_that_nopc_keeps() {
        let aligned = run_experiment(&tiny_cfg(), 9).unwrap();
        let mut cfg = tiny_cfg();
        cfg.policy.kind = PolicyKind::OtaNopc;
        let nopc = run_experiment(&cfg, 9).unwrap();
        let max_aligned = aligned
            .records
            .iter()
            .map(|r| r.mismatch_norm)
            .fold(0.0, f64::max);
        let max_nopc = nopc
            .records
            .iter()
            .map(|r| r.mismatch_norm)
            .fold(0.0, f64::max);
        assert!(max_aligned < 1e-12, "inversion should align weights exactly: {max_aligned}");
        assert!(max_nopc > 1e-6, "flat power must leave visible mismatch: {max_nopc}");
    }

    #[test]
    fn tiny_energy_budget_halts_with_a_partial_log() {
        let mut cfg = tiny_cfg();
        cfg.budget.energy_cap_j = 1e-9;
        let log = run_experiment(&cfg, 2).unwrap();
        assert_eq!(log.records.len(), 1);
        let halt = log.halt.expect("budget must halt the run");
        assert!(halt.contains("energy budget exceeded"), "{halt}");
        assert!(halt.contains("cap 0.000000001 J"), "{halt}");
    }

    #[test]
    fn compare_orders_cells_and_appends_aggregate_rows() {
        let mut cfg = tiny_cfg();
        cfg.rounds.pretrain = 1;
        cfg.rounds.finetune = 2;
        let policies = [PolicyKind::TopkSnr, PolicyKind::Gibbs];
        let report = run_compare(&cfg, &policies, &[1], &[1, 2], 2).unwrap();
        let coords: Vec<(PolicyKind, usize, u64)> =
            report.cells.iter().map(|c| (c.policy, c.k, c.seed)).collect();
        assert_eq!(
            coords,
            vec![
                (PolicyKind::TopkSnr, 1, 1),
                (PolicyKind::TopkSnr, 1, 2),
                (PolicyKind::Gibbs, 1, 1),
                (PolicyKind::Gibbs, 1, 2),
            ]
        );
        assert!(report.failures().is_empty());
        assert_eq!(report.cell_rows().len(), 4);
        let aggs = report.aggregate_rows();
        assert_eq!(aggs.len(), 2);
        assert!(aggs[0].starts_with("topk_snr,1,2,"));
        assert!(aggs[1].starts_with("gibbs,1,2,"));
        let mean = report
            .mean_metric(PolicyKind::TopkSnr, 1, |s| s.jain_r30)
            .unwrap();
        let sums = report.summaries(PolicyKind::TopkSnr, 1);
        let manual = (sums[0].jain_r30 + sums[1].jain_r30) / 2.0;
        assert_eq!(mean.to_bits(), manual.to_bits());
        // The aggregate row carries exactly that mean in its first metric
        // column.
        let jain_col: f64 = aggs[0].split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(jain_col.to_bits(), mean.to_bits());
    }

    #[test]
    fn singleton_grid_yields_one_cell_row_and_one_aggregate() {
        let mut cfg = tiny_cfg();
        cfg.rounds.pretrain = 1;
        cfg.rounds.finetune = 1;
        let report = run_compare(&cfg, &[PolicyKind::TopkSnr], &[1], &[3], 1).unwrap();
        assert_eq!(report.cell_rows().len(), 1);
        let aggs = report.aggregate_rows();
        assert_eq!(aggs.len(), 1);
        // A single run has zero sample deviation by convention.
        assert!(aggs[0].split(',').nth(4).unwrap().parse::<f64>().unwrap() == 0.0);
    }

    #[test]
    fn worker_count_never_changes_the_results() {
        let mut cfg = tiny_cfg();
        cfg.rounds.pretrain = 1;
        cfg.rounds.finetune = 2;
        let policies = [PolicyKind::TopkSnr, PolicyKind::OtaNopc];
        let serial = run_compare(&cfg, &policies, &[1, 2], &[4], 1).unwrap();
        let parallel = run_compare(&cfg, &policies, &[1, 2], &[4], 4).unwrap();
        assert_eq!(serial.cell_rows(), parallel.cell_rows());
        assert_eq!(serial.aggregate_rows(), parallel.aggregate_rows());
    }

    #[test]
    fn bound_check_refuses_the_logistic_task() {
        let mut cfg = tiny_cfg();
        cfg.task.kind = "logistic".into();
        let err = run_bound_check(&cfg, &[0], &[5], &[0.0], 3).unwrap_err();
        assert!(err.to_string().contains("quadratic"), "{err}");
    }

    #[test]
    fn bound_dominates_the_monte_carlo_runs_on_a_small_grid() {
        let mut cfg = tiny_cfg();
        cfg.task.dim = 6;
        cfg.task.num_samples = 24;
        cfg.task.num_users = 4;
        let report = run_bound_check(&cfg, &[0, 3], &[5, 10], &[0.0, 1e-3], 20).unwrap();
        assert_eq!(report.points.len(), 8);
        assert_eq!(report.violations, 0);
        assert!(report.all_contained);
        for p in &report.points {
            assert!(p.slack >= 0.0, "negative slack at {p:?}");
            assert!(!p.violated);
        }
    }

    #[test]
    fn averaged_iterate_term_halves_when_the_horizon_doubles() {
        let mut cfg = tiny_cfg();
        cfg.task.dim = 6;
        cfg.task.num_samples = 24;
        cfg.task.num_users = 4;
        let report = run_bound_check(&cfg, &[2], &[5, 10], &[1e-3], 4).unwrap();
        let short = &report.points[0];
        let long = &report.points[1];
        assert_eq!(short.finetune_rounds, 5);
        assert_eq!(long.finetune_rounds, 10);
        let ratio = short.grad_avg_term / long.grad_avg_term;
        assert!((ratio - 2.0).abs() < 1e-12, "ratio {ratio}");
        // Paired seeds: the decaying part of the bound shrinks faster than
        // the paired empirical means, so slack narrows with the horizon.
        assert!(long.slack <= short.slack + 1e-9);
    }

    #[test]
    fn ball_maximum_matches_a_random_probe_of_the_variance() {
        let cfg = tiny_cfg();
        let setup = cfg.build(1).unwrap();
        let task = SyntheticTask::generate(&setup.task).unwrap();
        let dim = task.dim();
        let center = vec![0.25; dim];
        let radius = 1.5;
        let sup =
            quad_sup_on_ball(|w| task.gradient_variance(None, w), &center, radius, dim).unwrap();
        let mut rng = stream_rng(42, label::INIT, 0, 0);
        for _ in 0..200 {
            let dir: Vec<f64> = (0..dim).map(|_| f64::std_normal(&mut rng)).collect();
            let norm = l2(&dir);
            let at: Vec<f64> = center
                .iter()
                .zip(&dir)
                .map(|(c, d)| c + radius * d / norm)
                .collect();
            let val = task.gradient_variance(None, &at).unwrap();
            assert!(val <= sup + 1e-9 * sup.abs().max(1.0), "probe {val} beats sup {sup}");
        }
    }
}
