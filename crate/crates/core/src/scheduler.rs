//! Round-by-round client selection.
//!
//! Every policy consumes the same observables — per-user post-combining
//! amplitudes of the current channel draw — and returns the participating
//! set for the round, ties always broken toward the lowest user index.
//! The optimizing policy additionally re-solves the array layout and both
//! beamformers for the set it picked; the movable-antenna baseline improves
//! positions with a single greedy pass instead.

use crate::antenna::{
    solve_block_b, AuxState, BlockBConfig, BlockBProblem, BlockBState, RateContext,
};
use crate::channel::{ArrayGeometry, Beamformer, BeamformerRole, LinkState};
use crate::error::{Error, Result};
use crate::fl::mismatch_noise_proxy;
use crate::linalg::{cdot, cnorm, principal_component, C};
use crate::scalar::{count, real, Scalar};
use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Running tally of who participated so far. `total_selected` is the sum of
/// all per-round set sizes; it always equals the sum of `counts`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipationLedger {
    counts: Vec<u64>,
    rounds_elapsed: u64,
    total_selected: u64,
}

impl ParticipationLedger {
    pub fn new(num_users: usize) -> Result<Self> {
        if num_users == 0 {
            return Err(Error::dimension("ledger needs at least one user"));
        }
        Ok(ParticipationLedger {
            counts: vec![0; num_users],
            rounds_elapsed: 0,
            total_selected: 0,
        })
    }

    pub fn num_users(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn rounds_elapsed(&self) -> u64 {
        self.rounds_elapsed
    }

    pub fn total_selected(&self) -> u64 {
        self.total_selected
    }

    /// Book one round's participating set. Indices must be distinct and in
    /// range; an empty set still advances the round counter.
    pub fn record(&mut self, selected: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.counts.len()];
        for &u in selected {
            if u >= self.counts.len() {
                return Err(Error::dimension(format!("user {u} is out of range")));
            }
            if seen[u] {
                return Err(Error::domain(format!("user {u} selected twice in one round")));
            }
            seen[u] = true;
        }
        for &u in selected {
            self.counts[u] += 1;
        }
        self.rounds_elapsed += 1;
        self.total_selected += selected.len() as u64;
        Ok(())
    }

    /// Selection counts never leak or vanish: their sum must equal the
    /// number of bookings.
    pub fn is_conserved(&self) -> bool {
        self.counts.iter().sum::<u64>() == self.total_selected
    }

    /// Participation shares `counts / total`; all zero before any booking.
    pub fn shares<T: Scalar>(&self) -> Vec<T> {
        if self.total_selected == 0 {
            return vec![T::zero(); self.counts.len()];
        }
        let total = real::<T>(self.total_selected as f64);
        self.counts
            .iter()
            .map(|&c| real::<T>(c as f64) / total)
            .collect()
    }

    /// How much of the elapsed horizon user `u` already consumed.
    pub fn debt<T: Scalar>(&self, user: usize) -> T {
        let rounds = self.rounds_elapsed.max(1);
        real::<T>(self.counts[user] as f64) / real::<T>(rounds as f64)
    }
}

/// The selection policies the experiment loop can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    DigitalFedavg,
    TopkSnr,
    Gibbs,
    OtaNopc,
    MaGreedy,
    ScaPdd,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::DigitalFedavg,
        PolicyKind::TopkSnr,
        PolicyKind::Gibbs,
        PolicyKind::OtaNopc,
        PolicyKind::MaGreedy,
        PolicyKind::ScaPdd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::DigitalFedavg => "digital_fedavg",
            PolicyKind::TopkSnr => "topk_snr",
            PolicyKind::Gibbs => "gibbs",
            PolicyKind::OtaNopc => "ota_nopc",
            PolicyKind::MaGreedy => "ma_greedy",
            PolicyKind::ScaPdd => "sca_pdd",
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = PolicyKind::ALL.iter().map(|p| p.as_str()).collect();
            Error::config(format!(
                "unknown policy '{s}' (expected one of: {})",
                names.join(", ")
            ))
        })
    }
}

/// Per-run policy knobs shared by every selection rule.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig<T> {
    pub kind: PolicyKind,
    /// Participants per round.
    pub k: usize,
    pub gibbs_temperature: T,
    pub fairness_weight: T,
}

impl<T: Scalar> PolicyConfig<T> {
    pub fn validate(&self, num_users: usize) -> Result<()> {
        check_k(self.k, num_users)?;
        if !(self.gibbs_temperature > T::zero()) || !self.gibbs_temperature.is_finite() {
            return Err(Error::config("gibbs temperature must be positive and finite"));
        }
        if self.fairness_weight < T::zero() || !self.fairness_weight.is_finite() {
            return Err(Error::config("fairness weight must be nonnegative and finite"));
        }
        Ok(())
    }
}

fn check_k(k: usize, num_users: usize) -> Result<()> {
    if k == 0 || k > num_users {
        return Err(Error::config(format!(
            "k must satisfy 1 <= k <= num_users = {num_users}, got {k}"
        )));
    }
    Ok(())
}

/// The `k` best users by quality, indices ascending. Equal qualities go to
/// the lower index.
pub fn select_topk_snr<T: Scalar>(qualities: &[T], k: usize) -> Result<Vec<usize>> {
    check_k(k, qualities.len())?;
    for (u, &q) in qualities.iter().enumerate() {
        if !q.is_finite() || q < T::zero() {
            return Err(Error::domain(format!("user {u} has an invalid quality")));
        }
    }
    let mut order: Vec<usize> = (0..qualities.len()).collect();
    // Stable sort on descending quality keeps equal entries in index order.
    order.sort_by(|&a, &b| qualities[b].partial_cmp(&qualities[a]).unwrap());
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// What a randomized draw reports besides the set itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GibbsOutcome {
    pub selected: Vec<usize>,
    /// At least one slot had no positive weight left and was filled
    /// uniformly at random.
    pub uniform_fallback: bool,
}

/// Sample `k` distinct users with probability weights `(q_u / q_max)^(1/τ)`,
/// re-normalizing against the best remaining quality after every draw so
/// that `τ → 0` degenerates to the deterministic top-k rule. Zero-quality
/// users keep weight zero; if nothing has positive weight the draw is
/// uniform and flagged.
pub fn select_gibbs<T: Scalar>(
    qualities: &[T],
    k: usize,
    temperature: T,
    rng: &mut StdRng,
) -> Result<GibbsOutcome> {
    check_k(k, qualities.len())?;
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::config("gibbs temperature must be positive and finite"));
    }
    let q: Vec<f64> = qualities
        .iter()
        .enumerate()
        .map(|(u, &x)| {
            if !x.is_finite() || x < T::zero() {
                Err(Error::domain(format!("user {u} has an invalid quality")))
            } else {
                Ok(x.to_f64().unwrap())
            }
        })
        .collect::<Result<_>>()?;
    let tau = temperature.to_f64().unwrap();

    let mut available: Vec<usize> = (0..q.len()).collect();
    let mut selected = Vec::with_capacity(k);
    let mut uniform_fallback = false;
    for _ in 0..k {
        let q_top = available.iter().map(|&u| q[u]).fold(0.0_f64, f64::max);
        let pick = if q_top > 0.0 {
            let weights: Vec<f64> = available
                .iter()
                .map(|&u| if q[u] > 0.0 { ((q[u] / q_top).ln() / tau).exp() } else { 0.0 })
                .collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 && total.is_finite() {
                let r = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut hit = available.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if acc > r {
                        hit = i;
                        break;
                    }
                }
                hit
            } else {
                uniform_fallback = true;
                rng.random_range(0..available.len())
            }
        } else {
            uniform_fallback = true;
            rng.random_range(0..available.len())
        };
        selected.push(available.swap_remove(pick));
    }
    selected.sort_unstable();
    Ok(GibbsOutcome { selected, uniform_fallback })
}

fn binomial_at_most(n: usize, k: usize, cap: usize) -> bool {
    let mut acc = 1.0_f64;
    let k = k.min(n - k);
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
        if acc > cap as f64 {
            return false;
        }
    }
    true
}

/// All k-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        // Rightmost index that can still advance.
        let mut i = k;
        while i > 0 && c[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        c[i - 1] += 1;
        for j in i..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

/// Aggregation-error proxy of activating `set`: with full channel-inversion
/// power control the weakest member pins the common receive amplitude, so
/// the weights align exactly and only the amplified receiver noise is left.
fn set_proxy<T: Scalar>(
    set: &[usize],
    amps: &[T],
    pmax: T,
    noise_power: T,
    grad_norm_bound: T,
    update_dim: usize,
) -> Result<T> {
    let floor = set
        .iter()
        .map(|&u| amps[u])
        .fold(T::infinity(), |a, b| a.min(b));
    if !(floor > T::zero()) {
        return Ok(T::infinity());
    }
    let eta = count::<T>(set.len()) * floor * pmax.sqrt();
    let w = vec![T::one() / count::<T>(set.len()); set.len()];
    mismatch_noise_proxy(&w, &w, grad_norm_bound, noise_power / (eta * eta), update_dim)
}

/// Score every candidate set by its normalized error proxy plus the
/// weighted participation debt of its members, and keep the minimizer.
/// Exhaustive over all k-subsets while that stays small, greedy otherwise.
pub fn select_sca_set<T: Scalar>(
    amps: &[T],
    pmax: T,
    noise_power: T,
    grad_norm_bound: T,
    update_dim: usize,
    ledger: &ParticipationLedger,
    k: usize,
    fairness_weight: T,
) -> Result<Vec<usize>> {
    let n = amps.len();
    check_k(k, n)?;
    if ledger.num_users() != n {
        return Err(Error::dimension("ledger does not cover every user"));
    }
    let score_pass = |cands: &[Vec<usize>]| -> Result<Vec<usize>> {
        let proxies: Vec<T> = cands
            .iter()
            .map(|s| set_proxy(s, amps, pmax, noise_power, grad_norm_bound, update_dim))
            .collect::<Result<_>>()?;
        let psum: T = proxies.iter().copied().filter(|p| p.is_finite()).sum();
        let mut best: Option<(T, usize)> = None;
        for (i, s) in cands.iter().enumerate() {
            // Dead sets rank behind every live one but still compete on debt.
            let norm = if !proxies[i].is_finite() {
                real::<T>(2.0)
            } else if psum > T::zero() {
                proxies[i] / psum
            } else {
                T::zero()
            };
            let debt: T = s.iter().map(|&u| ledger.debt::<T>(u)).sum();
            let score = norm + fairness_weight * debt;
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, i));
            }
        }
        Ok(cands[best.unwrap().1].clone())
    };

    if binomial_at_most(n, k, 256) {
        score_pass(&combinations(n, k))
    } else {
        let mut set: Vec<usize> = Vec::with_capacity(k);
        for _ in 0..k {
            let cands: Vec<Vec<usize>> = (0..n)
                .filter(|u| !set.contains(u))
                .map(|u| {
                    let mut s = set.clone();
                    s.push(u);
                    s.sort_unstable();
                    s
                })
                .collect();
            set = score_pass(&cands)?;
        }
        Ok(set)
    }
}

/// Everything the optimizing policy needs to see about the current round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a, T> {
    pub link: &'a LinkState<T>,
    pub geometry: &'a ArrayGeometry<T>,
    /// Uplink channel draw at `geometry`, one vector per user.
    pub realizations: &'a [Vec<C<T>>],
    pub pmax: T,
    /// Receiver noise power on the aggregated symbol, W.
    pub noise_power: T,
    pub grad_norm_bound: T,
    pub update_dim: usize,
    pub payload_bits: T,
    pub t1_cap: Option<T>,
    pub t2_cap: Option<T>,
}

impl<T: Scalar> RoundContext<'_, T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.link.num_users();
        if self.realizations.len() != n {
            return Err(Error::dimension("one channel realization per user required"));
        }
        if self.realizations.iter().any(|h| h.len() != self.geometry.len()) {
            return Err(Error::dimension("realizations disagree with the array size"));
        }
        if !(self.pmax > T::zero()) || !(self.noise_power > T::zero()) {
            return Err(Error::domain("powers and noise must be positive"));
        }
        if self.grad_norm_bound < T::zero() || self.update_dim == 0 {
            return Err(Error::domain("update-norm bound and dimension must be usable"));
        }
        if !(self.payload_bits > T::zero()) {
            return Err(Error::domain("payload must be positive"));
        }
        Ok(())
    }

    pub fn amplitudes(&self) -> Vec<T> {
        self.realizations.iter().map(|h| cnorm(h)).collect()
    }
}

/// Output of the optimizing policy: the set plus the refreshed array state.
#[derive(Debug, Clone)]
pub struct ScaSelection<T> {
    pub selected: Vec<usize>,
    pub geometry: ArrayGeometry<T>,
    pub receive: Beamformer<T>,
    pub transmit: Beamformer<T>,
    /// The joint solve failed and the round fell back to top-k with the
    /// layout left untouched.
    pub fallback: bool,
    pub sweeps: usize,
}

/// Matched receive and transmit beams for `selected` without moving any
/// element: dominant direction of the drawn uplink channels and of the
/// line-of-sight downlink responses.
pub fn default_beams<T: Scalar>(
    ctx: &RoundContext<'_, T>,
    selected: &[usize],
) -> Result<(Beamformer<T>, Beamformer<T>)> {
    let hsel: Vec<Vec<C<T>>> = selected.iter().map(|&u| ctx.realizations[u].clone()).collect();
    let weights = vec![T::one(); selected.len()];
    let receive = Beamformer::new(principal_component(&hsel, &weights)?, BeamformerRole::Receive)?;
    let dl: Vec<Vec<C<T>>> = selected
        .iter()
        .map(|&u| ctx.link.dl_channel(ctx.geometry, u))
        .collect::<Result<_>>()?;
    let transmit = Beamformer::new(principal_component(&dl, &weights)?, BeamformerRole::Transmit)?;
    Ok((receive, transmit))
}

/// Pick the set minimizing the error-plus-debt score, then re-solve the
/// element layout and both beamformers for that set. A solve that fails or
/// stalls drops the round to plain top-k on the unchanged layout, flagged in
/// the outcome.
pub fn select_sca_pdd<T: Scalar>(
    ctx: &RoundContext<'_, T>,
    ledger: &ParticipationLedger,
    cfg: &PolicyConfig<T>,
    block_b: &BlockBConfig,
) -> Result<ScaSelection<T>> {
    ctx.validate()?;
    let amps = ctx.amplitudes();
    cfg.validate(amps.len())?;
    let selected = select_sca_set(
        &amps,
        ctx.pmax,
        ctx.noise_power,
        ctx.grad_norm_bound,
        ctx.update_dim,
        ledger,
        cfg.k,
        cfg.fairness_weight,
    )?;

    match refine_for_set(ctx, &selected, block_b) {
        Ok(Some((state, sweeps))) => Ok(ScaSelection {
            selected,
            geometry: state.geometry,
            receive: state.receive,
            transmit: state.transmit,
            fallback: false,
            sweeps,
        }),
        Ok(None) | Err(Error::Infeasible(_)) => {
            let selected = select_topk_snr(&amps, cfg.k)?;
            let (receive, transmit) = default_beams(ctx, &selected)?;
            Ok(ScaSelection {
                selected,
                geometry: ctx.geometry.clone(),
                receive,
                transmit,
                fallback: true,
                sweeps: 0,
            })
        }
        Err(e) => Err(e),
    }
}

/// Run the penalized consistency solve for one set. `None` means the solve
/// ran out of budget before the residuals closed.
fn refine_for_set<T: Scalar>(
    ctx: &RoundContext<'_, T>,
    selected: &[usize],
    block_b: &BlockBConfig,
) -> Result<Option<(BlockBState<T>, usize)>> {
    let link = ctx.link;
    let k = selected.len();
    let problem = BlockBProblem {
        aoa: selected.iter().map(|&u| link.aoa[u]).collect(),
        aod: selected.iter().map(|&u| link.aod[u]).collect(),
        wavelength: link.wavelength,
        rates: RateContext {
            payload_bits: ctx.payload_bits,
            ul_bandwidth: selected.iter().map(|&u| link.ul_bandwidth[u]).collect(),
            ul_noise_density: link.ul_noise_density,
            powers: vec![ctx.pmax; k],
            ul_gain_sq_scale: selected.iter().map(|&u| link.ul_path_gain[u].norm_sqr()).collect(),
            dl_bandwidth: link.dl_bandwidth,
            dl_noise_density: link.dl_noise_density,
            server_power: link.server_power,
            dl_gain_sq_scale: selected.iter().map(|&u| link.dl_path_gain[u].norm_sqr()).collect(),
            t1_cap: ctx.t1_cap,
            t2_cap: ctx.t2_cap,
        },
    };
    // A cap nobody can meet shows up as a modulus floor past the array's
    // coherent maximum; bail before the rate math can overflow.
    let max_reach = count::<T>(ctx.geometry.len()).sqrt();
    for i in 0..k {
        let floor = problem.rates.ul_gain_floor(i)?.max(problem.rates.dl_gain_floor(i)?);
        if !floor.is_finite() || floor > max_reach {
            return Ok(None);
        }
    }
    let geometry = ctx.geometry.clone();
    let (theta_ul, theta_dl) = problem.responses(&geometry)?;
    let hsel: Vec<Vec<C<T>>> = selected.iter().map(|&u| ctx.realizations[u].clone()).collect();
    let receive = Beamformer::new(
        principal_component(&hsel, &vec![T::one(); k])?,
        BeamformerRole::Receive,
    )?;
    let transmit = Beamformer::new(
        principal_component(&theta_dl, &vec![T::one(); k])?,
        BeamformerRole::Transmit,
    )?;
    let aux = AuxState {
        t1: T::one(),
        t2: T::one(),
        g_ul: theta_ul.iter().map(|th| cdot(receive.weights(), th)).collect(),
        g_dl: theta_dl.iter().map(|th| cdot(th, transmit.weights())).collect(),
        theta_ul,
        theta_dl,
    };
    let init = BlockBState { aux, receive, transmit, geometry };
    let out = solve_block_b(&problem, &init, block_b)?;
    Ok(if out.converged { Some((out.state, out.sweeps)) } else { None })
}

/// One coordinate pass of the movable-antenna baseline: each element in
/// turn scans a grid over its feasible slot (respecting spacing and the
/// aperture) and keeps any strict improvement of `score`. The incumbent
/// position is always a candidate, so the final score never drops below the
/// initial one.
#[derive(Debug, Clone)]
pub struct GreedyPassOutcome<T> {
    pub geometry: ArrayGeometry<T>,
    pub initial_score: T,
    pub final_score: T,
}

pub fn greedy_position_pass<T, F>(
    geometry: &ArrayGeometry<T>,
    grid_points: usize,
    mut score: F,
) -> Result<GreedyPassOutcome<T>>
where
    T: Scalar,
    F: FnMut(&ArrayGeometry<T>) -> Result<T>,
{
    if grid_points < 2 {
        return Err(Error::config("the line search needs at least two grid points"));
    }
    let mut current = geometry.clone();
    let initial_score = score(&current)?;
    let mut best = initial_score;
    let n = current.len();
    let (ap_lo, ap_hi) = current.aperture();
    for m in 0..n {
        let pos = current.positions().to_vec();
        let lo = if m == 0 { ap_lo } else { pos[m - 1] + current.min_spacing() };
        let hi = if m == n - 1 { ap_hi } else { pos[m + 1] - current.min_spacing() };
        if !(hi > lo) {
            continue;
        }
        for j in 0..grid_points {
            let x = lo + (hi - lo) * count::<T>(j) / count::<T>(grid_points - 1);
            let mut cand = pos.clone();
            cand[m] = x;
            // Boundary rounding can nick the spacing invariant; skip those.
            let Ok(cand) = current.with_positions(cand) else { continue };
            let s = score(&cand)?;
            if s > best {
                best = s;
                current = cand;
            }
        }
    }
    Ok(GreedyPassOutcome { geometry: current, initial_score, final_score: best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::matched_filter_snr;
    use crate::rng::{label, stream_rng};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C<f64> {
        C::new(re, im)
    }

    #[test]
    fn topk_orders_by_quality_and_breaks_ties_low() {
        assert_eq!(select_topk_snr(&[1.0, 3.0, 3.0, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_topk_snr(&[5.0, 5.0, 5.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(select_topk_snr(&[0.1, 0.9, 0.5], 3).unwrap(), vec![0, 1, 2]);
        assert!(select_topk_snr(&[1.0, 2.0], 3).is_err());
        assert!(select_topk_snr(&[1.0, -2.0], 1).is_err());
        assert!(select_topk_snr(&[1.0, f64::NAN], 1).is_err());
    }

    #[test]
    fn ledger_conserves_counts_and_normalizes_shares() {
        let mut ledger = ParticipationLedger::new(4).unwrap();
        ledger.record(&[0, 2]).unwrap();
        ledger.record(&[2]).unwrap();
        ledger.record(&[1, 2, 3]).unwrap();
        assert_eq!(ledger.counts(), &[1, 1, 3, 1]);
        assert_eq!(ledger.rounds_elapsed(), 3);
        assert!(ledger.is_conserved());
        let shares: Vec<f64> = ledger.shares();
        assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((shares[2] - 0.5).abs() < 1e-12);
        assert!((ledger.debt::<f64>(2) - 1.0).abs() < 1e-12);
        assert!(ledger.record(&[0, 0]).is_err());
        assert!(ledger.record(&[4]).is_err());
    }

    #[test]
    fn gibbs_equal_qualities_pass_a_uniformity_check() {
        // k = 1 over 5 users: chi-square on 4 degrees of freedom, 1% critical
        // value 13.2767.
        let mut rng = stream_rng(11, label::POLICY, 0, 0);
        let mut counts = [0u64; 5];
        let draws = 100_000;
        for _ in 0..draws {
            let out = select_gibbs(&[2.0; 5], 1, 1.0, &mut rng).unwrap();
            counts[out.selected[0]] += 1;
            assert!(!out.uniform_fallback);
        }
        let expect = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 13.2767, "chi2 = {chi2}, counts = {counts:?}");

        // k = 3 of 10: marginal inclusion stays uniform; within-round
        // exclusion only shrinks the spread, so the same bound applies on 9
        // degrees of freedom, 1% critical value 21.666.
        let mut counts = [0u64; 10];
        for _ in 0..draws {
            let out = select_gibbs(&[0.7; 10], 3, 1.0, &mut rng).unwrap();
            for u in out.selected {
                counts[u] += 1;
            }
        }
        let expect = 3.0 * draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 21.666, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn gibbs_freezes_to_topk_as_temperature_vanishes() {
        let qualities = [0.31, 0.9, 0.11, 0.84, 0.47, 0.02];
        let want = select_topk_snr(&qualities, 2).unwrap();
        let mut rng = stream_rng(12, label::POLICY, 0, 0);
        let mut agree = 0u64;
        let draws = 10_000;
        for _ in 0..draws {
            let out = select_gibbs(&qualities, 2, 1e-3, &mut rng).unwrap();
            if out.selected == want {
                agree += 1;
            }
        }
        assert!(agree as f64 / draws as f64 >= 0.99, "agreement {agree}/{draws}");
    }

    #[test]
    fn gibbs_all_zero_qualities_fall_back_to_uniform() {
        let mut rng = stream_rng(13, label::POLICY, 0, 0);
        let mut counts = [0u64; 4];
        for _ in 0..20_000 {
            let out = select_gibbs(&[0.0; 4], 2, 1.0, &mut rng).unwrap();
            assert!(out.uniform_fallback);
            assert_eq!(out.selected.len(), 2);
            assert!(out.selected[0] < out.selected[1]);
            for u in out.selected {
                counts[u] += 1;
            }
        }
        // Every user shows up roughly equally often.
        for &cnt in &counts {
            assert!((cnt as f64 - 10_000.0).abs() < 600.0, "counts = {counts:?}");
        }
    }

    #[test]
    fn sca_set_rotates_under_overwhelming_fairness_weight() {
        let amps = [1.0, 0.8, 0.6, 0.4];
        let mut ledger = ParticipationLedger::new(4).unwrap();
        let mut picks = Vec::new();
        for _ in 0..8 {
            let set =
                select_sca_set(&amps, 0.2, 1e-3, 1.0, 16, &ledger, 1, 1e9).unwrap();
            ledger.record(&set).unwrap();
            picks.push(set[0]);
        }
        // Perfect rotation: every user exactly twice.
        assert_eq!(ledger.counts(), &[2, 2, 2, 2]);
        let shares: Vec<f64> = ledger.shares();
        let jain = crate::metrics::jain_index(&shares).unwrap();
        assert!((jain - 1.0).abs() < 1e-12, "jain = {jain}");
        // And the first sweep visits users in index order off the tie-break.
        assert_eq!(&picks[..4], &[0, 1, 2, 3]);
    }

    #[test]
    fn sca_set_with_zero_fairness_repeats_the_strongest_set() {
        let amps = [0.3, 1.1, 0.9, 0.2, 0.7];
        let mut ledger = ParticipationLedger::new(5).unwrap();
        for _ in 0..6 {
            let set = select_sca_set(&amps, 0.2, 1e-3, 1.0, 16, &ledger, 2, 0.0).unwrap();
            // Weakest-member amplitude decides, so {1, 2} wins every round.
            assert_eq!(set, vec![1, 2]);
            ledger.record(&set).unwrap();
        }
    }

    #[test]
    fn sca_set_greedy_path_agrees_with_exhaustive_on_small_inputs() {
        // 30-choose-2 exceeds the enumeration cap, forcing the greedy path;
        // with zero fairness weight it must still find the exhaustive
        // optimum because the score is monotone in the weakest member.
        let amps: Vec<f64> = (0..30).map(|u| 0.2 + 0.07 * ((u * 13) % 11) as f64).collect();
        let ledger = ParticipationLedger::new(30).unwrap();
        let greedy = select_sca_set(&amps, 0.2, 1e-3, 1.0, 16, &ledger, 2, 0.0).unwrap();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for a in 0..30 {
            for b in (a + 1)..30 {
                let floor = amps[a].min(amps[b]);
                if best.as_ref().is_none_or(|(f, _)| floor > *f) {
                    best = Some((floor, vec![a, b]));
                }
            }
        }
        assert_eq!(greedy, best.unwrap().1);
    }

    fn toy_link(users: usize) -> LinkState<f64> {
        LinkState {
            ul_path_gain: (0..users).map(|u| c(1.0 - 0.1 * u as f64, 0.0)).collect(),
            dl_path_gain: vec![c(1.0, 0.0); users],
            aoa: (0..users).map(|u| 0.5 + 0.4 * u as f64).collect(),
            aod: (0..users).map(|u| 1.1 + 0.3 * u as f64).collect(),
            wavelength: 1.0,
            ul_bandwidth: vec![1e6; users],
            dl_bandwidth: 1e6,
            ul_noise_density: 1e-9,
            dl_noise_density: 1e-9,
            server_power: 1.0,
        }
    }

    fn toy_realizations(link: &LinkState<f64>, geometry: &ArrayGeometry<f64>) -> Vec<Vec<C<f64>>> {
        (0..link.num_users()).map(|u| link.ul_channel(geometry, u).unwrap()).collect()
    }

    #[test]
    fn sca_pdd_refines_the_layout_and_reports_unit_beams() {
        let link = toy_link(3);
        let geometry = ArrayGeometry::uniform(4, 0.6, 0.5, (0.0, 6.0)).unwrap();
        let realizations = toy_realizations(&link, &geometry);
        let ctx = RoundContext {
            link: &link,
            geometry: &geometry,
            realizations: &realizations,
            pmax: 0.2,
            noise_power: 1e-3,
            grad_norm_bound: 1.0,
            update_dim: 16,
            payload_bits: 1e5,
            t1_cap: None,
            t2_cap: None,
        };
        let ledger = ParticipationLedger::new(3).unwrap();
        let cfg = PolicyConfig {
            kind: PolicyKind::ScaPdd,
            k: 2,
            gibbs_temperature: 1.0,
            fairness_weight: 1.0,
        };
        let out = select_sca_pdd(&ctx, &ledger, &cfg, &BlockBConfig::default()).unwrap();
        assert!(!out.fallback);
        assert_eq!(out.selected.len(), 2);
        assert!((cnorm(out.receive.weights()) - 1.0).abs() < 1e-9);
        assert!((cnorm(out.transmit.weights()) - 1.0).abs() < 1e-9);
        // Layout invariants survive the solve.
        let pos = out.geometry.positions();
        for w in pos.windows(2) {
            assert!(w[1] - w[0] >= 0.5 - 1e-9);
        }
        assert!(pos[0] >= -1e-9 && pos[pos.len() - 1] <= 6.0 + 1e-9);
    }

    #[test]
    fn sca_pdd_impossible_caps_fall_back_to_topk_flagged() {
        let link = toy_link(3);
        let geometry = ArrayGeometry::uniform(4, 0.6, 0.5, (0.0, 6.0)).unwrap();
        let realizations = toy_realizations(&link, &geometry);
        let ctx = RoundContext {
            link: &link,
            geometry: &geometry,
            realizations: &realizations,
            pmax: 0.2,
            noise_power: 1e-3,
            grad_norm_bound: 1.0,
            update_dim: 16,
            payload_bits: 1e12,
            // No layout can push a petabit through in a microsecond.
            t1_cap: Some(1e-6),
            t2_cap: Some(1e-6),
        };
        let ledger = ParticipationLedger::new(3).unwrap();
        let cfg = PolicyConfig {
            kind: PolicyKind::ScaPdd,
            k: 1,
            gibbs_temperature: 1.0,
            fairness_weight: 1.0,
        };
        let out = select_sca_pdd(&ctx, &ledger, &cfg, &BlockBConfig::default()).unwrap();
        assert!(out.fallback);
        let amps = ctx.amplitudes();
        assert_eq!(out.selected, select_topk_snr(&amps, 1).unwrap());
        assert_eq!(out.geometry.positions(), geometry.positions());
    }

    #[test]
    fn eigen_combiner_beats_random_beams_on_the_weighted_power() {
        let link = toy_link(2);
        let geometry = ArrayGeometry::uniform(6, 0.6, 0.5, (0.0, 6.0)).unwrap();
        let hs = toy_realizations(&link, &geometry);
        let q = principal_component(&hs, &[1.0, 1.0]).unwrap();
        let power = |v: &[C<f64>]| -> f64 {
            hs.iter().map(|h| cdot(v, h).norm_sqr()).sum::<f64>() / cnorm2(v)
        };
        let best = power(&q);
        let mut rng = stream_rng(5, label::POLICY, 1, 0);
        for _ in 0..50 {
            let v: Vec<C<f64>> = (0..6)
                .map(|_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect();
            assert!(power(&v) <= best + 1e-9);
        }
    }

    use crate::linalg::cnorm2;

    #[test]
    fn greedy_pass_improves_single_user_snr_and_respects_spacing() {
        let link = toy_link(1);
        let geometry = ArrayGeometry::uniform(4, 0.5, 0.5, (0.0, 8.0)).unwrap();
        let score = |g: &ArrayGeometry<f64>| -> Result<f64> {
            let h = link.ul_channel(g, 0)?;
            matched_filter_snr(&h, 0.2, 1e-6)
        };
        let out = greedy_position_pass(&geometry, 16, score).unwrap();
        assert!(out.final_score >= out.initial_score);
        for w in out.geometry.positions().windows(2) {
            assert!(w[1] - w[0] >= 0.5 - 1e-12);
        }
        // Strictly monotone reruns from the improved layout never regress.
        let again = greedy_position_pass(&out.geometry, 16, score).unwrap();
        assert!(again.final_score >= out.final_score - 1e-12);
    }

    #[test]
    fn policy_names_round_trip_between_display_and_parse() {
        for kind in PolicyKind::ALL {
            let s = kind.to_string();
            assert_eq!(s.parse::<PolicyKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{s}\""));
        }
        assert!("fancy_policy".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn policy_config_rejects_out_of_range_knobs() {
        let mut cfg = PolicyConfig {
            kind: PolicyKind::TopkSnr,
            k: 3,
            gibbs_temperature: 1.0,
            fairness_weight: 1.0,
        };
        assert!(cfg.validate(10).is_ok());
        cfg.k = 0;
        assert!(cfg.validate(10).is_err());
        cfg.k = 11;
        let msg = cfg.validate(10).unwrap_err().to_string();
        assert!(msg.contains("1 <= k <= num_users"), "{msg}");
        cfg.k = 2;
        cfg.gibbs_temperature = 0.0;
        assert!(cfg.validate(10).is_err());
        cfg.gibbs_temperature = 1.0;
        cfg.fairness_weight = -0.1;
        assert!(cfg.validate(10).is_err());
    }

    proptest! {
        #[test]
        fn ledger_conservation_holds_for_any_booking_sequence(
            rounds in proptest::collection::vec(
                proptest::collection::btree_set(0usize..8, 0..=8), 0..20,
            )
        ) {
            let mut ledger = ParticipationLedger::new(8).unwrap();
            let mut total = 0u64;
            for set in &rounds {
                let sel: Vec<usize> = set.iter().copied().collect();
                ledger.record(&sel).unwrap();
                total += sel.len() as u64;
            }
            prop_assert!(ledger.is_conserved());
            prop_assert_eq!(ledger.total_selected(), total);
            prop_assert_eq!(ledger.rounds_elapsed(), rounds.len() as u64);
        }

        #[test]
        fn topk_returns_sorted_distinct_sets_of_size_k(
            qualities in proptest::collection::vec(0.0f64..100.0, 1..12),
            k_seed in 0usize..12,
        ) {
            let k = 1 + k_seed % qualities.len();
            let sel = select_topk_snr(&qualities, k).unwrap();
            prop_assert_eq!(sel.len(), k);
            prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
            let worst_in = sel.iter().map(|&u| qualities[u]).fold(f64::INFINITY, f64::min);
            let best_out = (0..qualities.len())
                .filter(|u| !sel.contains(u))
                .map(|u| qualities[u])
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(worst_in >= best_out);
        }
    }
}
