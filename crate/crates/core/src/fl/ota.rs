//! Analog aggregation of client updates over the multiple-access channel.
//!
//! Every selected client transmits its update scaled by its (phase-aligned)
//! channel amplitude; the server reads the superposition and divides by the
//! receive scale `eta`. The realized combining weight of client `u` is thus
//! `|gain_u| * sqrt(p_u) / eta`, which in general differs from the intended
//! batch-proportional weight — that gap and the receiver noise are the two
//! analog error sources the rest of the system reasons about.

use crate::error::{Error, Result};
use crate::linalg::C;
use crate::rng::{label, stream_rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchMode {
    /// Aggregate with the intended weights exactly and skip noise; the
    /// digital reference point.
    Ideal,
    /// Aggregate with the channel-induced weights and add receiver noise.
    Modeled,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OtaConfig<T> {
    /// Per-coordinate variance of the additive receiver noise after
    /// scaling.
    pub noise_variance: T,
    /// Receive scale `eta` dividing the superposed signal.
    pub receive_scale: T,
    pub mode: MismatchMode,
    pub seed: u64,
}

impl<T: Scalar> OtaConfig<T> {
    /// Noise-free digital-equivalent configuration.
    pub fn ideal(seed: u64) -> Self {
        OtaConfig {
            noise_variance: T::zero(),
            receive_scale: T::one(),
            mode: MismatchMode::Ideal,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.receive_scale > T::zero()) || !self.receive_scale.is_finite() {
            return Err(Error::config("receive scale must be finite and positive"));
        }
        if self.noise_variance < T::zero() || !self.noise_variance.is_finite() {
            return Err(Error::config("noise variance must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// The receive scale under which the realized weights sum to one: the total
/// transmit amplitude of the selected set.
pub fn matched_receive_scale<T: Scalar>(gains: &[C<T>], powers: &[T]) -> Result<T> {
    if gains.is_empty() || gains.len() != powers.len() {
        return Err(Error::dimension("gains and powers disagree in length"));
    }
    let mut total = T::zero();
    for (g, &p) in gains.iter().zip(powers) {
        if p < T::zero() || !p.is_finite() {
            return Err(Error::domain("powers must be finite and nonnegative"));
        }
        total += (g.re * g.re + g.im * g.im).sqrt() * p.sqrt();
    }
    if !(total > T::zero()) {
        return Err(Error::infeasible(
            "every transmit amplitude is zero; the receive scale collapses",
        ));
    }
    Ok(total)
}

/// What one aggregation produced, with the analog error split out so it can
/// be audited afterwards.
#[derive(Debug, Clone)]
pub struct OtaOutcome<T> {
    /// The server's estimate of the weighted gradient (includes the noise).
    pub received: Vec<T>,
    /// `received - noise - sum_u omega_u * update_u`: the weight-mismatch
    /// part of the analog error.
    pub mismatch: Vec<T>,
    /// The additive noise that was applied.
    pub noise: Vec<T>,
    /// Weights the channel actually applied.
    pub realized_weights: Vec<T>,
    /// Batch-proportional weights the learner wanted.
    pub target_weights: Vec<T>,
    pub receive_scale: T,
}

impl<T: Scalar> OtaOutcome<T> {
    pub fn mismatch_norm(&self) -> T {
        crate::linalg::norm(&self.mismatch)
    }
    pub fn noise_norm(&self) -> T {
        crate::linalg::norm(&self.noise)
    }
}

/// Aggregate `updates` with intended weights proportional to `batch_sizes`.
/// `gains` are the post-combining complex channel gains and `powers` the
/// transmit powers of the same users, in the same order.
pub fn ota_aggregate<T: Scalar>(
    updates: &[Vec<T>],
    gains: &[C<T>],
    powers: &[T],
    batch_sizes: &[T],
    cfg: &OtaConfig<T>,
    round: u64,
) -> Result<OtaOutcome<T>> {
    cfg.validate()?;
    let k = updates.len();
    if k == 0 {
        return Err(Error::dimension("nothing to aggregate"));
    }
    if gains.len() != k || powers.len() != k || batch_sizes.len() != k {
        return Err(Error::dimension("per-user aggregation inputs disagree in length"));
    }
    let dim = updates[0].len();
    if dim == 0 || updates.iter().any(|u| u.len() != dim) {
        return Err(Error::dimension("updates must be nonempty and same-dimensional"));
    }
    let total_batch: T = batch_sizes.iter().copied().sum();
    if !(total_batch > T::zero()) || batch_sizes.iter().any(|&b| b < T::zero()) {
        return Err(Error::domain("batch sizes must be nonnegative with a positive sum"));
    }
    for &p in powers {
        if p < T::zero() || !p.is_finite() {
            return Err(Error::domain("powers must be finite and nonnegative"));
        }
    }

    let target: Vec<T> = batch_sizes.iter().map(|&b| b / total_batch).collect();
    let realized: Vec<T> = match cfg.mode {
        MismatchMode::Ideal => target.clone(),
        MismatchMode::Modeled => gains
            .iter()
            .zip(powers)
            .map(|(g, &p)| (g.re * g.re + g.im * g.im).sqrt() * p.sqrt() / cfg.receive_scale)
            .collect(),
    };

    let mut received = vec![T::zero(); dim];
    let mut mismatch = vec![T::zero(); dim];
    for (u, upd) in updates.iter().enumerate() {
        let dw = realized[u] - target[u];
        for i in 0..dim {
            received[i] += realized[u] * upd[i];
            mismatch[i] += dw * upd[i];
        }
    }

    let mut noise = vec![T::zero(); dim];
    if cfg.mode == MismatchMode::Modeled && cfg.noise_variance > T::zero() {
        let std = cfg.noise_variance.sqrt();
        let mut rng = stream_rng(cfg.seed, label::OTA_NOISE, round, 0);
        for (r, n) in received.iter_mut().zip(noise.iter_mut()) {
            *n = T::std_normal(&mut rng) * std;
            *r += *n;
        }
    }

    Ok(OtaOutcome {
        received,
        mismatch,
        noise,
        realized_weights: realized,
        target_weights: target,
        receive_scale: cfg.receive_scale,
    })
}

/// Pessimistic proxy for the expected squared analog error of one round:
/// worst-case weight-mismatch energy under a gradient-norm cap plus the
/// noise energy across all `dim` coordinates.
pub fn mismatch_noise_proxy<T: Scalar>(
    realized_weights: &[T],
    target_weights: &[T],
    grad_norm_bound: T,
    noise_variance: T,
    dim: usize,
) -> Result<T> {
    if realized_weights.len() != target_weights.len() || realized_weights.is_empty() {
        return Err(Error::dimension("weight vectors disagree in length"));
    }
    if grad_norm_bound < T::zero() || noise_variance < T::zero() {
        return Err(Error::domain("bounds must be nonnegative"));
    }
    let l1: T = realized_weights
        .iter()
        .zip(target_weights)
        .map(|(&r, &t)| (r - t).abs())
        .sum();
    let worst = l1 * grad_norm_bound;
    Ok(worst * worst + noise_variance * crate::scalar::count::<T>(dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> C<f64> {
        C::new(re, im)
    }

    #[test]
    fn ideal_mode_reproduces_the_weighted_mean_exactly() {
        let updates = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]];
        let cfg = OtaConfig::<f64>::ideal(7);
        let out = ota_aggregate(
            &updates,
            &[c(0.001, 0.0), c(1.0, 2.0), c(0.0, 5.0)],
            &[0.2, 0.01, 0.0],
            &[1.0, 2.0, 1.0],
            &cfg,
            0,
        )
        .unwrap();
        assert_relative_eq!(out.received[0], (1.0 + 0.0 + 2.0 * 1.0) / 4.0, epsilon = 1e-15);
        assert_relative_eq!(out.received[1], (0.0 + 2.0 * 1.0 + 2.0) / 4.0, epsilon = 1e-15);
        assert_eq!(out.mismatch_norm(), 0.0);
        assert_eq!(out.noise_norm(), 0.0);
    }

    #[test]
    fn matched_scale_alignes_equal_amplitudes_with_equal_batches() {
        // |g|sqrt(p) identical across users and equal batches: with the
        // matched receive scale the realized weights hit the target exactly
        let updates = vec![vec![3.0], vec![-1.0]];
        let gains = [c(0.6, 0.8), c(0.0, 1.0)]; // both modulus 1
        let powers = [0.09, 0.09];
        let eta = matched_receive_scale(&gains, &powers).unwrap();
        assert_relative_eq!(eta, 0.6, epsilon = 1e-15);
        let cfg = OtaConfig {
            noise_variance: 0.0,
            receive_scale: eta,
            mode: MismatchMode::Modeled,
            seed: 1,
        };
        let out = ota_aggregate(&updates, &gains, &powers, &[5.0, 5.0], &cfg, 3).unwrap();
        assert_relative_eq!(out.mismatch_norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(out.received[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn silent_user_contributes_nothing_and_shows_up_as_mismatch() {
        // gains (1, 0): the received signal carries only user 0; with eta
        // aligning user 0 to its intended weight, the mismatch is exactly
        // the missing share of user 1
        let g0 = vec![2.0, -2.0];
        let g1 = vec![4.0, 6.0];
        let cfg = OtaConfig {
            noise_variance: 0.0,
            receive_scale: 2.0, // amp_0 / 2 = 0.5 = omega_0
            mode: MismatchMode::Modeled,
            seed: 0,
        };
        let out = ota_aggregate(
            &[g0.clone(), g1.clone()],
            &[c(1.0, 0.0), c(0.0, 0.0)],
            &[1.0, 1.0],
            &[1.0, 1.0],
            &cfg,
            0,
        )
        .unwrap();
        for i in 0..2 {
            assert_relative_eq!(out.received[i], 0.5 * g0[i], epsilon = 1e-15);
            assert_relative_eq!(out.mismatch[i], -0.5 * g1[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn realized_weights_follow_amplitude_over_scale() {
        let updates = vec![vec![1.0], vec![1.0]];
        let cfg = OtaConfig {
            noise_variance: 0.0,
            receive_scale: 2.0,
            mode: MismatchMode::Modeled,
            seed: 1,
        };
        let out = ota_aggregate(
            &updates,
            &[c(3.0, 4.0), c(1.0, 0.0)], // moduli 5 and 1
            &[4.0, 4.0],                 // sqrt -> 2
            &[1.0, 1.0],
            &cfg,
            0,
        )
        .unwrap();
        assert_relative_eq!(out.realized_weights[0], 5.0, epsilon = 1e-15); // 5*2/2
        assert_relative_eq!(out.realized_weights[1], 1.0, epsilon = 1e-15);
        // mismatch = (5-0.5)*1 + (1-0.5)*1 = 5.0
        assert_relative_eq!(out.mismatch_norm(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn noise_is_deterministic_per_round_and_varies_across_rounds() {
        let updates = vec![vec![0.0; 8]];
        let cfg = OtaConfig {
            noise_variance: 0.25,
            receive_scale: 1.0,
            mode: MismatchMode::Modeled,
            seed: 42,
        };
        let gains = [c(1.0, 0.0)];
        let a = ota_aggregate(&updates, &gains, &[1.0], &[1.0], &cfg, 5).unwrap();
        let b = ota_aggregate(&updates, &gains, &[1.0], &[1.0], &cfg, 5).unwrap();
        let d = ota_aggregate(&updates, &gains, &[1.0], &[1.0], &cfg, 6).unwrap();
        assert_eq!(a.received, b.received);
        assert_ne!(a.received, d.received);
        assert!(a.noise_norm() > 0.0);
    }

    #[test]
    fn noise_energy_concentrates_at_variance_times_dim() {
        // many draws of the squared noise norm should average to sigma^2 * d
        let dim = 16;
        let var = 0.09;
        let updates = vec![vec![0.0; dim]];
        let cfg = OtaConfig {
            noise_variance: var,
            receive_scale: 1.0,
            mode: MismatchMode::Modeled,
            seed: 9,
        };
        let gains = [c(1.0, 0.0)];
        let trials = 20_000;
        let mut acc = 0.0;
        for r in 0..trials {
            let out = ota_aggregate(&updates, &gains, &[1.0], &[1.0], &cfg, r).unwrap();
            acc += out.noise_norm() * out.noise_norm();
        }
        let mean = acc / trials as f64;
        assert_relative_eq!(mean, var * dim as f64, max_relative = 0.03);
    }

    #[test]
    fn zero_receive_scale_is_a_config_error() {
        let updates = vec![vec![1.0]];
        let cfg = OtaConfig {
            noise_variance: 0.0,
            receive_scale: 0.0,
            mode: MismatchMode::Modeled,
            seed: 0,
        };
        let r = ota_aggregate(&updates, &[c(1.0, 0.0)], &[1.0], &[1.0], &cfg, 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn all_zero_amplitudes_collapse_the_matched_scale() {
        let r = matched_receive_scale(&[c(0.0, 0.0), c(0.0, 0.0)], &[1.0, 0.0]);
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn proxy_combines_worst_case_mismatch_and_noise_energy() {
        let v = mismatch_noise_proxy(&[0.6, 0.6], &[0.5, 0.5], 2.0, 0.01, 25).unwrap();
        // l1 gap 0.2, times bound 2 -> 0.4; squared 0.16; noise 0.01*25
        assert_relative_eq!(v, 0.16 + 0.25, epsilon = 1e-12);
    }
}
