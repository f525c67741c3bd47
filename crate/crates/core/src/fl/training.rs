//! Two-phase training driver: centralized stochastic pretraining on the
//! server, then federated rounds whose gradient aggregation rides the
//! analog channel model.

use crate::error::{Error, Result};
use crate::linalg::C;
use crate::scalar::{count, Scalar};

use super::ota::{ota_aggregate, OtaConfig, OtaOutcome};
use super::task::SyntheticTask;

/// One server-side SGD step on a batch of `batch_size` samples drawn with
/// replacement from the stream keyed by `(seed, round)`. Returns the new
/// weights and the full server loss *before* the step.
pub fn pretrain_step<T: Scalar>(
    task: &SyntheticTask<T>,
    w: &[T],
    lr: T,
    batch_size: usize,
    seed: u64,
    round: u64,
) -> Result<(Vec<T>, T)> {
    if !(lr > T::zero()) || !lr.is_finite() {
        return Err(Error::domain("learning rate must be finite and positive"));
    }
    if batch_size == 0 {
        return Err(Error::domain("batch size must be at least 1"));
    }
    let loss = task.server_loss(w)?;
    let batch = task.sample_batch(seed, round, u64::MAX, batch_size);
    let g = task.server_batch_gradient(w, &batch)?;
    let mut next = w.to_vec();
    for (wi, &gi) in next.iter_mut().zip(&g) {
        *wi -= lr * gi;
    }
    guard_finite(&next, "pretraining", round)?;
    Ok((next, loss))
}

/// The batch-weighted average of the selected users' stochastic gradients,
/// computed exactly — the digital reference the analog path is measured
/// against. Uses the same batch streams as [`finetune_round`], so with an
/// ideal channel the two coincide.
pub fn weighted_batch_gradient<T: Scalar>(
    task: &SyntheticTask<T>,
    w: &[T],
    selected: &[usize],
    batch_sizes: &[u32],
    seed: u64,
    round: u64,
) -> Result<Vec<T>> {
    let grads = client_gradients(task, w, selected, batch_sizes, seed, round)?;
    let total: T = batch_sizes.iter().map(|&b| count::<T>(b as usize)).sum();
    let mut out = vec![T::zero(); task.dim()];
    for (g, &b) in grads.iter().zip(batch_sizes) {
        let wt = count::<T>(b as usize) / total;
        for (o, &x) in out.iter_mut().zip(g) {
            *o += wt * x;
        }
    }
    Ok(out)
}

fn client_gradients<T: Scalar>(
    task: &SyntheticTask<T>,
    w: &[T],
    selected: &[usize],
    batch_sizes: &[u32],
    seed: u64,
    round: u64,
) -> Result<Vec<Vec<T>>> {
    if selected.is_empty() || selected.len() != batch_sizes.len() {
        return Err(Error::dimension("selected users and batch sizes disagree"));
    }
    if batch_sizes.iter().any(|&b| b == 0) {
        return Err(Error::domain("every selected user needs a positive batch"));
    }
    selected
        .iter()
        .zip(batch_sizes)
        .map(|(&u, &b)| {
            let batch = task.sample_batch(seed, round, u as u64, b as usize);
            task.user_batch_gradient(u, w, &batch)
        })
        .collect()
}

/// What one federated round produced.
#[derive(Debug, Clone)]
pub struct RoundResult<T> {
    pub weights: Vec<T>,
    /// Uniform-mixture loss after the step.
    pub loss: T,
    pub outcome: OtaOutcome<T>,
}

/// One federated fine-tuning round: every selected user computes a local
/// stochastic gradient at the broadcast weights, the channel aggregates
/// them, and the server applies the aggregate as a gradient step.
///
/// `gains` are the post-combining uplink gains of the selected users in
/// selection order; `powers` their transmit powers.
#[allow(clippy::too_many_arguments)]
pub fn finetune_round<T: Scalar>(
    task: &SyntheticTask<T>,
    w: &[T],
    selected: &[usize],
    batch_sizes: &[u32],
    lr: T,
    gains: &[C<T>],
    powers: &[T],
    ota: &OtaConfig<T>,
    seed: u64,
    round: u64,
) -> Result<RoundResult<T>> {
    if !(lr > T::zero()) || !lr.is_finite() {
        return Err(Error::domain("learning rate must be finite and positive"));
    }
    let grads = client_gradients(task, w, selected, batch_sizes, seed, round)?;
    let batch_w: Vec<T> = batch_sizes.iter().map(|&b| count::<T>(b as usize)).collect();
    let outcome = ota_aggregate(&grads, gains, powers, &batch_w, ota, round)?;
    let mut next = w.to_vec();
    for (wi, &gi) in next.iter_mut().zip(&outcome.received) {
        *wi -= lr * gi;
    }
    guard_finite(&next, "fine-tuning", round)?;
    let loss = task.uniform_mixture_loss(&next)?;
    Ok(RoundResult {
        weights: next,
        loss,
        outcome,
    })
}

fn guard_finite<T: Scalar>(w: &[T], phase: &str, round: u64) -> Result<()> {
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite weight after {phase} round {round}; lower the learning rate or power"
        )));
    }
    Ok(())
}
