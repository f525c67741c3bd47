//! Performance bound for the two-phase schedule and the differentiable
//! per-round unrolling of it that the resource optimizer descends.
//!
//! The model: constant-step SGD on a smooth loss satisfying a
//! gradient-dominance (PL) condition contracts the optimality gap by
//! `c = 1 - mu*gamma*(2 - rho*gamma)` per round and accumulates
//! `rho*gamma^2/2` times the per-round gradient noise variance. Pretraining
//! runs the recursion on the server loss; the hand-off to the client
//! mixture pays a distribution-shift penalty proportional to the
//! 1-Wasserstein distance between the phases' data; fine-tuning runs the
//! recursion again with the analog aggregation error added to the gradient
//! noise.

use crate::error::{Error, Result};
use crate::resource::{BlockAObjective, BlockAVars};
use crate::scalar::{count, real, Scalar};

/// Exact 1-Wasserstein distance between two empirical distributions on the
/// line (monotone quantile coupling). The samples need not be sorted and
/// the sets may have different sizes.
pub fn wasserstein_1d<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::dimension("both samples must be nonempty"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::domain("samples must be finite"));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).expect("finite"));
    ys.sort_by(|p, q| p.partial_cmp(q).expect("finite"));
    let wa = T::one() / count::<T>(xs.len());
    let wb = T::one() / count::<T>(ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (wa, wb);
    let mut cost = T::zero();
    while i < xs.len() && j < ys.len() {
        let mass = ra.min(rb);
        cost += mass * (xs[i] - ys[j]).abs();
        ra -= mass;
        rb -= mass;
        if ra <= T::zero() {
            i += 1;
            ra = wa;
        }
        if rb <= T::zero() {
            j += 1;
            rb = wb;
        }
    }
    Ok(cost)
}

/// Everything the aggregate bound needs. Gradient variances are per round
/// (i.e. already divided by the batch size in effect).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundInputs<T> {
    /// Server loss at the initial weights.
    pub initial_loss: T,
    /// Minimum of the server loss.
    pub optimal_pre: T,
    /// Minimum of the client-mixture loss.
    pub optimal_fine: T,
    /// Gradient-dominance constants of the two phases.
    pub strong_convexity_pre: T,
    pub strong_convexity_fine: T,
    /// Smoothness constants of the two phases.
    pub smoothness_pre: T,
    pub smoothness_fine: T,
    pub lr_pre: T,
    pub lr_fine: T,
    /// Per-round gradient noise variances.
    pub grad_variance_pre: T,
    pub grad_variance_fine: T,
    /// Expected squared analog aggregation error per fine-tuning round.
    pub analog_error_sq: T,
    /// Loss sensitivity to the data distribution, per unit of transport
    /// distance.
    pub shift_sensitivity: T,
    /// Transport distance between the pretraining and fine-tuning data.
    pub shift_distance: T,
    pub pretrain_rounds: usize,
    pub finetune_rounds: usize,
}

impl<T: Scalar> BoundInputs<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("strong_convexity_pre", self.strong_convexity_pre),
            ("strong_convexity_fine", self.strong_convexity_fine),
            ("smoothness_pre", self.smoothness_pre),
            ("smoothness_fine", self.smoothness_fine),
            ("lr_pre", self.lr_pre),
            ("lr_fine", self.lr_fine),
        ] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be finite and positive")));
            }
        }
        if self.smoothness_pre < self.strong_convexity_pre
            || self.smoothness_fine < self.strong_convexity_fine
        {
            return Err(Error::domain("smoothness cannot be below the dominance constant"));
        }
        for (name, v) in [
            ("grad_variance_pre", self.grad_variance_pre),
            ("grad_variance_fine", self.grad_variance_fine),
            ("analog_error_sq", self.analog_error_sq),
            ("shift_sensitivity", self.shift_sensitivity),
            ("shift_distance", self.shift_distance),
        ] {
            if v < T::zero() || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be finite and nonnegative")));
            }
        }
        if !self.initial_loss.is_finite()
            || !self.optimal_pre.is_finite()
            || !self.optimal_fine.is_finite()
        {
            return Err(Error::domain("loss anchors must be finite"));
        }
        if self.finetune_rounds == 0 {
            return Err(Error::domain("need at least one fine-tuning round"));
        }
        Ok(())
    }
}

/// The bound, split into its additive pieces.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundBreakdown<T> {
    /// Final value: predicted upper bound on the expected fine-tuning loss.
    pub total: T,
    /// Optimality gap left after pretraining.
    pub pre_gap: T,
    /// Gap inherited by the fine-tuning phase after the distribution shift.
    pub handoff: T,
    /// Contracted hand-off term after all fine-tuning rounds.
    pub fine_decay: T,
    /// Steady-state term from gradient noise and analog error.
    pub noise_floor: T,
    /// `2 * handoff / (lr * rounds)`: the averaged-iterate decay rate; halves
    /// when the fine-tuning horizon doubles.
    pub grad_avg_term: T,
    /// Per-round noise injection `rho * lr * (variance + analog error)`.
    pub grad_noise_term: T,
    /// Set when a learning rate exceeds the stability range `rho*lr < 2`;
    /// `total` is infinite in that case.
    pub divergent: bool,
}

fn contraction<T: Scalar>(mu: T, rho: T, lr: T) -> Option<T> {
    let two = real::<T>(2.0);
    if rho * lr >= two {
        return None;
    }
    let c = T::one() - mu * lr * (two - rho * lr);
    Some(c.max(T::zero()))
}

/// Evaluate the aggregate two-phase bound.
pub fn convergence_bound<T: Scalar>(inputs: &BoundInputs<T>) -> Result<BoundBreakdown<T>> {
    inputs.validate()?;
    let two = real::<T>(2.0);
    let m = inputs.pretrain_rounds;
    let n = inputs.finetune_rounds;

    let c_pre = contraction(inputs.strong_convexity_pre, inputs.smoothness_pre, inputs.lr_pre);
    let c_fine = contraction(
        inputs.strong_convexity_fine,
        inputs.smoothness_fine,
        inputs.lr_fine,
    );
    let (c_pre, c_fine) = match (c_pre, c_fine) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Ok(BoundBreakdown {
                total: T::infinity(),
                pre_gap: T::infinity(),
                handoff: T::infinity(),
                fine_decay: T::infinity(),
                noise_floor: T::infinity(),
                grad_avg_term: T::infinity(),
                grad_noise_term: T::infinity(),
                divergent: true,
            })
        }
    };

    let init_gap = (inputs.initial_loss - inputs.optimal_pre).max(T::zero());
    let pre_gap = if m == 0 {
        // no pretraining steps: the gap is handed over untouched
        init_gap
    } else {
        let floor = inputs.smoothness_pre * inputs.lr_pre * inputs.grad_variance_pre
            / (two
                * inputs.strong_convexity_pre
                * (two - inputs.smoothness_pre * inputs.lr_pre));
        c_pre.powi(m as i32) * init_gap + floor
    };

    let handoff = (inputs.optimal_pre - inputs.optimal_fine
        + pre_gap
        + inputs.shift_sensitivity * inputs.shift_distance)
        .max(T::zero());

    let fine_decay = c_fine.powi(n as i32) * handoff;
    let noise_floor = inputs.smoothness_fine
        * inputs.lr_fine
        * (inputs.grad_variance_fine + inputs.analog_error_sq)
        / (two
            * inputs.strong_convexity_fine
            * (two - inputs.smoothness_fine * inputs.lr_fine));
    let total = inputs.optimal_fine + fine_decay + noise_floor;

    Ok(BoundBreakdown {
        total,
        pre_gap,
        handoff,
        fine_decay,
        noise_floor,
        grad_avg_term: two * handoff / (inputs.lr_fine * count::<T>(n)),
        grad_noise_term: inputs.smoothness_fine
            * inputs.lr_fine
            * (inputs.grad_variance_fine + inputs.analog_error_sq),
        divergent: false,
    })
}

/// Differentiable per-round unrolling of the bound as a function of the
/// server batch schedule `W_m` and the per-round client batch totals
/// `B_n`. Gradient variance scales as `sample_variance / batch`, so larger
/// batches buy a tighter bound at the price of latency and energy — this
/// is the objective [`crate::resource::sca_surrogate_block_a`] descends.
///
/// Frequencies do not enter the value; their gradient entries are zero and
/// they move only through the budget constraints.
#[derive(Debug, Clone)]
pub struct PsiModel<T> {
    initial_loss: T,
    optimal_pre: T,
    optimal_fine: T,
    smoothness_pre: T,
    smoothness_fine: T,
    lr_pre: T,
    lr_fine: T,
    /// Single-sample gradient variances; the per-round variance is this
    /// divided by the round's batch size.
    sample_variance_pre: T,
    sample_variance_fine: T,
    /// Expected squared analog error per fine-tuning round; entries beyond
    /// the end count as zero.
    analog_error_sq: Vec<T>,
    shift_sensitivity: T,
    shift_distance: T,
    c_pre: T,
    c_fine: T,
}

/// Constructor arguments for [`PsiModel`], mirroring [`BoundInputs`] but
/// with per-sample variances and a per-round analog error profile.
#[derive(Debug, Clone)]
pub struct PsiInputs<T> {
    pub initial_loss: T,
    pub optimal_pre: T,
    pub optimal_fine: T,
    pub strong_convexity_pre: T,
    pub strong_convexity_fine: T,
    pub smoothness_pre: T,
    pub smoothness_fine: T,
    pub lr_pre: T,
    pub lr_fine: T,
    pub sample_variance_pre: T,
    pub sample_variance_fine: T,
    pub analog_error_sq: Vec<T>,
    pub shift_sensitivity: T,
    pub shift_distance: T,
}

impl<T: Scalar> PsiModel<T> {
    pub fn new(inputs: PsiInputs<T>) -> Result<Self> {
        for (name, v) in [
            ("strong_convexity_pre", inputs.strong_convexity_pre),
            ("strong_convexity_fine", inputs.strong_convexity_fine),
            ("smoothness_pre", inputs.smoothness_pre),
            ("smoothness_fine", inputs.smoothness_fine),
            ("lr_pre", inputs.lr_pre),
            ("lr_fine", inputs.lr_fine),
        ] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be finite and positive")));
            }
        }
        let c_pre = contraction(
            inputs.strong_convexity_pre,
            inputs.smoothness_pre,
            inputs.lr_pre,
        );
        let c_fine = contraction(
            inputs.strong_convexity_fine,
            inputs.smoothness_fine,
            inputs.lr_fine,
        );
        let (c_pre, c_fine) = match (c_pre, c_fine) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::domain(
                    "learning rate outside the stability range rho*lr < 2",
                ))
            }
        };
        if inputs.sample_variance_pre < T::zero()
            || inputs.sample_variance_fine < T::zero()
            || inputs.analog_error_sq.iter().any(|&s| s < T::zero())
            || inputs.shift_sensitivity < T::zero()
            || inputs.shift_distance < T::zero()
        {
            return Err(Error::domain("variances and shift terms must be nonnegative"));
        }
        Ok(PsiModel {
            initial_loss: inputs.initial_loss,
            optimal_pre: inputs.optimal_pre,
            optimal_fine: inputs.optimal_fine,
            smoothness_pre: inputs.smoothness_pre,
            smoothness_fine: inputs.smoothness_fine,
            lr_pre: inputs.lr_pre,
            lr_fine: inputs.lr_fine,
            sample_variance_pre: inputs.sample_variance_pre,
            sample_variance_fine: inputs.sample_variance_fine,
            analog_error_sq: inputs.analog_error_sq,
            shift_sensitivity: inputs.shift_sensitivity,
            shift_distance: inputs.shift_distance,
            c_pre,
            c_fine,
        })
    }

    fn analog_at(&self, n: usize) -> T {
        self.analog_error_sq.get(n).copied().unwrap_or(T::zero())
    }

    /// Hand-off gap as a function of the pretraining schedule, and the
    /// pre-phase decay weights needed for the gradient.
    fn handoff(&self, server_batches: &[T]) -> T {
        let two = real::<T>(2.0);
        let mut gap = (self.initial_loss - self.optimal_pre).max(T::zero());
        for &w in server_batches {
            let var = self.sample_variance_pre / w;
            gap = self.c_pre * gap
                + self.smoothness_pre * self.lr_pre * self.lr_pre * var / two;
        }
        (self.optimal_pre - self.optimal_fine
            + gap
            + self.shift_sensitivity * self.shift_distance)
            .max(T::zero())
    }
}

impl<T: Scalar> BlockAObjective<T> for PsiModel<T> {
    fn value(&self, vars: &BlockAVars<T>) -> T {
        let two = real::<T>(2.0);
        let mut gap = self.handoff(&vars.server_batches);
        for (n, batches) in vars.client_batches.iter().enumerate() {
            let total: T = batches.iter().copied().sum();
            let var = self.sample_variance_fine / total + self.analog_at(n);
            gap = self.c_fine * gap
                + self.smoothness_fine * self.lr_fine * self.lr_fine * var / two;
        }
        self.optimal_fine + gap
    }

    fn gradient(&self, vars: &BlockAVars<T>) -> BlockAVars<T> {
        let two = real::<T>(2.0);
        let m = vars.server_batches.len();
        let n = vars.client_batches.len();
        let handoff = self.handoff(&vars.server_batches);
        let mut g = vars.clone();

        // d(value)/d(handoff) = c_fine^N, and the hand-off passes the
        // pre-phase gradient through only while its clamp is inactive
        let through = if handoff > T::zero() {
            self.c_fine.powi(n as i32)
        } else {
            T::zero()
        };
        let pre_coef = self.smoothness_pre * self.lr_pre * self.lr_pre
            * self.sample_variance_pre
            / two;
        for (i, gw) in g.server_batches.iter_mut().enumerate() {
            let w = vars.server_batches[i];
            let decay = self.c_pre.powi((m - 1 - i) as i32);
            *gw = -through * pre_coef * decay / (w * w);
        }
        for f in g.server_freqs.iter_mut() {
            *f = T::zero();
        }

        let fine_coef = self.smoothness_fine * self.lr_fine * self.lr_fine
            * self.sample_variance_fine
            / two;
        for (r, batches) in vars.client_batches.iter().enumerate() {
            let total: T = batches.iter().copied().sum();
            let decay = self.c_fine.powi((n - 1 - r) as i32);
            let db = -fine_coef * decay / (total * total);
            for gb in g.client_batches[r].iter_mut() {
                *gb = db;
            }
            for gf in g.client_freqs[r].iter_mut() {
                *gf = T::zero();
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn wasserstein_basics() {
        assert_relative_eq!(
            wasserstein_1d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            0.0
        );
        // pure shift moves every quantile by the same amount
        let a = [0.3, -1.0, 2.0, 0.7];
        let b: Vec<f64> = a.iter().map(|x| x + 1.5).collect();
        assert_relative_eq!(wasserstein_1d(&a, &b).unwrap(), 1.5, epsilon = 1e-12);
        // unequal sizes by hand: {0} vs {1, 3} -> 0.5*1 + 0.5*3
        assert_relative_eq!(wasserstein_1d(&[0.0], &[1.0, 3.0]).unwrap(), 2.0, epsilon = 1e-12);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut idx: Vec<usize> = (0..n).collect();
        fn heap(k: usize, idx: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k <= 1 {
                out.push(idx.clone());
                return;
            }
            for i in 0..k {
                heap(k - 1, idx, out);
                if k % 2 == 0 {
                    idx.swap(i, k - 1);
                } else {
                    idx.swap(0, k - 1);
                }
            }
        }
        heap(n, &mut idx, &mut out);
        out
    }

    #[test]
    fn wasserstein_matches_the_optimal_assignment_on_small_sets() {
        // equal-size empirical distances reduce to a minimum-cost matching;
        // enumerate all of them and compare
        let cases: [(&[f64], &[f64]); 3] = [
            (&[0.0, 5.0, 1.0], &[2.0, 2.0, -1.0]),
            (&[1.0, 1.0, 1.0, 4.0], &[0.0, 2.0, 3.0, 3.5]),
            (&[-3.0, 0.5, 0.4, 2.2, 9.0], &[1.0, 1.1, -2.0, 4.0, 4.0]),
        ];
        for (a, b) in cases {
            let n = a.len();
            let best = permutations(n)
                .into_iter()
                .map(|p| {
                    (0..n).map(|i| (a[i] - b[p[i]]).abs()).sum::<f64>() / n as f64
                })
                .fold(f64::INFINITY, f64::min);
            assert_relative_eq!(wasserstein_1d(a, b).unwrap(), best, epsilon = 1e-12);
        }
    }

    fn base_inputs() -> BoundInputs<f64> {
        BoundInputs {
            initial_loss: 10.0,
            optimal_pre: 1.0,
            optimal_fine: 1.3,
            strong_convexity_pre: 0.5,
            strong_convexity_fine: 0.5,
            smoothness_pre: 2.0,
            smoothness_fine: 2.0,
            lr_pre: 0.2,
            lr_fine: 0.2,
            grad_variance_pre: 0.05,
            grad_variance_fine: 0.05,
            analog_error_sq: 0.0,
            shift_sensitivity: 2.0,
            shift_distance: 0.5,
            pretrain_rounds: 20,
            finetune_rounds: 30,
        }
    }

    #[test]
    fn skipping_pretraining_hands_over_the_raw_gap() {
        let mut inp = base_inputs();
        inp.pretrain_rounds = 0;
        let b = convergence_bound(&inp).unwrap();
        assert_relative_eq!(b.pre_gap, 9.0, epsilon = 1e-12);
    }

    #[test]
    fn bound_shrinks_with_more_rounds_and_grows_with_analog_error() {
        let inp = base_inputs();
        let b0 = convergence_bound(&inp).unwrap();
        let mut more_fine = inp.clone();
        more_fine.finetune_rounds = 60;
        assert!(convergence_bound(&more_fine).unwrap().total < b0.total);
        let mut more_pre = inp.clone();
        more_pre.pretrain_rounds = 40;
        assert!(convergence_bound(&more_pre).unwrap().total <= b0.total);
        let mut noisy = inp.clone();
        noisy.analog_error_sq = 0.5;
        assert!(convergence_bound(&noisy).unwrap().total > b0.total);
        assert!(b0.total >= inp.optimal_fine);
    }

    #[test]
    fn shift_terms_enter_linearly_through_the_handoff() {
        // keep the hand-off strictly positive on both sides of the
        // comparison so its zero-clamp stays inactive
        let mut inp = base_inputs();
        inp.optimal_fine = 1.1;
        let with = convergence_bound(&inp).unwrap();
        let mut without = inp.clone();
        without.shift_distance = 0.0;
        let wo = convergence_bound(&without).unwrap();
        assert!(wo.handoff > 0.0);
        // sensitivity 2 at distance 0.5 adds exactly 1 to the hand-off
        assert_relative_eq!(with.handoff - wo.handoff, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn doubling_the_horizon_halves_the_averaged_decay_term() {
        let inp = base_inputs();
        let b1 = convergence_bound(&inp).unwrap();
        let mut inp2 = inp.clone();
        inp2.finetune_rounds *= 2;
        let b2 = convergence_bound(&inp2).unwrap();
        assert_relative_eq!(b2.grad_avg_term, 0.5 * b1.grad_avg_term, epsilon = 1e-12);
    }

    #[test]
    fn unstable_learning_rate_is_flagged_divergent() {
        let mut inp = base_inputs();
        inp.lr_fine = 1.0; // rho * lr = 2
        let b = convergence_bound(&inp).unwrap();
        assert!(b.divergent);
        assert!(b.total.is_infinite());
    }

    fn psi_inputs(analog: Vec<f64>) -> PsiInputs<f64> {
        PsiInputs {
            initial_loss: 10.0,
            optimal_pre: 1.0,
            optimal_fine: 1.3,
            strong_convexity_pre: 0.5,
            strong_convexity_fine: 0.5,
            smoothness_pre: 2.0,
            smoothness_fine: 2.0,
            lr_pre: 0.2,
            lr_fine: 0.2,
            sample_variance_pre: 4.0,
            sample_variance_fine: 4.0,
            analog_error_sq: analog,
            shift_sensitivity: 2.0,
            shift_distance: 0.5,
        }
    }

    fn uniform_vars(m: usize, n: usize, w: f64, b: f64) -> BlockAVars<f64> {
        BlockAVars {
            server_batches: vec![w; m],
            server_freqs: vec![1e9; m],
            client_batches: vec![vec![b; 3]; n],
            client_freqs: vec![vec![1e9; 3]; n],
        }
    }

    #[test]
    fn unrolled_value_is_below_the_steady_state_bound_with_matching_inputs() {
        let psi = PsiModel::new(psi_inputs(vec![0.01; 30])).unwrap();
        let vars = uniform_vars(20, 30, 80.0, 26.6666666667);
        let v = psi.value(&vars);
        let mut inp = base_inputs();
        // per-round variances implied by the uniform batches
        inp.grad_variance_pre = 4.0 / 80.0;
        inp.grad_variance_fine = 4.0 / 80.0;
        inp.analog_error_sq = 0.01;
        let agg = convergence_bound(&inp).unwrap();
        assert!(v <= agg.total + 1e-9, "{v} vs {}", agg.total);
        assert!(v >= 1.3);
    }

    #[test]
    fn psi_gradient_matches_finite_differences() {
        let psi = PsiModel::new(psi_inputs(vec![0.02; 4])).unwrap();
        let vars = uniform_vars(3, 4, 50.0, 12.0);
        let g = psi.gradient(&vars);
        let h = 1e-4;
        for i in 0..3 {
            let mut vp = vars.clone();
            let mut vm = vars.clone();
            vp.server_batches[i] += h;
            vm.server_batches[i] -= h;
            let fd = (psi.value(&vp) - psi.value(&vm)) / (2.0 * h);
            assert_relative_eq!(g.server_batches[i], fd, max_relative = 1e-5);
        }
        for n in 0..4 {
            let mut vp = vars.clone();
            let mut vm = vars.clone();
            vp.client_batches[n][1] += h;
            vm.client_batches[n][1] -= h;
            let fd = (psi.value(&vp) - psi.value(&vm)) / (2.0 * h);
            assert_relative_eq!(g.client_batches[n][1], fd, max_relative = 1e-5);
        }
        // frequencies never enter the value
        assert!(g.server_freqs.iter().all(|&x| x == 0.0));
        // larger batches can only help
        assert!(g.server_batches.iter().all(|&x| x <= 0.0));
        assert!(g.client_batches.iter().flatten().all(|&x| x <= 0.0));
    }

    #[test]
    fn psi_rejects_unstable_rates() {
        let mut inp = psi_inputs(vec![]);
        inp.lr_fine = 1.5;
        assert!(PsiModel::new(inp).is_err());
    }
}
