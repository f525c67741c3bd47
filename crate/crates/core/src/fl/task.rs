//! Synthetic learning tasks with controllable distribution shift.
//!
//! The quadratic task shares one column-centered design matrix between the
//! server and every client and shifts only the per-client regression
//! targets. Column centering makes each client's loss differ from the
//! server's by a weight-independent constant, so every party agrees on the
//! minimizer while the *value* gap between the phases is exact and known —
//! which is what lets the bound machinery be validated end to end.

use crate::error::{Error, Result};
use crate::linalg::{spd_solve, sym_eigenvalues};
use crate::rng::{label, stream_rng};
use crate::scalar::{count, real, Scalar};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    Logistic,
}

#[derive(Debug, Clone)]
pub struct TaskConfig<T> {
    pub kind: TaskKind,
    /// Weight dimension.
    pub dim: usize,
    /// Rows of the shared design matrix.
    pub num_samples: usize,
    pub num_users: usize,
    /// Scale of the per-user target shifts; zero makes every client match
    /// the server distribution.
    pub shift_scale: T,
    /// Std of the observation noise baked into the targets.
    pub target_noise_std: T,
    /// Ridge weight for the logistic variant.
    pub ridge: T,
    pub seed: u64,
}

impl<T: Scalar> TaskConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_users == 0 {
            return Err(Error::dimension("task needs dim >= 1 and users >= 1"));
        }
        if self.num_samples < self.dim + 1 {
            return Err(Error::domain(
                "need more samples than weight dimensions for a well-posed task",
            ));
        }
        if self.shift_scale < T::zero() || self.target_noise_std < T::zero() || self.ridge < T::zero() {
            return Err(Error::domain("scales must be nonnegative"));
        }
        Ok(())
    }
}

/// A generated task instance. Feature rows are shared; targets differ per
/// party. For the logistic kind the "targets" hold labels in `{-1, +1}`.
#[derive(Debug, Clone)]
pub struct SyntheticTask<T> {
    pub kind: TaskKind,
    dim: usize,
    /// Row-major `num_samples x dim`, columns centered for the quadratic kind.
    rows: Vec<Vec<T>>,
    server_targets: Vec<T>,
    user_targets: Vec<Vec<T>>,
    shifts: Vec<T>,
    ridge: T,
}

impl<T: Scalar> SyntheticTask<T> {
    pub fn generate(cfg: &TaskConfig<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, label::TASK_DATA, 0, 0);
        let s = cfg.num_samples;
        let d = cfg.dim;
        let mut rows: Vec<Vec<T>> = (0..s)
            .map(|_| (0..d).map(|_| T::std_normal(&mut rng)).collect())
            .collect();
        let w_true: Vec<T> = (0..d).map(|_| T::std_normal(&mut rng)).collect();
        let noise: Vec<T> = (0..s)
            .map(|_| T::std_normal(&mut rng) * cfg.target_noise_std)
            .collect();

        match cfg.kind {
            TaskKind::Quadratic => {
                // center columns so a constant target shift never couples to w
                for j in 0..d {
                    let mean = rows.iter().map(|r| r[j]).sum::<T>() / count::<T>(s);
                    for r in rows.iter_mut() {
                        r[j] -= mean;
                    }
                }
                let mut server_targets: Vec<T> = rows
                    .iter()
                    .zip(&noise)
                    .map(|(r, &e)| crate::linalg::dot(r, &w_true) + e)
                    .collect();
                let t_mean = server_targets.iter().copied().sum::<T>() / count::<T>(s);
                for t in server_targets.iter_mut() {
                    *t -= t_mean;
                }
                let mut shifts = Vec::with_capacity(cfg.num_users);
                let mut user_targets = Vec::with_capacity(cfg.num_users);
                for u in 0..cfg.num_users {
                    let mut urng = stream_rng(cfg.seed, label::TASK_DATA, 1, u as u64);
                    let delta = T::std_normal(&mut urng) * cfg.shift_scale;
                    shifts.push(delta);
                    user_targets.push(server_targets.iter().map(|&t| t + delta).collect());
                }
                Ok(SyntheticTask {
                    kind: cfg.kind,
                    dim: d,
                    rows,
                    server_targets,
                    user_targets,
                    shifts,
                    ridge: cfg.ridge,
                })
            }
            TaskKind::Logistic => {
                let server_targets: Vec<T> = rows
                    .iter()
                    .zip(&noise)
                    .map(|(r, &e)| {
                        let margin = crate::linalg::dot(r, &w_true) + e;
                        if margin >= T::zero() {
                            T::one()
                        } else {
                            -T::one()
                        }
                    })
                    .collect();
                let mut shifts = Vec::with_capacity(cfg.num_users);
                let mut user_targets = Vec::with_capacity(cfg.num_users);
                for u in 0..cfg.num_users {
                    let mut urng = stream_rng(cfg.seed, label::TASK_DATA, 1, u as u64);
                    // shift acts as a label-flip probability here
                    let flip_prob = (T::std_normal(&mut urng) * cfg.shift_scale).abs().min(real(0.4));
                    shifts.push(flip_prob);
                    let flipped = server_targets
                        .iter()
                        .map(|&y| {
                            if T::unit_uniform(&mut urng) < flip_prob {
                                -y
                            } else {
                                y
                            }
                        })
                        .collect();
                    user_targets.push(flipped);
                }
                let ridge = if cfg.ridge > T::zero() { cfg.ridge } else { real(1e-3) };
                Ok(SyntheticTask {
                    kind: cfg.kind,
                    dim: d,
                    rows,
                    server_targets,
                    user_targets,
                    shifts,
                    ridge,
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn num_users(&self) -> usize {
        self.user_targets.len()
    }
    pub fn num_samples(&self) -> usize {
        self.rows.len()
    }
    pub fn server_target_values(&self) -> &[T] {
        &self.server_targets
    }
    pub fn user_target_values(&self, user: usize) -> Result<&[T]> {
        self.user_targets
            .get(user)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::dimension(format!("user {user} out of range")))
    }

    fn targets_of(&self, party: Party) -> Result<&[T]> {
        match party {
            Party::Server => Ok(&self.server_targets),
            Party::User(u) => self.user_target_values(u),
        }
    }

    fn check_w(&self, w: &[T]) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::dimension(format!(
                "weight vector has {} entries, task dimension is {}",
                w.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn sample_loss(&self, row: &[T], target: T, w: &[T]) -> T {
        match self.kind {
            TaskKind::Quadratic => {
                let r = crate::linalg::dot(row, w) - target;
                real::<T>(0.5) * r * r
            }
            TaskKind::Logistic => {
                let m = -target * crate::linalg::dot(row, w);
                // stable log(1 + exp(m))
                if m > T::zero() {
                    m + (-m).exp().ln_1p()
                } else {
                    m.exp().ln_1p()
                }
            }
        }
    }

    fn add_sample_grad(&self, row: &[T], target: T, w: &[T], scale: T, acc: &mut [T]) {
        match self.kind {
            TaskKind::Quadratic => {
                let r = crate::linalg::dot(row, w) - target;
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += scale * r * x;
                }
            }
            TaskKind::Logistic => {
                let m = -target * crate::linalg::dot(row, w);
                // sigmoid(m) without overflow
                let sig = if m > T::zero() {
                    T::one() / (T::one() + (-m).exp())
                } else {
                    let e = m.exp();
                    e / (T::one() + e)
                };
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += scale * (-target) * sig * x;
                }
            }
        }
    }

    fn loss_over(&self, party: Party, w: &[T]) -> Result<T> {
        self.check_w(w)?;
        let targets = self.targets_of(party)?;
        let s = count::<T>(self.rows.len());
        let mut acc = T::zero();
        for (row, &t) in self.rows.iter().zip(targets) {
            acc += self.sample_loss(row, t, w);
        }
        let mut out = acc / s;
        if self.kind == TaskKind::Logistic {
            out += real::<T>(0.5) * self.ridge * crate::linalg::norm2(w);
        }
        Ok(out)
    }

    fn grad_over(&self, party: Party, w: &[T], batch: Option<&[usize]>) -> Result<Vec<T>> {
        self.check_w(w)?;
        let targets = self.targets_of(party)?;
        let mut g = vec![T::zero(); self.dim];
        match batch {
            None => {
                let inv = T::one() / count::<T>(self.rows.len());
                for (row, &t) in self.rows.iter().zip(targets) {
                    self.add_sample_grad(row, t, w, inv, &mut g);
                }
            }
            Some(idx) => {
                if idx.is_empty() {
                    return Err(Error::domain("empty batch"));
                }
                let inv = T::one() / count::<T>(idx.len());
                for &i in idx {
                    let row = self
                        .rows
                        .get(i)
                        .ok_or_else(|| Error::dimension(format!("sample index {i} out of range")))?;
                    self.add_sample_grad(row, targets[i], w, inv, &mut g);
                }
            }
        }
        if self.kind == TaskKind::Logistic {
            for (gi, &wi) in g.iter_mut().zip(w) {
                *gi += self.ridge * wi;
            }
        }
        Ok(g)
    }

    pub fn server_loss(&self, w: &[T]) -> Result<T> {
        self.loss_over(Party::Server, w)
    }
    pub fn server_gradient(&self, w: &[T]) -> Result<Vec<T>> {
        self.grad_over(Party::Server, w, None)
    }
    pub fn server_batch_gradient(&self, w: &[T], batch: &[usize]) -> Result<Vec<T>> {
        self.grad_over(Party::Server, w, Some(batch))
    }
    pub fn user_loss(&self, user: usize, w: &[T]) -> Result<T> {
        self.loss_over(Party::User(user), w)
    }
    pub fn user_gradient(&self, user: usize, w: &[T]) -> Result<Vec<T>> {
        self.grad_over(Party::User(user), w, None)
    }
    pub fn user_batch_gradient(&self, user: usize, w: &[T], batch: &[usize]) -> Result<Vec<T>> {
        self.grad_over(Party::User(user), w, Some(batch))
    }

    /// Convex combination of user losses with the given weights.
    pub fn mixture_loss(&self, omega: &[T], w: &[T]) -> Result<T> {
        if omega.len() != self.num_users() {
            return Err(Error::dimension("mixture weights must cover every user"));
        }
        let mut acc = T::zero();
        for (u, &wt) in omega.iter().enumerate() {
            acc += wt * self.user_loss(u, w)?;
        }
        Ok(acc)
    }

    /// Uniform-mixture loss over all users.
    pub fn uniform_mixture_loss(&self, w: &[T]) -> Result<T> {
        let omega = vec![T::one() / count::<T>(self.num_users()); self.num_users()];
        self.mixture_loss(&omega, w)
    }

    /// Draw a batch of sample indices with replacement from the stream
    /// keyed by `(round, party)`; the server uses party id `u64::MAX`.
    pub fn sample_batch(&self, seed: u64, round: u64, party: u64, batch_size: usize) -> Vec<usize> {
        let mut rng = stream_rng(seed, label::BATCH, round, party);
        (0..batch_size)
            .map(|_| rng.random_range(0..self.rows.len()))
            .collect()
    }

    /// Smallest and largest curvature of the (shared) quadratic loss:
    /// eigenvalue range of `X^T X / S`. Errors for the logistic kind, whose
    /// curvature is data- and point-dependent.
    pub fn curvature_bounds(&self) -> Result<(T, T)> {
        if self.kind != TaskKind::Quadratic {
            return Err(Error::domain(
                "curvature bounds are only exact for the quadratic task",
            ));
        }
        let h = self.hessian();
        let eig = sym_eigenvalues(&h)?;
        let mu = eig[0];
        let rho = eig[eig.len() - 1];
        if !(mu > T::zero()) {
            return Err(Error::numeric("design matrix is rank deficient"));
        }
        Ok((mu, rho))
    }

    /// Dense Hessian `X^T X / S` of the quadratic loss.
    pub fn hessian(&self) -> Vec<Vec<T>> {
        let d = self.dim;
        let s = count::<T>(self.rows.len());
        let mut h = vec![vec![T::zero(); d]; d];
        for row in &self.rows {
            for i in 0..d {
                for j in 0..d {
                    h[i][j] += row[i] * row[j] / s;
                }
            }
        }
        h
    }

    /// Minimizer and minimum of the server loss (quadratic only).
    pub fn server_optimum(&self) -> Result<(Vec<T>, T)> {
        self.optimum_for(&self.server_targets)
    }

    /// Minimizer and minimum of the uniform mixture of user losses
    /// (quadratic only). Shares the server minimizer by construction, but
    /// is solved from scratch rather than assumed.
    pub fn uniform_mixture_optimum(&self) -> Result<(Vec<T>, T)> {
        let s = self.rows.len();
        let u = self.num_users();
        let mut avg = vec![T::zero(); s];
        for targets in &self.user_targets {
            for (a, &t) in avg.iter_mut().zip(targets) {
                *a += t / count::<T>(u);
            }
        }
        let (w, _) = self.optimum_for(&avg)?;
        let lstar = self.uniform_mixture_loss(&w)?;
        Ok((w, lstar))
    }

    fn optimum_for(&self, targets: &[T]) -> Result<(Vec<T>, T)> {
        if self.kind != TaskKind::Quadratic {
            return Err(Error::domain("closed-form optimum needs the quadratic task"));
        }
        let h = self.hessian();
        let s = count::<T>(self.rows.len());
        let mut rhs = vec![T::zero(); self.dim];
        for (row, &t) in self.rows.iter().zip(targets) {
            for (r, &x) in rhs.iter_mut().zip(row) {
                *r += x * t / s;
            }
        }
        let w = spd_solve(&h, &rhs)?;
        let mut acc = T::zero();
        for (row, &t) in self.rows.iter().zip(targets) {
            let r = crate::linalg::dot(row, &w) - t;
            acc += real::<T>(0.5) * r * r;
        }
        Ok((w.clone(), acc / s))
    }

    /// Variance of the single-sample gradient around the full gradient of
    /// the given party at `w`. A batch of size `B` drawn with replacement
    /// has gradient variance `this / B`.
    pub fn gradient_variance(&self, party_user: Option<usize>, w: &[T]) -> Result<T> {
        let party = match party_user {
            None => Party::Server,
            Some(u) => Party::User(u),
        };
        self.check_w(w)?;
        let targets = self.targets_of(party)?;
        let full = self.grad_over(party, w, None)?;
        let s = count::<T>(self.rows.len());
        let mut acc = T::zero();
        for (row, &t) in self.rows.iter().zip(targets) {
            let mut g = vec![T::zero(); self.dim];
            self.add_sample_grad(row, t, w, T::one(), &mut g);
            if self.kind == TaskKind::Logistic {
                for (gi, &wi) in g.iter_mut().zip(w) {
                    *gi += self.ridge * wi;
                }
            }
            let mut d2 = T::zero();
            for (a, b) in g.iter().zip(&full) {
                let d = *a - *b;
                d2 += d * d;
            }
            acc += d2;
        }
        Ok(acc / s)
    }

    /// The per-user target shifts (quadratic) or flip probabilities
    /// (logistic) the instance was generated with.
    pub fn shifts(&self) -> &[T] {
        &self.shifts
    }
}

#[derive(Clone, Copy)]
enum Party {
    Server,
    User(usize),
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quad_cfg() -> TaskConfig<f64> {
        TaskConfig {
            kind: TaskKind::Quadratic,
            dim: 4,
            num_samples: 64,
            num_users: 5,
            shift_scale: 0.7,
            target_noise_std: 0.1,
            ridge: 0.0,
            seed: 11,
        }
    }

    #[test]
    fn user_loss_gap_is_weight_independent() {
        let task = SyntheticTask::generate(&quad_cfg()).unwrap();
        let w1 = vec![0.3, -1.0, 0.5, 2.0];
        let w2 = vec![-2.0, 0.1, 0.0, 0.4];
        for u in 0..task.num_users() {
            let gap1 = task.user_loss(u, &w1).unwrap() - task.server_loss(&w1).unwrap();
            let gap2 = task.user_loss(u, &w2).unwrap() - task.server_loss(&w2).unwrap();
            assert_relative_eq!(gap1, gap2, epsilon = 1e-10);
            // centered design and targets make the gap exactly delta^2 / 2
            let d = task.shifts()[u];
            assert_relative_eq!(gap1, 0.5 * d * d, epsilon = 1e-10);
        }
    }

    #[test]
    fn full_gradient_vanishes_at_the_solved_optimum() {
        let task = SyntheticTask::generate(&quad_cfg()).unwrap();
        let (w, lstar) = task.server_optimum().unwrap();
        let g = task.server_gradient(&w).unwrap();
        assert!(crate::linalg::norm(&g) < 1e-9);
        // any perturbation increases the loss
        let mut wp = w.clone();
        wp[0] += 0.1;
        assert!(task.server_loss(&wp).unwrap() > lstar);
        assert_relative_eq!(task.server_loss(&w).unwrap(), lstar, epsilon = 1e-12);
    }

    #[test]
    fn mixture_optimum_matches_server_minimizer_under_centering() {
        let task = SyntheticTask::generate(&quad_cfg()).unwrap();
        let (ws, _) = task.server_optimum().unwrap();
        let (wm, lm) = task.uniform_mixture_optimum().unwrap();
        for (a, b) in ws.iter().zip(&wm) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
        // mixture minimum exceeds server minimum by the mean constant gap
        let (_, ls) = task.server_optimum().unwrap();
        let mean_gap: f64 =
            task.shifts().iter().map(|d| 0.5 * d * d).sum::<f64>() / task.num_users() as f64;
        assert_relative_eq!(lm, ls + mean_gap, epsilon = 1e-9);
    }

    #[test]
    fn batch_gradient_of_full_index_set_matches_full_gradient() {
        let task = SyntheticTask::generate(&quad_cfg()).unwrap();
        let w = vec![0.2, 0.3, -0.4, 1.0];
        let all: Vec<usize> = (0..task.num_samples()).collect();
        let gb = task.user_batch_gradient(2, &w, &all).unwrap();
        let gf = task.user_gradient(2, &w).unwrap();
        for (a, b) in gb.iter().zip(&gf) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn curvature_bounds_bracket_rayleigh_quotients() {
        let task = SyntheticTask::generate(&quad_cfg()).unwrap();
        let (mu, rho) = task.curvature_bounds().unwrap();
        assert!(mu > 0.0 && rho >= mu);
        let h = task.hessian();
        for probe in [vec![1.0, 0.0, 0.0, 0.0], vec![0.5, -0.5, 0.5, -0.5]] {
            let n2 = crate::linalg::norm2(&probe);
            let mut hq = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    hq += probe[i] * h[i][j] * probe[j];
                }
            }
            let q = hq / n2;
            assert!(q >= mu - 1e-10 && q <= rho + 1e-10);
        }
    }

    #[test]
    fn gradient_variance_matches_direct_enumeration() {
        let task = SyntheticTask::generate(&quad_cfg()).unwrap();
        let w = vec![1.0, 0.0, -1.0, 0.5];
        let v = task.gradient_variance(Some(1), &w).unwrap();
        // direct: average squared distance of per-sample grads to the mean
        let full = task.user_gradient(1, &w).unwrap();
        let mut acc = 0.0;
        for i in 0..task.num_samples() {
            let gi = task.user_batch_gradient(1, &w, &[i]).unwrap();
            let mut d2 = 0.0;
            for (a, b) in gi.iter().zip(&full) {
                d2 += (a - b) * (a - b);
            }
            acc += d2;
        }
        assert_relative_eq!(v, acc / task.num_samples() as f64, epsilon = 1e-10);
    }

    #[test]
    fn batches_are_reproducible_and_round_dependent() {
        let task = SyntheticTask::generate(&quad_cfg()).unwrap();
        let a = task.sample_batch(9, 3, 1, 16);
        let b = task.sample_batch(9, 3, 1, 16);
        let c = task.sample_batch(9, 4, 1, 16);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&i| i < task.num_samples()));
    }

    #[test]
    fn logistic_loss_and_gradient_are_consistent() {
        let cfg = TaskConfig {
            kind: TaskKind::Logistic,
            ridge: 1e-2,
            ..quad_cfg()
        };
        let task = SyntheticTask::generate(&cfg).unwrap();
        let w = vec![0.1, -0.2, 0.3, 0.05];
        let g = task.server_gradient(&w).unwrap();
        // central finite differences
        for j in 0..4 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += 1e-6;
            wm[j] -= 1e-6;
            let fd =
                (task.server_loss(&wp).unwrap() - task.server_loss(&wm).unwrap()) / 2e-6;
            assert_relative_eq!(g[j], fd, epsilon = 1e-6);
        }
        assert!(task.curvature_bounds().is_err());
    }

    #[test]
    fn zero_shift_scale_makes_clients_identical_to_server() {
        let cfg = TaskConfig {
            shift_scale: 0.0,
            ..quad_cfg()
        };
        let task = SyntheticTask::generate(&cfg).unwrap();
        let w = vec![0.4, 0.4, 0.4, 0.4];
        for u in 0..task.num_users() {
            assert_relative_eq!(
                task.user_loss(u, &w).unwrap(),
                task.server_loss(&w).unwrap(),
                epsilon = 1e-12
            );
        }
    }
}
