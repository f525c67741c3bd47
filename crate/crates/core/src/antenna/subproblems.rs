//! The four cyclic subproblems: auxiliary gains and times, per-element
//! phase alignment, unit-sphere beamformers, and spacing-constrained
//! element positions.

use crate::channel::{
    rate_from_gain, ArrayGeometry, Beamformer, BeamformerRole, LinkDirection, SPACING_TOL,
};
use crate::error::{Error, Result};
use crate::linalg::{cdot, cnorm2, pava_nondecreasing, C};
use crate::scalar::{count, real, Scalar};

use super::AuxState;

/// Everything needed to turn an effective gain into a link rate, plus the
/// optional per-round time caps the auxiliary step must respect.
#[derive(Debug, Clone)]
pub struct RateContext<T> {
    pub payload_bits: T,
    pub ul_bandwidth: Vec<T>,
    pub ul_noise_density: T,
    /// Transmit power per user, W.
    pub powers: Vec<T>,
    /// Squared path-gain scale multiplying `|g|^2` on the uplink.
    pub ul_gain_sq_scale: Vec<T>,
    pub dl_bandwidth: T,
    pub dl_noise_density: T,
    pub server_power: T,
    pub dl_gain_sq_scale: Vec<T>,
    /// Cap on the broadcast time `t1`, s.
    pub t1_cap: Option<T>,
    /// Cap on the upload window `t2`, s.
    pub t2_cap: Option<T>,
}

impl<T: Scalar> RateContext<T> {
    pub fn num_users(&self) -> usize {
        self.powers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let u = self.powers.len();
        if u == 0
            || self.ul_bandwidth.len() != u
            || self.ul_gain_sq_scale.len() != u
            || self.dl_gain_sq_scale.len() != u
        {
            return Err(Error::dimension("rate context vectors disagree in length"));
        }
        if !(self.payload_bits > T::zero()) {
            return Err(Error::domain("payload must be positive"));
        }
        for cap in [self.t1_cap, self.t2_cap].into_iter().flatten() {
            if !(cap > T::zero()) {
                return Err(Error::infeasible("a nonpositive time cap leaves no room"));
            }
        }
        Ok(())
    }

    pub fn ul_rate(&self, user: usize, gain: C<T>) -> Result<T> {
        let g2 = gain.norm_sqr() * self.ul_gain_sq_scale[user];
        rate_from_gain(
            self.ul_bandwidth[user],
            self.ul_noise_density,
            g2,
            self.powers[user],
        )
    }

    pub fn dl_rate(&self, user: usize, gain: C<T>) -> Result<T> {
        let g2 = gain.norm_sqr() * self.dl_gain_sq_scale[user];
        rate_from_gain(self.dl_bandwidth, self.dl_noise_density, g2, self.server_power)
    }

    /// Smallest `|g|` under which user `u`'s uplink meets the `t2` cap.
    pub(crate) fn ul_gain_floor(&self, user: usize) -> Result<T> {
        match self.t2_cap {
            None => Ok(T::zero()),
            Some(cap) => gain_floor(
                self.payload_bits,
                cap,
                self.ul_bandwidth[user],
                self.ul_noise_density,
                self.powers[user],
                self.ul_gain_sq_scale[user],
                user,
            ),
        }
    }

    pub(crate) fn dl_gain_floor(&self, user: usize) -> Result<T> {
        match self.t1_cap {
            None => Ok(T::zero()),
            Some(cap) => gain_floor(
                self.payload_bits,
                cap,
                self.dl_bandwidth,
                self.dl_noise_density,
                self.server_power,
                self.dl_gain_sq_scale[user],
                user,
            ),
        }
    }
}

fn gain_floor<T: Scalar>(
    payload: T,
    cap: T,
    bandwidth: T,
    noise_density: T,
    power: T,
    scale: T,
    user: usize,
) -> Result<T> {
    // need B log2(1 + scale |g|^2 p / (B N0)) >= payload / cap
    let needed_snr = (real::<T>(2.0).powf(payload / (cap * bandwidth)) - T::one()).max(T::zero());
    if needed_snr == T::zero() {
        return Ok(T::zero());
    }
    let denom = power * scale;
    if !(denom > T::zero()) {
        return Err(Error::infeasible(format!(
            "user {user} has zero power or a dead path and cannot meet the time cap"
        )));
    }
    Ok((needed_snr * bandwidth * noise_density / denom).sqrt())
}

/// Push a complex target outward to the modulus floor, keeping its phase.
/// A zero target lands on the positive real axis.
fn radial_floor<T: Scalar>(target: C<T>, floor: T) -> C<T> {
    let m = target.norm_sqr().sqrt();
    if m >= floor {
        target
    } else if m > T::zero() {
        target * (floor / m)
    } else {
        C::new(floor, T::zero())
    }
}

/// First subproblem: effective gains and communication times with
/// everything else frozen. Each gain independently minimizes its
/// (optionally dual-shifted) consistency residual subject to the modulus
/// floor implied by the time caps; the times then sit tight on the slowest
/// link.
pub fn solve_aux<T: Scalar>(
    aux: &AuxState<T>,
    receive: &Beamformer<T>,
    transmit: &Beamformer<T>,
    ctx: &RateContext<T>,
    gain_shift_ul: Option<&[C<T>]>,
    gain_shift_dl: Option<&[C<T>]>,
) -> Result<AuxState<T>> {
    ctx.validate()?;
    let u = aux.num_users();
    if ctx.num_users() != u {
        return Err(Error::dimension("rate context does not cover every user"));
    }
    for i in 0..u {
        if aux.theta_ul[i].len() != receive.len() || aux.theta_dl[i].len() != transmit.len() {
            return Err(Error::dimension("response copies disagree with the beamformers"));
        }
    }
    if let Some(s) = gain_shift_ul {
        if s.len() != u {
            return Err(Error::dimension("uplink shifts disagree with the user count"));
        }
    }
    if let Some(s) = gain_shift_dl {
        if s.len() != u {
            return Err(Error::dimension("downlink shifts disagree with the user count"));
        }
    }

    let zero = C::new(T::zero(), T::zero());
    let mut next = aux.clone();
    for i in 0..u {
        let su = gain_shift_ul.map_or(zero, |s| s[i]);
        let sd = gain_shift_dl.map_or(zero, |s| s[i]);
        let target_ul = cdot(receive.weights(), &aux.theta_ul[i]) - su;
        let target_dl = cdot(&aux.theta_dl[i], transmit.weights()) - sd;
        next.g_ul[i] = radial_floor(target_ul, ctx.ul_gain_floor(i)?);
        next.g_dl[i] = radial_floor(target_dl, ctx.dl_gain_floor(i)?);
    }

    let mut t1 = T::zero();
    let mut t2 = T::zero();
    for i in 0..u {
        let r_dl = ctx.dl_rate(i, next.g_dl[i])?;
        let r_ul = ctx.ul_rate(i, next.g_ul[i])?;
        if !(r_dl > T::zero()) || !(r_ul > T::zero()) {
            return Err(Error::infeasible(format!(
                "user {i} has zero rate at the auxiliary optimum; times are unbounded"
            )));
        }
        t1 = t1.max(ctx.payload_bits / r_dl);
        t2 = t2.max(ctx.payload_bits / r_ul);
    }
    next.t1 = t1;
    next.t2 = t2;
    Ok(next)
}

/// Value of the single-user phase-alignment objective
/// `|g - <weights, theta>|^2 + ||theta - response||^2`, where the inner
/// product is `q^H theta` on the uplink and `theta^H w` on the downlink.
pub fn modulus_objective<T: Scalar>(
    theta: &[C<T>],
    weights: &[C<T>],
    direction: LinkDirection,
    gain_target: C<T>,
    response_target: &[C<T>],
) -> Result<T> {
    if theta.len() != weights.len() || theta.len() != response_target.len() {
        return Err(Error::dimension("phase objective inputs disagree in length"));
    }
    let fit = match direction {
        LinkDirection::Uplink => cdot(weights, theta),
        LinkDirection::Downlink => cdot(theta, weights),
    };
    let r = gain_target - fit;
    let mut geom = T::zero();
    for (t, a) in theta.iter().zip(response_target) {
        geom += (*t - *a).norm_sqr();
    }
    Ok(r.norm_sqr() + geom)
}

/// Second subproblem: one cyclic sweep of exact per-element phase updates
/// on a single user's response copy. Each element's phase has a closed
/// form given the others, so the objective never increases.
pub fn unit_modulus_update<T: Scalar>(
    theta: &mut [C<T>],
    weights: &[C<T>],
    direction: LinkDirection,
    gain_target: C<T>,
    response_target: &[C<T>],
) -> Result<()> {
    let n = theta.len();
    if n == 0 || weights.len() != n || response_target.len() != n {
        return Err(Error::dimension("phase update inputs disagree in length"));
    }
    // running inner product, corrected incrementally as elements move
    let mut fit = match direction {
        LinkDirection::Uplink => cdot(weights, theta),
        LinkDirection::Downlink => cdot(theta, weights),
    };
    for i in 0..n {
        let (own, update): (C<T>, C<T>) = match direction {
            LinkDirection::Uplink => {
                let own = weights[i].conj() * theta[i];
                let c = gain_target - (fit - own);
                (own, weights[i] * c + response_target[i])
            }
            LinkDirection::Downlink => {
                let own = theta[i].conj() * weights[i];
                let c = gain_target - (fit - own);
                (own, c.conj() * weights[i] + response_target[i])
            }
        };
        let m = update.norm_sqr().sqrt();
        if m > T::zero() {
            theta[i] = update / m;
        }
        let new_own = match direction {
            LinkDirection::Uplink => weights[i].conj() * theta[i],
            LinkDirection::Downlink => theta[i].conj() * weights[i],
        };
        fit = fit - own + new_own;
    }
    Ok(())
}

/// Result of one unit-sphere solve.
#[derive(Debug, Clone)]
pub struct SphereResult<T> {
    pub vector: Vec<C<T>>,
    pub objective: T,
    pub converged: bool,
    pub iterations: usize,
}

/// Riemannian gradient norm at which the sphere solver declares
/// stationarity.
pub const SPHERE_GRAD_TOL: f64 = 1e-6;
const SPHERE_MAX_ITERS: usize = 500;

fn sphere_objective<T: Scalar>(
    v: &[C<T>],
    thetas: &[Vec<C<T>>],
    targets: &[C<T>],
    role: BeamformerRole,
) -> T {
    let mut acc = T::zero();
    for (theta, &g) in thetas.iter().zip(targets) {
        let fit = match role {
            BeamformerRole::Receive => cdot(v, theta),
            BeamformerRole::Transmit => cdot(theta, v),
        };
        acc += (g - fit).norm_sqr();
    }
    acc
}

fn sphere_euclidean_grad<T: Scalar>(
    v: &[C<T>],
    thetas: &[Vec<C<T>>],
    targets: &[C<T>],
    role: BeamformerRole,
) -> Vec<C<T>> {
    let n = v.len();
    let mut grad = vec![C::new(T::zero(), T::zero()); n];
    let two = real::<T>(2.0);
    for (theta, &g) in thetas.iter().zip(targets) {
        match role {
            BeamformerRole::Receive => {
                // d/d(conj v) of |g - v^H theta|^2 is -conj(residual) * theta
                let r = g - cdot(v, theta);
                for (gi, t) in grad.iter_mut().zip(theta) {
                    *gi -= *t * r.conj() * two;
                }
            }
            BeamformerRole::Transmit => {
                let r = g - cdot(theta, v);
                for (gi, t) in grad.iter_mut().zip(theta) {
                    *gi -= *t * r * two;
                }
            }
        }
    }
    grad
}

/// Remove the component along `v` under the real inner product; what stays
/// is tangent to the unit sphere at `v`.
fn tangent_project<T: Scalar>(v: &[C<T>], grad: &[C<T>]) -> Vec<C<T>> {
    let mut along = T::zero();
    for (a, b) in v.iter().zip(grad) {
        along += a.re * b.re + a.im * b.im;
    }
    v.iter().zip(grad).map(|(a, b)| *b - *a * along).collect()
}

fn renormalize<T: Scalar>(v: &mut [C<T>]) {
    let n = cnorm2(v).sqrt();
    if n > T::zero() {
        for x in v.iter_mut() {
            *x = *x / n;
        }
    }
}

/// Orthonormal basis of the span of `vectors` (re-orthogonalized
/// Gram-Schmidt); near-dependent directions are dropped.
fn span_basis<T: Scalar>(vectors: &[Vec<C<T>>]) -> Vec<Vec<C<T>>> {
    let mut basis: Vec<Vec<C<T>>> = Vec::new();
    for v in vectors {
        let scale = cnorm2(v).sqrt();
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let coef = cdot(b, &w);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= *bi * coef;
                }
            }
        }
        let norm = cnorm2(&w).sqrt();
        if norm > real::<T>(1e-10) * (scale + T::one()) {
            for wi in w.iter_mut() {
                *wi = *wi / norm;
            }
            basis.push(w);
        }
    }
    basis
}

/// Solve `(m + shift I) z = rhs` for a small Hermitian `m` by complex
/// Cholesky; `None` when the shifted matrix is not positive definite.
fn cholesky_solve<T: Scalar>(m: &[Vec<C<T>>], shift: T, rhs: &[C<T>]) -> Option<Vec<C<T>>> {
    let r = m.len();
    let zero = C::new(T::zero(), T::zero());
    let mut l = vec![vec![zero; r]; r];
    for i in 0..r {
        for j in 0..=i {
            let mut s = m[i][j];
            if i == j {
                s += C::new(shift, T::zero());
            }
            for k in 0..j {
                s -= l[i][k] * l[j][k].conj();
            }
            if i == j {
                if !(s.re > T::zero()) {
                    return None;
                }
                l[i][j] = C::new(s.re.sqrt(), T::zero());
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = rhs.to_vec();
    for i in 0..r {
        for k in 0..i {
            let yk = y[k];
            y[i] -= l[i][k] * yk;
        }
        y[i] = y[i] / l[i][i];
    }
    for i in (0..r).rev() {
        for k in (i + 1)..r {
            let yk = y[k];
            y[i] -= l[k][i].conj() * yk;
        }
        y[i] = y[i] / l[i][i];
    }
    Some(y)
}

/// A vector of squared norm `deficit` orthogonal to every basis column:
/// the warm start's out-of-span component when it has one, else the
/// standard direction leaning furthest out of the span.
fn complement_pad<T: Scalar>(init: &[C<T>], basis: &[Vec<C<T>>], deficit: T) -> Vec<C<T>> {
    let n = init.len();
    let zero = C::new(T::zero(), T::zero());
    let project_out = |v: &[C<T>]| -> Vec<C<T>> {
        let mut w = v.to_vec();
        for b in basis {
            let coef = cdot(b, &w);
            for (wi, bi) in w.iter_mut().zip(b) {
                *wi -= *bi * coef;
            }
        }
        w
    };
    let mut w = project_out(init);
    let mut wn2 = cnorm2(&w);
    if wn2 < real::<T>(1e-16) {
        for i in 0..n {
            let mut e = vec![zero; n];
            e[i] = C::new(T::one(), T::zero());
            let cand = project_out(&e);
            let cn2 = cnorm2(&cand);
            if cn2 > wn2 {
                w = cand;
                wn2 = cn2;
            }
        }
    }
    let scale = (deficit / wn2).sqrt();
    for wi in w.iter_mut() {
        *wi = *wi * scale;
    }
    w
}

const SPHERE_BISECT_ITERS: usize = 128;

/// Minimize the summed squared residuals against the gain targets over the
/// unit sphere. The objective sees the beamformer only through its inner
/// products with the response copies, so the solve reduces to their span:
/// the normal equations give the span component (with a nonnegative
/// diagonal shift found by bisection when the free solution leaves the
/// unit ball), and leftover norm is padded orthogonally to the span, where
/// the objective is flat. The full-rank case with an interior optimum
/// would need a negative shift; projected descent handles it instead.
fn sphere_least_squares<T: Scalar>(
    init: &[C<T>],
    thetas: &[Vec<C<T>>],
    targets: &[C<T>],
    role: BeamformerRole,
) -> Result<SphereResult<T>> {
    if thetas.is_empty() || thetas.len() != targets.len() {
        return Err(Error::dimension("sphere solve needs aligned targets"));
    }
    let n = init.len();
    if n == 0 || thetas.iter().any(|t| t.len() != n) {
        return Err(Error::dimension("response copies must match the element count"));
    }

    let basis = span_basis(thetas);
    let r = basis.len();
    if r == 0 {
        // every response copy is zero: the objective ignores the beamformer
        let mut v = init.to_vec();
        renormalize(&mut v);
        let f = sphere_objective(&v, thetas, targets, role);
        return Ok(SphereResult {
            vector: v,
            objective: f,
            converged: true,
            iterations: 0,
        });
    }

    // both roles reduce to rows |h_u - theta_u^H v|^2
    let h: Vec<C<T>> = match role {
        BeamformerRole::Receive => targets.iter().map(|g| g.conj()).collect(),
        BeamformerRole::Transmit => targets.to_vec(),
    };
    let coords: Vec<Vec<C<T>>> = thetas
        .iter()
        .map(|t| basis.iter().map(|b| cdot(b, t)).collect())
        .collect();
    let zero = C::new(T::zero(), T::zero());
    let mut normal = vec![vec![zero; r]; r];
    let mut rhs = vec![zero; r];
    for (p, &hu) in coords.iter().zip(&h) {
        for i in 0..r {
            rhs[i] += p[i] * hu;
            for j in 0..r {
                normal[i][j] += p[i] * p[j].conj();
            }
        }
    }

    let one = T::one();
    let norm2 = |z: &[C<T>]| -> T { z.iter().map(|c| c.norm_sqr()).sum() };
    let assemble = |z: &[C<T>], pad: Option<&[C<T>]>| -> Vec<C<T>> {
        let mut v = vec![zero; n];
        for (b, &zi) in basis.iter().zip(z) {
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi += *bi * zi;
            }
        }
        if let Some(w) = pad {
            for (vi, wi) in v.iter_mut().zip(w) {
                *vi += *wi;
            }
        }
        renormalize(&mut v);
        v
    };

    if let Some(z) = cholesky_solve(&normal, T::zero(), &rhs) {
        let zn2 = norm2(&z);
        if zn2 <= one + real::<T>(1e-12) {
            if r < n {
                let deficit = (one - zn2).max(T::zero());
                let pad = if deficit > real::<T>(1e-14) {
                    Some(complement_pad(init, &basis, deficit))
                } else {
                    None
                };
                let v = assemble(&z, pad.as_deref());
                let f = sphere_objective(&v, thetas, targets, role);
                return Ok(SphereResult {
                    vector: v,
                    objective: f,
                    converged: true,
                    iterations: 0,
                });
            }
            return Ok(sphere_descent(init, thetas, targets, role));
        }
    }

    // free solution outside the unit ball (or a singular normal matrix):
    // bracket a shift whose solution is inside, then bisect; the solution
    // norm is strictly decreasing in the shift
    let mut iterations = 0usize;
    let mut lo = T::zero();
    let mut hi = rhs.iter().map(|c| c.norm_sqr()).sum::<T>().sqrt().max(T::epsilon());
    let mut z_best: Option<Vec<C<T>>> = None;
    for _ in 0..64 {
        iterations += 1;
        if let Some(z) = cholesky_solve(&normal, hi, &rhs) {
            if norm2(&z) <= one {
                z_best = Some(z);
                break;
            }
        }
        hi = hi * real::<T>(2.0);
    }
    if z_best.is_none() {
        return Ok(sphere_descent(init, thetas, targets, role));
    }
    for _ in 0..SPHERE_BISECT_ITERS {
        if hi - lo <= T::epsilon() * hi.max(one) {
            break;
        }
        iterations += 1;
        let mid = (lo + hi) / real::<T>(2.0);
        match cholesky_solve(&normal, mid, &rhs) {
            Some(z) if norm2(&z) <= one => {
                hi = mid;
                z_best = Some(z);
            }
            _ => lo = mid,
        }
    }
    let v = assemble(z_best.as_ref().expect("bracketed above"), None);
    let f = sphere_objective(&v, thetas, targets, role);
    Ok(SphereResult {
        vector: v,
        objective: f,
        converged: true,
        iterations,
    })
}

/// Projected-gradient fallback with Armijo backtracking; monotone from the
/// warm start, which is all the sweep requires of it.
fn sphere_descent<T: Scalar>(
    init: &[C<T>],
    thetas: &[Vec<C<T>>],
    targets: &[C<T>],
    role: BeamformerRole,
) -> SphereResult<T> {
    let mut v = init.to_vec();
    renormalize(&mut v);
    let mut f = sphere_objective(&v, thetas, targets, role);
    let tol = real::<T>(SPHERE_GRAD_TOL);
    let sigma = real::<T>(1e-4);
    let mut step = T::one();
    for it in 0..SPHERE_MAX_ITERS {
        let grad = sphere_euclidean_grad(&v, thetas, targets, role);
        let tangent = tangent_project(&v, &grad);
        let gnorm2 = cnorm2(&tangent);
        if gnorm2.sqrt() < tol {
            return SphereResult {
                vector: v,
                objective: f,
                converged: true,
                iterations: it,
            };
        }
        // backtracking along the retracted ray
        let mut t = step;
        let mut accepted = false;
        while t > real(1e-16) {
            let mut cand: Vec<C<T>> = v.iter().zip(&tangent).map(|(a, b)| *a - *b * t).collect();
            renormalize(&mut cand);
            let fc = sphere_objective(&cand, thetas, targets, role);
            if fc <= f - sigma * t * gnorm2 {
                v = cand;
                f = fc;
                step = (t * real(2.0)).min(T::one());
                accepted = true;
                break;
            }
            t = t * real(0.5);
        }
        if !accepted {
            // no descent along the tangent: numerically stationary
            return SphereResult {
                vector: v,
                objective: f,
                converged: true,
                iterations: it,
            };
        }
    }
    SphereResult {
        vector: v,
        objective: f,
        converged: false,
        iterations: SPHERE_MAX_ITERS,
    }
}

/// Third subproblem: both unit-norm beamformers against their (optionally
/// dual-shifted) gain targets. Returns the updated pair and whether both
/// solves reached sphere stationarity.
pub fn beamformer_update<T: Scalar>(
    receive: &Beamformer<T>,
    transmit: &Beamformer<T>,
    g_ul: &[C<T>],
    theta_ul: &[Vec<C<T>>],
    g_dl: &[C<T>],
    theta_dl: &[Vec<C<T>>],
) -> Result<(Beamformer<T>, Beamformer<T>, bool)> {
    let q = sphere_least_squares(receive.weights(), theta_ul, g_ul, BeamformerRole::Receive)?;
    let w = sphere_least_squares(transmit.weights(), theta_dl, g_dl, BeamformerRole::Transmit)?;
    Ok((
        Beamformer::new(q.vector, BeamformerRole::Receive)?,
        Beamformer::new(w.vector, BeamformerRole::Transmit)?,
        q.converged && w.converged,
    ))
}

fn principal_wrap<T: Scalar>(phi: T) -> T {
    let pi = real::<T>(std::f64::consts::PI);
    let two_pi = pi + pi;
    let mut w = phi % two_pi;
    if w > pi {
        w -= two_pi;
    } else if w < -pi {
        w += two_pi;
    }
    w
}

/// Per-user spatial frequencies `(2 pi / lambda) cos(arrival)` and
/// `(2 pi / lambda) sin(departure)`.
fn spatial_freqs<T: Scalar>(aoa: &[T], aod: &[T], wavelength: T) -> (Vec<T>, Vec<T>) {
    let k = real::<T>(2.0 * std::f64::consts::PI) / wavelength;
    (
        aoa.iter().map(|&a| k * a.cos()).collect(),
        aod.iter().map(|&a| k * a.sin()).collect(),
    )
}

/// The position objective: squared phase residuals of every user's
/// response copies against the element phases `k * x`, each target phase
/// wrapped to the branch nearest the anchor. The analytic gradient comes
/// along so tests can difference one against the other.
pub fn position_objective_and_grad<T: Scalar>(
    theta_ul: &[Vec<C<T>>],
    theta_dl: &[Vec<C<T>>],
    aoa: &[T],
    aod: &[T],
    wavelength: T,
    anchors: &[T],
    x: &[T],
) -> Result<(T, Vec<T>)> {
    let users = theta_ul.len();
    if theta_dl.len() != users || aoa.len() != users || aod.len() != users || users == 0 {
        return Err(Error::dimension("per-user position inputs disagree"));
    }
    let n = anchors.len();
    if x.len() != n || theta_ul.iter().chain(theta_dl).any(|t| t.len() != n) {
        return Err(Error::dimension("positions and response copies disagree in length"));
    }
    let (kul, kdl) = spatial_freqs(aoa, aod, wavelength);
    let mut f = T::zero();
    let mut grad = vec![T::zero(); n];
    let two = real::<T>(2.0);
    for u in 0..users {
        for i in 0..n {
            let d_ul = principal_wrap(theta_ul[u][i].arg() - kul[u] * anchors[i]);
            let r_ul = kul[u] * (x[i] - anchors[i]) - d_ul;
            let d_dl = principal_wrap(theta_dl[u][i].arg() - kdl[u] * anchors[i]);
            let r_dl = kdl[u] * (x[i] - anchors[i]) - d_dl;
            f += r_ul * r_ul + r_dl * r_dl;
            grad[i] += two * (kul[u] * r_ul + kdl[u] * r_dl);
        }
    }
    Ok((f, grad))
}

/// Fourth subproblem: element positions. The per-element quadratic has a
/// closed-form unconstrained minimizer; the spacing constraints, linearized
/// around the anchors (which fixes the element order), plus the aperture
/// box reduce to an isotonic projection after the substitution
/// `y_i = x_(i) - i * spacing`.
pub fn ma_position_update<T: Scalar>(
    theta_ul: &[Vec<C<T>>],
    theta_dl: &[Vec<C<T>>],
    aoa: &[T],
    aod: &[T],
    wavelength: T,
    anchors: &ArrayGeometry<T>,
) -> Result<ArrayGeometry<T>> {
    let n = anchors.len();
    let xbar = anchors.positions();
    let users = theta_ul.len();
    if theta_dl.len() != users || aoa.len() != users || aod.len() != users || users == 0 {
        return Err(Error::dimension("per-user position inputs disagree"));
    }
    if theta_ul.iter().chain(theta_dl).any(|t| t.len() != n) {
        return Err(Error::dimension("response copies must cover every element"));
    }
    let (kul, kdl) = spatial_freqs(aoa, aod, wavelength);

    // unconstrained per-element minimizers
    let denom: T = kul.iter().zip(&kdl).map(|(&a, &b)| a * a + b * b).sum();
    let mut targets = vec![T::zero(); n];
    for i in 0..n {
        if denom > T::zero() {
            let mut num = T::zero();
            for u in 0..users {
                let d_ul = principal_wrap(theta_ul[u][i].arg() - kul[u] * xbar[i]);
                let d_dl = principal_wrap(theta_dl[u][i].arg() - kdl[u] * xbar[i]);
                num += kul[u] * (kul[u] * xbar[i] + d_ul) + kdl[u] * (kdl[u] * xbar[i] + d_dl);
            }
            targets[i] = num / denom;
        } else {
            // no angular information at all: stay put
            targets[i] = xbar[i];
        }
    }

    // order fixed by the anchors; equal anchors break ties by index
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xbar[a].partial_cmp(&xbar[b]).expect("finite").then(a.cmp(&b)));

    let v = anchors.min_spacing();
    let (lo, hi) = anchors.aperture();
    // anchors validated to SPACING_TOL can leave the head negative by at
    // most (n-1) * tol; anything beyond that is a genuinely bad request
    let slack = real::<T>(SPACING_TOL) * count::<T>(n.max(2) - 1);
    let head = hi - lo - v * count::<T>(n - 1);
    if head < -slack {
        return Err(Error::infeasible(
            "aperture too small for the requested element count and spacing",
        ));
    }
    let head = head.max(T::zero());
    let shifted: Vec<T> = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| targets[i] - lo - v * count::<T>(rank))
        .collect();
    let mono = pava_nondecreasing(&shifted);
    let mut positions = vec![T::zero(); n];
    for (rank, &i) in order.iter().enumerate() {
        let y = mono[rank].max(T::zero()).min(head);
        positions[i] = y + lo + v * count::<T>(rank);
    }
    anchors.with_positions(positions)
}
