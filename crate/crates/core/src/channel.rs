//! Link model for a linear array whose elements can be repositioned along a
//! one-dimensional aperture: geometry and spacing rules, line-of-sight
//! steering vectors, achievable uplink/downlink rates, per-round fading
//! draws, and the post-combining SNR used by the round metrics.
//!
//! Conventions: positions are in meters, angles in radians in `[0, pi]`,
//! bandwidths in Hz, noise densities in W/Hz, powers in W. The uplink phase
//! of element `i` toward arrival angle `phi` is `(2*pi/lambda) * x_i *
//! cos(phi)`; departure angles use the sine instead.

use crate::error::{Error, Result};
use crate::linalg::{cdot, cnorm, cnorm2, C};
use crate::rng::{label, stream_rng};
use crate::scalar::{count, real, Scalar};

/// Absolute tolerance on the minimum-spacing and aperture checks.
pub const SPACING_TOL: f64 = 1e-6;
/// Unit-norm tolerance for beamformer weights.
pub const BEAM_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkDirection {
    Uplink,
    Downlink,
}

/// Element positions on a shared line segment, with a minimum inter-element
/// spacing. Positions are not required to be sorted; the spacing rule applies
/// to every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry<T> {
    positions: Vec<T>,
    min_spacing: T,
    aperture: (T, T),
}

impl<T: Scalar> ArrayGeometry<T> {
    pub fn new(positions: Vec<T>, min_spacing: T, aperture: (T, T)) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::dimension("array needs at least one element"));
        }
        if !(min_spacing > T::zero()) || !min_spacing.is_finite() {
            return Err(Error::domain("minimum spacing must be positive"));
        }
        if !(aperture.1 > aperture.0) {
            return Err(Error::domain("aperture upper end must exceed lower end"));
        }
        let geom = ArrayGeometry {
            positions,
            min_spacing,
            aperture,
        };
        geom.check()?;
        Ok(geom)
    }

    /// Uniformly spaced layout starting at the aperture's lower end.
    pub fn uniform(n: usize, spacing: T, min_spacing: T, aperture: (T, T)) -> Result<Self> {
        let positions = (0..n).map(|i| aperture.0 + spacing * count(i)).collect();
        Self::new(positions, min_spacing, aperture)
    }

    fn check(&self) -> Result<()> {
        let tol = real::<T>(SPACING_TOL);
        for (i, &x) in self.positions.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::numeric(format!("element {i} position not finite")));
            }
            if x < self.aperture.0 - tol || x > self.aperture.1 + tol {
                return Err(Error::domain(format!(
                    "element {i} outside aperture [{}, {}]",
                    self.aperture.0, self.aperture.1
                )));
            }
        }
        let mut sorted = self.positions.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite positions"));
        for w in sorted.windows(2) {
            if w[1] - w[0] < self.min_spacing - tol {
                return Err(Error::domain(format!(
                    "element spacing {} below minimum {}",
                    w[1] - w[0],
                    self.min_spacing
                )));
            }
        }
        Ok(())
    }

    pub fn positions(&self) -> &[T] {
        &self.positions
    }
    pub fn len(&self) -> usize {
        self.positions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
    pub fn min_spacing(&self) -> T {
        self.min_spacing
    }
    pub fn aperture(&self) -> (T, T) {
        self.aperture
    }

    /// Same spacing/aperture contract, new positions.
    pub fn with_positions(&self, positions: Vec<T>) -> Result<Self> {
        Self::new(positions, self.min_spacing, self.aperture)
    }
}

/// Steering vector of the array toward one user: unit-modulus phasors
/// `exp(j * (2*pi/lambda) * x_i * trig(angle))` where `trig` is `cos` for
/// arrivals (uplink) and `sin` for departures (downlink).
pub fn array_response<T: Scalar>(
    geometry: &ArrayGeometry<T>,
    angle: T,
    direction: LinkDirection,
    wavelength: T,
) -> Result<Vec<C<T>>> {
    if !(wavelength > T::zero()) || !wavelength.is_finite() {
        return Err(Error::domain("wavelength must be positive"));
    }
    if !angle.is_finite() {
        return Err(Error::domain("angle must be finite"));
    }
    let two_pi = real::<T>(std::f64::consts::TAU);
    let trig = match direction {
        LinkDirection::Uplink => angle.cos(),
        LinkDirection::Downlink => angle.sin(),
    };
    let k = two_pi / wavelength * trig;
    Ok(geometry
        .positions()
        .iter()
        .map(|&x| {
            let phase = k * x;
            C::new(phase.cos(), phase.sin())
        })
        .collect())
}

/// Beamformer role: receive combining on the uplink or transmit precoding on
/// the downlink.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeamformerRole {
    Receive,
    Transmit,
}

/// Unit-norm complex weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer<T> {
    weights: Vec<C<T>>,
    role: BeamformerRole,
}

impl<T: Scalar> Beamformer<T> {
    /// Accepts weights already normalized to unit Euclidean norm.
    pub fn new(weights: Vec<C<T>>, role: BeamformerRole) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::dimension("beamformer needs at least one weight"));
        }
        let n = cnorm(&weights);
        if (n - T::one()).abs() > real(BEAM_NORM_TOL) {
            return Err(Error::domain(format!("beamformer norm {n} is not 1")));
        }
        Ok(Beamformer { weights, role })
    }

    /// Normalizes arbitrary nonzero weights.
    pub fn normalized(weights: Vec<C<T>>, role: BeamformerRole) -> Result<Self> {
        let n = cnorm(&weights);
        if n < real(1e-12) {
            return Err(Error::domain("cannot normalize zero beamformer"));
        }
        let weights = weights.into_iter().map(|w| w / n).collect();
        Ok(Beamformer { weights, role })
    }

    pub fn weights(&self) -> &[C<T>] {
        &self.weights
    }
    pub fn role(&self) -> BeamformerRole {
        self.role
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Static per-user link description: line-of-sight path gains, angles, and
/// the radio constants shared by both directions.
#[derive(Debug, Clone)]
pub struct LinkState<T> {
    /// Complex uplink path gain per user.
    pub ul_path_gain: Vec<C<T>>,
    /// Complex downlink path gain per user.
    pub dl_path_gain: Vec<C<T>>,
    /// Angle of arrival per user, radians in `[0, pi]`.
    pub aoa: Vec<T>,
    /// Angle of departure per user, radians in `[0, pi]`.
    pub aod: Vec<T>,
    /// Carrier wavelength, meters.
    pub wavelength: T,
    /// Uplink bandwidth per user, Hz.
    pub ul_bandwidth: Vec<T>,
    /// Downlink bandwidth, Hz.
    pub dl_bandwidth: T,
    /// Uplink noise power spectral density, W/Hz.
    pub ul_noise_density: T,
    /// Downlink noise power spectral density, W/Hz.
    pub dl_noise_density: T,
    /// Server transmit power, W.
    pub server_power: T,
}

impl<T: Scalar> LinkState<T> {
    pub fn validate(&self) -> Result<()> {
        let u = self.ul_path_gain.len();
        if u == 0 {
            return Err(Error::dimension("link state needs at least one user"));
        }
        if self.dl_path_gain.len() != u
            || self.aoa.len() != u
            || self.aod.len() != u
            || self.ul_bandwidth.len() != u
        {
            return Err(Error::dimension("per-user link fields disagree in length"));
        }
        let pi = real::<T>(std::f64::consts::PI);
        for i in 0..u {
            if !self.ul_path_gain[i].re.is_finite()
                || !self.ul_path_gain[i].im.is_finite()
                || !self.dl_path_gain[i].re.is_finite()
                || !self.dl_path_gain[i].im.is_finite()
            {
                return Err(Error::numeric(format!("path gain for user {i} not finite")));
            }
            for (name, a) in [("aoa", self.aoa[i]), ("aod", self.aod[i])] {
                if !a.is_finite() || a < T::zero() || a > pi {
                    return Err(Error::domain(format!("{name} for user {i} outside [0, pi]")));
                }
            }
            if !(self.ul_bandwidth[i] > T::zero()) {
                return Err(Error::domain(format!("uplink bandwidth for user {i} not positive")));
            }
        }
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("dl_bandwidth", self.dl_bandwidth),
            ("ul_noise_density", self.ul_noise_density),
            ("dl_noise_density", self.dl_noise_density),
            ("server_power", self.server_power),
        ] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be strictly positive")));
            }
        }
        Ok(())
    }

    pub fn num_users(&self) -> usize {
        self.ul_path_gain.len()
    }

    /// Line-of-sight uplink channel of one user on the given geometry.
    pub fn ul_channel(&self, geometry: &ArrayGeometry<T>, user: usize) -> Result<Vec<C<T>>> {
        self.user_in_range(user)?;
        let a = array_response(geometry, self.aoa[user], LinkDirection::Uplink, self.wavelength)?;
        Ok(a.into_iter().map(|z| z * self.ul_path_gain[user]).collect())
    }

    /// Line-of-sight downlink channel of one user on the given geometry.
    pub fn dl_channel(&self, geometry: &ArrayGeometry<T>, user: usize) -> Result<Vec<C<T>>> {
        self.user_in_range(user)?;
        let a = array_response(geometry, self.aod[user], LinkDirection::Downlink, self.wavelength)?;
        Ok(a.into_iter().map(|z| z * self.dl_path_gain[user]).collect())
    }

    fn user_in_range(&self, user: usize) -> Result<()> {
        if user >= self.num_users() {
            return Err(Error::dimension(format!(
                "user {user} out of range ({} users)",
                self.num_users()
            )));
        }
        Ok(())
    }
}

/// Shannon rate from an effective channel power gain: `bw * log2(1 + g2 * p /
/// (bw * n0))`. Shared by both directions and by the solver's decoupled
/// gains.
pub fn rate_from_gain<T: Scalar>(bandwidth: T, noise_density: T, gain_sq: T, power: T) -> Result<T> {
    if !(bandwidth > T::zero()) || !(noise_density > T::zero()) {
        return Err(Error::domain("bandwidth and noise density must be positive"));
    }
    if gain_sq < T::zero() || power < T::zero() || !gain_sq.is_finite() || !power.is_finite() {
        return Err(Error::domain("gain and power must be finite and nonnegative"));
    }
    let snr = gain_sq * power / (bandwidth * noise_density);
    Ok(bandwidth * snr.ln_1p() / real::<T>(std::f64::consts::LN_2))
}

/// Achievable uplink rate of one user after receive combining, bits/s.
pub fn uplink_rate<T: Scalar>(
    link: &LinkState<T>,
    geometry: &ArrayGeometry<T>,
    combiner: &Beamformer<T>,
    user: usize,
    power: T,
) -> Result<T> {
    if combiner.role() != BeamformerRole::Receive {
        return Err(Error::domain("uplink rate needs a receive beamformer"));
    }
    if combiner.len() != geometry.len() {
        return Err(Error::dimension("beamformer/array dimension mismatch"));
    }
    let h = link.ul_channel(geometry, user)?;
    let eff = cdot(combiner.weights(), &h);
    rate_from_gain(
        link.ul_bandwidth[user],
        link.ul_noise_density,
        eff.norm_sqr(),
        power,
    )
}

/// Achievable downlink rate of one user under the shared precoder, bits/s.
pub fn downlink_rate<T: Scalar>(
    link: &LinkState<T>,
    geometry: &ArrayGeometry<T>,
    precoder: &Beamformer<T>,
    user: usize,
) -> Result<T> {
    if precoder.role() != BeamformerRole::Transmit {
        return Err(Error::domain("downlink rate needs a transmit beamformer"));
    }
    if precoder.len() != geometry.len() {
        return Err(Error::dimension("beamformer/array dimension mismatch"));
    }
    let h = link.dl_channel(geometry, user)?;
    let eff = cdot(&h, precoder.weights());
    rate_from_gain(
        link.dl_bandwidth,
        link.dl_noise_density,
        eff.norm_sqr(),
        link.server_power,
    )
}

/// Per-round stochastic channel parameters. The generative model keeps the
/// line-of-sight steering structure and layers on: a Rician scattered part
/// built from equal-power complex-Gaussian rays with uniformly random arrival
/// angles, a per-round LoS presence/blockage coin, and i.i.d. log-normal
/// shadowing. `carrier_hz` documents the band; `user_speed_mps` is carried
/// for reporting and does not add intra-round dynamics.
#[derive(Debug, Clone)]
pub struct FadingConfig<T> {
    pub carrier_hz: T,
    pub rician_k_db: T,
    pub num_paths: usize,
    pub p_los: T,
    pub blockage_prob: T,
    pub shadowing_std_db: T,
    pub user_speed_mps: T,
    pub rng_seed: u64,
}

impl<T: Scalar> FadingConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_hz > T::zero()) {
            return Err(Error::domain("carrier frequency must be positive"));
        }
        if !self.rician_k_db.is_finite() {
            return Err(Error::domain("Rician K (dB) must be finite"));
        }
        if self.num_paths == 0 {
            return Err(Error::domain("need at least one scattered path"));
        }
        for (name, v) in [("p_los", self.p_los), ("blockage_prob", self.blockage_prob)] {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::domain(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.shadowing_std_db < T::zero() || self.user_speed_mps < T::zero() {
            return Err(Error::domain("shadowing std and speed must be nonnegative"));
        }
        Ok(())
    }
}

/// Draws the uplink channel realization of every user for one round.
/// Deterministic in `(rng_seed, round, user)` regardless of call order.
pub fn draw_round_channel<T: Scalar>(
    config: &FadingConfig<T>,
    link: &LinkState<T>,
    geometry: &ArrayGeometry<T>,
    round: u64,
) -> Result<Vec<Vec<C<T>>>> {
    config.validate()?;
    link.validate()?;
    let k_lin = real::<T>(10.0).powf(config.rician_k_db / real(10.0));
    let los_scale = (k_lin / (k_lin + T::one())).sqrt();
    let nlos_scale = (T::one() / (k_lin + T::one())).sqrt();
    let pi = real::<T>(std::f64::consts::PI);
    let mut out = Vec::with_capacity(link.num_users());
    for user in 0..link.num_users() {
        let mut rng = stream_rng(config.rng_seed, label::FADING, round, user as u64);
        // Fixed draw order per user: presence coin, blockage coin, shadowing,
        // then num_paths * (angle, re, im). Changing one knob never shifts
        // another user's stream.
        let los_present = T::unit_uniform(&mut rng) < config.p_los;
        let blocked = T::unit_uniform(&mut rng) < config.blockage_prob;
        let shadow_db = config.shadowing_std_db * T::std_normal(&mut rng);
        let shadow = real::<T>(10.0).powf(shadow_db / real(20.0));
        let los = link.ul_channel(geometry, user)?;
        let alpha_mag = link.ul_path_gain[user].norm();
        let mut scatter = vec![C::new(T::zero(), T::zero()); geometry.len()];
        let ray_scale = alpha_mag / count::<T>(config.num_paths).sqrt();
        for _ in 0..config.num_paths {
            let ray_angle = T::unit_uniform(&mut rng) * pi;
            let coeff = C::new(T::std_normal(&mut rng), T::std_normal(&mut rng))
                * real::<T>(std::f64::consts::FRAC_1_SQRT_2);
            let steer = array_response(geometry, ray_angle, LinkDirection::Uplink, link.wavelength)?;
            for (s, a) in scatter.iter_mut().zip(&steer) {
                *s += a * coeff * ray_scale;
            }
        }
        let los_on = if los_present && !blocked { T::one() } else { T::zero() };
        let h: Vec<C<T>> = los
            .iter()
            .zip(&scatter)
            .map(|(l, s)| (*l * (los_scale * los_on) + *s * nlos_scale) * shadow)
            .collect();
        out.push(h);
    }
    Ok(out)
}

/// Sum of combined signal powers of the active users divided by the combined
/// noise power: `sum_u |q^H h_u|^2 p_u / noise_power`.
pub fn post_combining_snr<T: Scalar>(
    realizations: &[Vec<C<T>>],
    combiner: &Beamformer<T>,
    powers: &[T],
    noise_power: T,
) -> Result<T> {
    if realizations.is_empty() {
        return Err(Error::domain("post-combining SNR needs at least one active user"));
    }
    if realizations.len() != powers.len() {
        return Err(Error::dimension("realizations/powers length mismatch"));
    }
    if !(noise_power > T::zero()) {
        return Err(Error::domain("noise power must be positive"));
    }
    let mut signal = T::zero();
    for (h, &p) in realizations.iter().zip(powers) {
        if h.len() != combiner.len() {
            return Err(Error::dimension("realization/beamformer dimension mismatch"));
        }
        if p < T::zero() || !p.is_finite() {
            return Err(Error::domain("powers must be finite and nonnegative"));
        }
        signal += cdot(combiner.weights(), h).norm_sqr() * p;
    }
    Ok(signal / noise_power)
}

/// Matched-filter SNR upper bound of a single user: `||h||^2 p / noise`.
/// Used by selection policies as the per-user link-quality score.
pub fn matched_filter_snr<T: Scalar>(realization: &[C<T>], power: T, noise_power: T) -> Result<T> {
    if realization.is_empty() {
        return Err(Error::dimension("empty channel realization"));
    }
    if !(noise_power > T::zero()) || power < T::zero() {
        return Err(Error::domain("bad power or noise for matched-filter SNR"));
    }
    Ok(cnorm2(realization) * power / noise_power)
}

/// Flattens one round of channel draws into CSV rows — `round,user` followed
/// by alternating real/imaginary parts, one pair per element — for external
/// inspection of the fading process.
pub fn realization_csv_rows<T: Scalar>(round: u64, realizations: &[Vec<C<T>>]) -> Vec<String> {
    realizations
        .iter()
        .enumerate()
        .map(|(user, h)| {
            let mut row = format!("{round},{user}");
            for c in h {
                row.push_str(&format!(",{},{}", c.re, c.im));
            }
            row
        })
        .collect()
}
