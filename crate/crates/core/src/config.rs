//! Human-editable experiment configuration. Key names carry their units
//! (`carrier_hz`, `pmax_w`, `latency_cap_s`) so a dBm/W or MHz/Hz slip is
//! visible at the call site. Every key has a default; an empty file is a
//! complete, valid experiment. Unknown keys are rejected outright.

use crate::antenna::BlockBConfig;
use crate::channel::{ArrayGeometry, FadingConfig, LinkState};
use crate::error::{Error, Result};
use crate::fl::{MismatchMode, TaskConfig, TaskKind};
use crate::linalg::C;
use crate::resource::{Budget, ComputeModel};
use crate::scheduler::{PolicyConfig, PolicyKind};
use serde::{Deserialize, Serialize};

const SPEED_OF_LIGHT_MPS: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WirelessSection {
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub rician_k_db: f64,
    pub num_paths: usize,
    pub p_los: f64,
    pub blockage_prob: f64,
    pub shadowing_std_db: f64,
    pub user_speed_mps: f64,
    pub pmax_w: f64,
    pub noise_density_dbm_hz: f64,
    /// Large-scale amplitude gain of the strongest user's path.
    pub path_gain: f64,
    /// Linear near-far taper: user `u` gets `path_gain * (1 - spread*u/(U-1))`.
    pub path_gain_spread: f64,
    /// Per-user arrival angles, radians in [0, π]. Empty = an even spread.
    pub aoa_rad: Vec<f64>,
    /// Per-user departure angles, radians in [0, π]. Empty = an even spread.
    pub aod_rad: Vec<f64>,
    pub server_power_w: f64,
}

impl Default for WirelessSection {
    fn default() -> Self {
        WirelessSection {
            carrier_hz: 28e9,
            bandwidth_hz: 20e6,
            rician_k_db: 8.0,
            num_paths: 3,
            p_los: 0.8,
            blockage_prob: 0.03,
            shadowing_std_db: 4.0,
            user_speed_mps: 0.2,
            pmax_w: 0.2,
            noise_density_dbm_hz: -174.0,
            path_gain: 3e-6,
            path_gain_spread: 0.3,
            aoa_rad: Vec::new(),
            aod_rad: Vec::new(),
            server_power_w: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArraySection {
    pub num_elements: usize,
    pub min_spacing_wavelengths: f64,
    pub aperture_wavelengths: f64,
}

impl Default for ArraySection {
    fn default() -> Self {
        ArraySection {
            num_elements: 16,
            min_spacing_wavelengths: 0.5,
            aperture_wavelengths: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// "quadratic" or "logistic".
    pub kind: String,
    pub dim: usize,
    pub num_samples: usize,
    pub num_users: usize,
    pub shift_scale: f64,
    pub target_noise_std: f64,
    pub ridge: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub batch_size: u32,
    pub server_batch_size: u32,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: "quadratic".into(),
            dim: 16,
            num_samples: 64,
            num_users: 10,
            shift_scale: 0.5,
            target_noise_std: 0.1,
            ridge: 0.0,
            lr_pretrain: 0.05,
            lr_finetune: 0.05,
            batch_size: 8,
            server_batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundsSection {
    pub pretrain: usize,
    pub finetune: usize,
}

impl Default for RoundsSection {
    fn default() -> Self {
        RoundsSection { pretrain: 20, finetune: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub kind: PolicyKind,
    pub k: usize,
    pub gibbs_temperature: f64,
    pub fairness_weight: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            kind: PolicyKind::ScaPdd,
            k: 1,
            gibbs_temperature: 1.0,
            fairness_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtaSection {
    /// "modeled" or "ideal".
    pub mode: String,
    /// Noise power at the combiner output, W; divided by the squared
    /// receive scale it becomes the per-coordinate update noise.
    pub receiver_noise_w: f64,
}

impl Default for OtaSection {
    fn default() -> Self {
        OtaSection { mode: "modeled".into(), receiver_noise_w: 8e-14 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSection {
    pub latency_cap_s: f64,
    pub energy_cap_j: f64,
    pub payload_bits: f64,
    pub avg_power_cap_w: f64,
    pub max_users: usize,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            latency_cap_s: 3600.0,
            energy_cap_j: 1e4,
            payload_bits: 1e5,
            avg_power_cap_w: 0.2,
            max_users: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComputeSection {
    pub flops_per_sample: f64,
    pub server_cycle_factor: f64,
    pub client_cycle_factor: f64,
    pub cpu_power_coeff: f64,
    pub client_power_coeff: f64,
    pub energy_scale: f64,
    pub energy_exponent_coeff: f64,
    pub server_freq_hz: f64,
    pub client_freq_hz: f64,
}

impl Default for ComputeSection {
    fn default() -> Self {
        ComputeSection {
            flops_per_sample: 1e6,
            server_cycle_factor: 1.0,
            client_cycle_factor: 1.0,
            cpu_power_coeff: 1e-27,
            client_power_coeff: 1e-27,
            energy_scale: 1.0,
            energy_exponent_coeff: 1.0,
            server_freq_hz: 1e9,
            client_freq_hz: 1e9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub max_outer: usize,
    pub max_inner_sweeps: usize,
    pub violation_tol: f64,
    pub inner_obj_tol: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    /// Grid resolution of the movable-antenna baseline's line search.
    pub greedy_grid_points: usize,
    pub t1_cap_s: Option<f64>,
    pub t2_cap_s: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        let b = BlockBConfig::default();
        SolverSection {
            max_outer: b.max_outer,
            max_inner_sweeps: b.max_inner_sweeps,
            violation_tol: b.violation_tol,
            inner_obj_tol: b.inner_obj_tol,
            initial_penalty: b.initial_penalty,
            penalty_growth: b.penalty_growth,
            greedy_grid_points: 16,
            t1_cap_s: None,
            t2_cap_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub master_seed: u64,
    /// Seed list for multi-run sweeps.
    pub seeds: Vec<u64>,
    pub output_dir: String,
    /// Gradient-norm cap used by the aggregation-error proxy.
    pub grad_norm_bound: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            master_seed: 1,
            seeds: (1..=10).collect(),
            output_dir: "runs".into(),
            grad_norm_bound: 1.0,
        }
    }
}

/// The whole experiment file. Every section and field is optional in the
/// text; the defaults reproduce the reference fairness study.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub wireless: WirelessSection,
    pub array: ArraySection,
    pub task: TaskSection,
    pub rounds: RoundsSection,
    pub policy: PolicySection,
    pub ota: OtaSection,
    pub budget: BudgetSection,
    pub compute: ComputeSection,
    pub solver: SolverSection,
    pub run: RunSection,
}

/// Everything materialized and validated, ready for the training loop.
#[derive(Debug, Clone)]
pub struct Setup {
    pub fading: FadingConfig<f64>,
    pub link: LinkState<f64>,
    pub geometry: ArrayGeometry<f64>,
    pub task: TaskConfig<f64>,
    pub policy: PolicyConfig<f64>,
    pub budget: Budget<f64>,
    pub compute: ComputeModel<f64>,
    pub block_b: BlockBConfig,
    pub ota_mode: MismatchMode,
    pub receiver_noise_w: f64,
    /// Thermal noise floor over the configured band, W.
    pub noise_power_w: f64,
    pub pmax_w: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub batch_size: u32,
    pub server_batch: u32,
    pub server_freq_hz: f64,
    pub client_freq_hz: f64,
    pub pretrain_rounds: usize,
    pub finetune_rounds: usize,
    pub grad_norm_bound: f64,
    pub greedy_grid_points: usize,
    pub t1_cap_s: Option<f64>,
    pub t2_cap_s: Option<f64>,
    pub seed: u64,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn check_pos(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.build(self.run.master_seed).map(|_| ())
    }

    /// Materialize module types under one master seed, validating every
    /// section on the way.
    pub fn build(&self, seed: u64) -> Result<Setup> {
        let w = &self.wireless;
        check_pos("wireless.carrier_hz", w.carrier_hz)?;
        check_pos("wireless.bandwidth_hz", w.bandwidth_hz)?;
        check_pos("wireless.path_gain", w.path_gain)?;
        check_unit("wireless.path_gain_spread", w.path_gain_spread)?;
        if w.path_gain_spread >= 1.0 {
            return Err(Error::config("wireless.path_gain_spread must leave every user a live path"));
        }
        check_pos("wireless.pmax_w", w.pmax_w)?;
        check_pos("wireless.server_power_w", w.server_power_w)?;

        let users = self.task.num_users;
        if users == 0 {
            return Err(Error::config("task.num_users must be at least 1"));
        }
        let aoa = spread_angles(&w.aoa_rad, users, false)
            .map_err(|e| Error::config(format!("wireless.aoa_rad: {e}")))?;
        let aod = spread_angles(&w.aod_rad, users, true)
            .map_err(|e| Error::config(format!("wireless.aod_rad: {e}")))?;

        let wavelength = SPEED_OF_LIGHT_MPS / w.carrier_hz;
        let noise_density = 10f64.powf((w.noise_density_dbm_hz - 30.0) / 10.0);
        let taper = |u: usize| {
            w.path_gain * (1.0 - w.path_gain_spread * u as f64 / (users.max(2) - 1) as f64)
        };
        let link = LinkState {
            ul_path_gain: (0..users).map(|u| C::new(taper(u), 0.0)).collect(),
            dl_path_gain: (0..users).map(|u| C::new(taper(u), 0.0)).collect(),
            aoa,
            aod,
            wavelength,
            ul_bandwidth: vec![w.bandwidth_hz; users],
            dl_bandwidth: w.bandwidth_hz,
            ul_noise_density: noise_density,
            dl_noise_density: noise_density,
            server_power: w.server_power_w,
        };
        link.validate()?;

        let fading = FadingConfig {
            carrier_hz: w.carrier_hz,
            rician_k_db: w.rician_k_db,
            num_paths: w.num_paths,
            p_los: w.p_los,
            blockage_prob: w.blockage_prob,
            shadowing_std_db: w.shadowing_std_db,
            user_speed_mps: w.user_speed_mps,
            rng_seed: seed,
        };
        fading.validate()?;

        let a = &self.array;
        if a.num_elements == 0 {
            return Err(Error::config("array.num_elements must be at least 1"));
        }
        check_pos("array.min_spacing_wavelengths", a.min_spacing_wavelengths)?;
        check_pos("array.aperture_wavelengths", a.aperture_wavelengths)?;
        let span = a.aperture_wavelengths * wavelength;
        let min_spacing = a.min_spacing_wavelengths * wavelength;
        let spacing = if a.num_elements > 1 { span / (a.num_elements - 1) as f64 } else { span };
        if a.num_elements > 1 && spacing < min_spacing {
            return Err(Error::config(
                "array.aperture_wavelengths cannot host array.num_elements at the minimum spacing",
            ));
        }
        let geometry =
            ArrayGeometry::uniform(a.num_elements, spacing, min_spacing, (0.0, span))?;

        let t = &self.task;
        let kind = match t.kind.as_str() {
            "quadratic" => TaskKind::Quadratic,
            "logistic" => TaskKind::Logistic,
            other => {
                return Err(Error::config(format!(
                    "task.kind must be \"quadratic\" or \"logistic\", got \"{other}\""
                )))
            }
        };
        check_pos("task.lr_pretrain", t.lr_pretrain)?;
        check_pos("task.lr_finetune", t.lr_finetune)?;
        if t.batch_size == 0 || t.server_batch_size == 0 {
            return Err(Error::config("task batch sizes must be at least 1"));
        }
        let task = TaskConfig {
            kind,
            dim: t.dim,
            num_samples: t.num_samples,
            num_users: users,
            shift_scale: t.shift_scale,
            target_noise_std: t.target_noise_std,
            ridge: t.ridge,
            seed,
        };
        task.validate()?;

        let p = &self.policy;
        let policy = PolicyConfig {
            kind: p.kind,
            k: p.k,
            gibbs_temperature: p.gibbs_temperature,
            fairness_weight: p.fairness_weight,
        };
        policy.validate(users)?;

        let b = &self.budget;
        let budget = Budget {
            latency_cap_s: b.latency_cap_s,
            energy_cap_j: b.energy_cap_j,
            payload_bits: b.payload_bits,
            avg_power_caps: vec![b.avg_power_cap_w; users],
            max_power: w.pmax_w,
            max_users: b.max_users,
        };
        budget.validate()?;
        if policy.k > budget.max_users {
            return Err(Error::config(format!(
                "policy.k = {} exceeds budget.max_users = {}",
                policy.k, budget.max_users
            )));
        }

        let c = &self.compute;
        let compute = ComputeModel {
            flops_per_sample: c.flops_per_sample,
            server_cycle_factor: c.server_cycle_factor,
            client_cycle_factor: vec![c.client_cycle_factor; users],
            cpu_power_coeff: c.cpu_power_coeff,
            client_power_coeff: vec![c.client_power_coeff; users],
            energy_scale: c.energy_scale,
            energy_exponent_coeff: c.energy_exponent_coeff,
        };
        compute.validate()?;
        check_pos("compute.server_freq_hz", c.server_freq_hz)?;
        check_pos("compute.client_freq_hz", c.client_freq_hz)?;

        let s = &self.solver;
        let block_b = BlockBConfig {
            max_outer: s.max_outer,
            max_inner_sweeps: s.max_inner_sweeps,
            violation_tol: s.violation_tol,
            inner_obj_tol: s.inner_obj_tol,
            initial_penalty: s.initial_penalty,
            penalty_growth: s.penalty_growth,
        };
        block_b.validate()?;
        if s.greedy_grid_points < 2 {
            return Err(Error::config("solver.greedy_grid_points must be at least 2"));
        }
        for (name, cap) in [("solver.t1_cap_s", s.t1_cap_s), ("solver.t2_cap_s", s.t2_cap_s)] {
            if let Some(v) = cap {
                check_pos(name, v)?;
            }
        }

        let o = &self.ota;
        let ota_mode = match o.mode.as_str() {
            "modeled" => MismatchMode::Modeled,
            "ideal" => MismatchMode::Ideal,
            other => {
                return Err(Error::config(format!(
                    "ota.mode must be \"modeled\" or \"ideal\", got \"{other}\""
                )))
            }
        };
        if o.receiver_noise_w < 0.0 || !o.receiver_noise_w.is_finite() {
            return Err(Error::config("ota.receiver_noise_w must be nonnegative and finite"));
        }

        if self.run.grad_norm_bound < 0.0 || !self.run.grad_norm_bound.is_finite() {
            return Err(Error::config("run.grad_norm_bound must be nonnegative and finite"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds must list at least one seed"));
        }

        Ok(Setup {
            fading,
            link,
            geometry,
            task,
            policy,
            budget,
            compute,
            block_b,
            ota_mode,
            receiver_noise_w: o.receiver_noise_w,
            noise_power_w: noise_density * w.bandwidth_hz,
            pmax_w: w.pmax_w,
            lr_pretrain: t.lr_pretrain,
            lr_finetune: t.lr_finetune,
            batch_size: t.batch_size,
            server_batch: t.server_batch_size,
            server_freq_hz: c.server_freq_hz,
            client_freq_hz: c.client_freq_hz,
            pretrain_rounds: self.rounds.pretrain,
            finetune_rounds: self.rounds.finetune,
            grad_norm_bound: self.run.grad_norm_bound,
            greedy_grid_points: s.greedy_grid_points,
            t1_cap_s: s.t1_cap_s,
            t2_cap_s: s.t2_cap_s,
            seed,
        })
    }
}

/// Either take the user-provided per-user angles or spread them evenly
/// across the open interval (0, π); the reversed flag keeps arrival and
/// departure geometries from coinciding by default.
fn spread_angles(given: &[f64], users: usize, reversed: bool) -> Result<Vec<f64>> {
    if !given.is_empty() {
        if given.len() != users {
            return Err(Error::config(format!(
                "expected {users} per-user angles, got {}",
                given.len()
            )));
        }
        return Ok(given.to_vec());
    }
    let pi = std::f64::consts::PI;
    Ok((0..users)
        .map(|u| {
            let i = if reversed { users - u } else { u + 1 };
            pi * i as f64 / (users + 1) as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_the_reference_defaults_and_validates() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let setup = cfg.build(7).unwrap();
        assert_eq!(setup.link.num_users(), 10);
        assert_eq!(setup.geometry.len(), 16);
        assert_eq!(setup.finetune_rounds, 30);
        assert!((setup.fading.carrier_hz - 28e9).abs() < 1.0);
        assert!((setup.noise_power_w - 10f64.powf(-20.4) * 20e6).abs() < 1e-18);
        // 16 elements spread over 8 wavelengths leaves slack above λ/2.
        let lambda = SPEED_OF_LIGHT_MPS / 28e9;
        let pos = setup.geometry.positions();
        assert!((pos[15] - 8.0 * lambda).abs() < 1e-12);
        assert!(pos.windows(2).all(|w| w[1] - w[0] >= 0.5 * lambda - 1e-12));
        assert_eq!(setup.seed, 7);
    }

    #[test]
    fn toml_round_trip_is_the_identity() {
        let mut cfg = ExperimentConfig::default();
        cfg.policy.kind = PolicyKind::Gibbs;
        cfg.policy.k = 4;
        cfg.wireless.aoa_rad = vec![0.1; 10];
        cfg.solver.t2_cap_s = Some(0.125);
        cfg.run.seeds = vec![3, 1, 4];
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        // And a second serialization emits identical bytes.
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = ExperimentConfig::from_toml("[wireless]\nbogus_key = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = ExperimentConfig::from_toml("top_level_mystery = true\n").unwrap_err();
        assert!(err.to_string().contains("top_level_mystery"), "{err}");
    }

    #[test]
    fn oversubscribed_k_names_the_constraint() {
        let mut cfg = ExperimentConfig::default();
        cfg.policy.k = 11;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("1 <= k <= num_users"), "{msg}");
    }

    #[test]
    fn field_violations_name_the_offending_key() {
        let mut cfg = ExperimentConfig::default();
        cfg.wireless.p_los = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.task.kind = "transformer".into();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("task.kind"), "{msg}");

        let mut cfg = ExperimentConfig::default();
        cfg.array.aperture_wavelengths = 1.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("aperture"), "{msg}");

        let mut cfg = ExperimentConfig::default();
        cfg.wireless.aoa_rad = vec![0.3, 0.4];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("aoa_rad"), "{msg}");
    }

    #[test]
    fn default_angles_spread_without_collisions() {
        let setup = ExperimentConfig::default().build(1).unwrap();
        for angles in [&setup.link.aoa, &setup.link.aod] {
            for w in angles.windows(2) {
                assert!((w[0] - w[1]).abs() > 1e-6);
            }
            for &a in angles.iter() {
                assert!(a > 0.0 && a < std::f64::consts::PI);
            }
        }
        // Near-far taper: strictly decreasing path gains, all positive.
        let gains: Vec<f64> = setup.link.ul_path_gain.iter().map(|g| g.norm()).collect();
        for w in gains.windows(2) {
            assert!(w[0] > w[1] && w[1] > 0.0);
        }
    }
}
