//! Federated learning loop: synthetic tasks, analog over-the-air gradient
//! aggregation, the two-phase training driver, and the performance bound
//! that the resource optimizer minimizes.

pub mod bound;
pub mod ota;
pub mod task;
pub mod training;

pub use bound::{convergence_bound, wasserstein_1d, BoundBreakdown, BoundInputs, PsiInputs, PsiModel};
pub use ota::{
    matched_receive_scale, mismatch_noise_proxy, ota_aggregate, MismatchMode, OtaConfig,
    OtaOutcome,
};
pub use task::{SyntheticTask, TaskConfig, TaskKind};
pub use training::{finetune_round, pretrain_step, weighted_batch_gradient, RoundResult};

/// Which phase of the two-phase schedule a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Pretrain => write!(f, "pretrain"),
            Phase::Finetune => write!(f, "finetune"),
        }
    }
}
