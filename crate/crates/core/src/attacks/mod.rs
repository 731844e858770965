//! Adversarial attacks against a trained [`Network`](crate::Network).

pub mod fgsm;
pub mod patch;

pub use fgsm::{fgsm, fgsm_sweep, AttackConfig, DEFAULT_EPSILONS};
pub use patch::{
    patch_apply, patch_evaluate, patch_reports, patch_train, PatchOutcome, PatchSpec,
    PatchTrainConfig,
};
