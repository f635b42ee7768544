//! Tabular AS-SAC and VT-MPO learners.
//!
//! Policies are per-state softmax tables and critics are dense tables, so
//! every expectation over actions is computed in closed form and every
//! gradient is analytic.

mod gradcheck;
mod mpo;
mod sac;
mod train;

pub use gradcheck::{gradient_check, gradient_check_scalar};
pub use mpo::{
    boltzmann_weights, e_step_dual, mpo_e_step, mpo_m_step, vt_mpo_td_target, EStep, ETA_MIN,
};
pub use sac::{
    actor_loss, as_sac_target_from_value, as_sac_target_single, as_sac_targets_two, entropy_grad, kappa_dual_loss,
    kappa_dual_step, naive_tuning_loss, naive_tuning_step, soft_actor_loss, ActorLoss, TwinCritic,
};
pub use train::{train, AgentState, MetricsRecord, TrainOutput, TrainSpec};

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};

/// Learner variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Reward and information critics, living cost `H_tgt`, kappa dual.
    #[serde(rename = "AS_SAC_full")]
    AsSacFull,
    /// As `AsSacFull` but the information critic drops the living cost.
    #[serde(rename = "AS_SAC_naive_critic")]
    AsSacNaiveCritic,
    /// As `AsSacFull` with kappa held fixed.
    #[serde(rename = "AS_SAC_const_kappa")]
    AsSacConstKappa,
    /// One soft critic with living cost `H_tgt` and the standard SAC
    /// temperature update.
    #[serde(rename = "AS_SAC_naive_tuning")]
    AsSacNaiveTuning,
    /// Unregularized survival TD(n) critic with MPO E/M steps.
    #[serde(rename = "VT_MPO")]
    VtMpo,
}

impl Variant {
    pub fn is_sac(self) -> bool {
        !matches!(self, Variant::VtMpo)
    }

    pub fn uses_two_critics(self) -> bool {
        matches!(self, Variant::AsSacFull | Variant::AsSacNaiveCritic | Variant::AsSacConstKappa)
    }
}

/// Per-decision living-cost constant `c_LC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LivingCost {
    HTgt,
    Zero,
}

/// How critic targets average over the next action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NextActionMode {
    /// Exact expectation over the discrete action set.
    Expected,
    /// Average over `n` actions drawn from the policy.
    Sampled { n: usize },
}

/// Temperatures and their budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub log_kappa: f64,
    /// Budget on the expected information critic.
    pub kl_budget_eps: f64,
    /// E-step temperature.
    pub eta_e: f64,
    /// E-step KL budget.
    pub mpo_kl_eps: f64,
    /// Target-entropy constant; equals `ell_c` for the exact objective.
    pub h_tgt: f64,
}

impl DualState {
    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }
}

fn default_n_step() -> usize {
    5
}

fn default_next_action() -> NextActionMode {
    NextActionMode::Expected
}

fn default_logit_clamp() -> f64 {
    crate::policy::DEFAULT_LOGIT_CLAMP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub variant: Variant,
    /// Overrides the environment discount when set.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_n_step")]
    pub n_step: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    #[serde(default)]
    pub lr_dual: f64,
    /// Polyak rate for target critics (and the MPO prior).
    pub tau: f64,
    /// Environment steps collected with the initial policy before learning.
    #[serde(default)]
    pub warmup_steps: u64,
    pub episode_max_steps: usize,
    #[serde(default)]
    pub init_log_kappa: f64,
    #[serde(default)]
    pub kl_budget_eps: f64,
    /// Defaults to `ln |A|`.
    #[serde(default)]
    pub h_tgt: Option<f64>,
    /// Entropy target of the naive temperature update; defaults to `0.5 ln |A|`.
    #[serde(default)]
    pub target_entropy: Option<f64>,
    /// Overrides the variant's living cost.
    #[serde(default)]
    pub living_cost: Option<LivingCost>,
    #[serde(default)]
    pub gi_actor: bool,
    #[serde(default = "default_next_action")]
    pub next_action: NextActionMode,
    #[serde(default)]
    pub mpo_kl_eps: f64,
    #[serde(default)]
    pub init_eta: f64,
    #[serde(default)]
    pub m_step_iters: usize,
    /// Also fit the M-step on bootstrap states.
    #[serde(default)]
    pub mpo_stacked_states: bool,
    #[serde(default)]
    pub critic_init_scale: f64,
    #[serde(default = "default_logit_clamp")]
    pub logit_clamp: f64,
}

impl LearnerConfig {
    /// Settings used for the tabular experiments.
    pub fn defaults(variant: Variant) -> Self {
        Self {
            variant,
            gamma: None,
            n_step: default_n_step(),
            batch_size: 32,
            replay_capacity: 50_000,
            lr_actor: 0.05,
            lr_critic: 0.2,
            lr_dual: if variant == Variant::AsSacConstKappa { 0.0 } else { 1e-3 },
            tau: 0.05,
            warmup_steps: 500,
            episode_max_steps: 50,
            init_log_kappa: 0.0,
            kl_budget_eps: 0.0,
            h_tgt: None,
            target_entropy: None,
            living_cost: None,
            gi_actor: false,
            next_action: NextActionMode::Expected,
            mpo_kl_eps: 0.1,
            init_eta: 1.0,
            m_step_iters: 5,
            mpo_stacked_states: false,
            critic_init_scale: 1e-3,
            logit_clamp: default_logit_clamp(),
        }
    }

    pub fn living_cost(&self) -> LivingCost {
        self.living_cost.unwrap_or(match self.variant {
            Variant::AsSacNaiveCritic => LivingCost::Zero,
            _ => LivingCost::HTgt,
        })
    }

    pub fn learns_kappa(&self) -> bool {
        matches!(self.variant, Variant::AsSacFull | Variant::AsSacNaiveCritic | Variant::AsSacNaiveTuning)
            && self.lr_dual > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return usage("gamma must lie in (0, 1)");
            }
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.episode_max_steps == 0 || self.n_step == 0 {
            return usage("batch_size, replay_capacity, episode_max_steps and n_step must be positive");
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return usage("actor and critic learning rates must be positive");
        }
        if !(self.lr_critic <= 1.0) {
            return usage("lr_critic is a tabular step size and must not exceed 1");
        }
        if !(self.lr_dual >= 0.0) {
            return usage("lr_dual must be nonnegative");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return usage("tau must lie in (0, 1]");
        }
        if self.variant == Variant::VtMpo {
            if !(self.mpo_kl_eps > 0.0) {
                return usage("VT_MPO needs mpo_kl_eps > 0");
            }
            if !(self.init_eta > 0.0) {
                return usage("VT_MPO needs init_eta > 0");
            }
            if self.m_step_iters == 0 {
                return usage("VT_MPO needs m_step_iters >= 1");
            }
        }
        if let NextActionMode::Sampled { n: 0 } = self.next_action {
            return usage("sampled next-action mode needs n >= 1");
        }
        if !(self.logit_clamp > 0.0) {
            return usage("logit_clamp must be positive");
        }
        Ok(())
    }
}
