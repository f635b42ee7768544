//! AS-SAC targets, actor losses and temperature updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DualState, NextActionMode};
use crate::policy::SoftmaxPolicy;
use crate::replay::TransitionRecord;
use crate::Table;

/// Twin tabular critics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinCritic {
    pub q: [Table; 2],
}

impl TwinCritic {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        let t = vec![vec![0.0; n_actions]; n_states];
        Self { q: [t.clone(), t] }
    }

    /// Entries uniform on `[-scale, scale]`, drawn independently per twin.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = || -> Table {
            (0..n_states)
                .map(|_| (0..n_actions).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect())
                .collect()
        };
        let a = draw();
        let b = draw();
        Self { q: [a, b] }
    }

    /// Both twins equal to `table`.
    pub fn from_table(table: Table) -> Self {
        Self { q: [table.clone(), table] }
    }

    pub fn min(&self, s: usize, a: usize) -> f64 {
        self.q[0][s][a].min(self.q[1][s][a])
    }

    pub fn mean(&self, s: usize, a: usize) -> f64 {
        0.5 * (self.q[0][s][a] + self.q[1][s][a])
    }

    pub fn mean_table(&self) -> Table {
        (0..self.q[0].len())
            .map(|s| (0..self.q[0][s].len()).map(|a| self.mean(s, a)).collect())
            .collect()
    }

    pub fn soft_update(&mut self, online: &TwinCritic, tau: f64) {
        for (dst, src) in self.q.iter_mut().zip(&online.q) {
            for (d, s) in dst.iter_mut().flatten().zip(src.iter().flatten()) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().flatten().flatten().all(|x| x.is_finite())
    }
}

/// Averages `g(a')` over the next action, either exactly or by sampling.
pub(crate) fn next_action_average<R, G>(policy: &SoftmaxPolicy, s: usize, mode: NextActionMode, rng: &mut R, g: G) -> f64
where
    R: Rng + ?Sized,
    G: Fn(usize) -> f64,
{
    match mode {
        NextActionMode::Expected => policy
            .probs(s)
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(a, p)| p * g(a))
            .sum(),
        NextActionMode::Sampled { n } => {
            let probs = policy.probs(s);
            (0..n).map(|_| g(crate::policy::sample_categorical(&probs, rng))).sum::<f64>() / n as f64
        }
    }
}

/// `y = r~ - kappa c_LC + bootstrap * V^`.
pub fn as_sac_target_from_value(r_tilde: f64, bootstrap: f64, v_hat: f64, kappa: f64, c_lc: f64) -> f64 {
    r_tilde - kappa * c_lc + bootstrap * v_hat
}

/// Single soft critic target with
/// `V^(s') = E_{a'}[min_i Q~_i(s', a') - kappa log pi(a'|s')]`.
pub fn as_sac_target_single<R: Rng + ?Sized>(
    rec: &TransitionRecord,
    policy: &SoftmaxPolicy,
    target: &TwinCritic,
    kappa: f64,
    c_lc: f64,
    mode: NextActionMode,
    rng: &mut R,
) -> f64 {
    let boot = rec.bootstrap();
    let v_hat = if boot == 0.0 {
        0.0
    } else {
        let logp = policy.log_probs(rec.s_next);
        next_action_average(policy, rec.s_next, mode, rng, |a| target.min(rec.s_next, a) - kappa * logp[a])
    };
    as_sac_target_from_value(rec.r_tilde, boot, v_hat, kappa, c_lc)
}

/// Kappa-free targets of the reward and information critics:
/// `y_R = r~ + gamma~ E min Q~_R(s', a')` and
/// `y_KL = (log pi(a|s) + h_tgt) + gamma~ E min Q~_KL(s', a')`.
/// The current-step `log pi` is a plain number here, i.e. gradient-stopped.
pub fn as_sac_targets_two<R: Rng + ?Sized>(
    rec: &TransitionRecord,
    policy: &SoftmaxPolicy,
    target_r: &TwinCritic,
    target_kl: &TwinCritic,
    h_tgt: f64,
    mode: NextActionMode,
    rng: &mut R,
) -> (f64, f64) {
    let boot = rec.bootstrap();
    let (next_r, next_kl) = if boot == 0.0 {
        (0.0, 0.0)
    } else {
        match mode {
            NextActionMode::Expected => (
                next_action_average(policy, rec.s_next, mode, rng, |a| target_r.min(rec.s_next, a)),
                next_action_average(policy, rec.s_next, mode, rng, |a| target_kl.min(rec.s_next, a)),
            ),
            NextActionMode::Sampled { n } => {
                // One set of next actions shared by both critics.
                let probs = policy.probs(rec.s_next);
                let (mut r, mut k) = (0.0, 0.0);
                for _ in 0..n {
                    let a = crate::policy::sample_categorical(&probs, rng);
                    r += target_r.min(rec.s_next, a);
                    k += target_kl.min(rec.s_next, a);
                }
                (r / n as f64, k / n as f64)
            }
        }
    };
    let logp = policy.log_probs(rec.s)[rec.a];
    (rec.r_tilde + boot * next_r, logp + h_tgt + boot * next_kl)
}

/// Loss value and gradient with respect to the policy logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorLoss {
    pub value: f64,
    pub grad: Table,
}

/// `d/dtheta_s sum_a pi_a g_a` with `g` held fixed: `pi_b (g_b - E_pi g)`.
fn expectation_grad(probs: &[f64], g: &[f64]) -> Vec<f64> {
    let mean: f64 = probs.iter().zip(g).map(|(p, x)| p * x).sum();
    probs.iter().zip(g).map(|(p, x)| p * (x - mean)).collect()
}

/// `E_{s in batch} E_{a~pi}[kappa Q_KL(s, a) - Q_R(s, a)]` with critics held
/// fixed.
///
/// With `gi`, adds `kappa (c_KL - sg[c_KL])` per action. Its value is zero;
/// its gradient `kappa sum_a pi_a grad log pi_a` is added explicitly and
/// vanishes under the exact expectation over actions.
pub fn actor_loss(states: &[usize], policy: &SoftmaxPolicy, q_r: &Table, q_kl: &Table, kappa: f64, gi: bool) -> ActorLoss {
    let mut grad = vec![vec![0.0; policy.n_actions()]; policy.n_states()];
    if states.is_empty() {
        return ActorLoss { value: 0.0, grad };
    }
    let w = 1.0 / states.len() as f64;
    let mut value = 0.0;
    for &s in states {
        let probs = policy.probs(s);
        let g: Vec<f64> = q_r[s].iter().zip(&q_kl[s]).map(|(r, k)| kappa * k - r).collect();
        value += w * probs.iter().zip(&g).map(|(p, x)| p * x).sum::<f64>();
        for (dst, d) in grad[s].iter_mut().zip(expectation_grad(&probs, &g)) {
            *dst += w * d;
        }
        if gi {
            // sum_a pi_a d log pi_a / d theta_b = sum_a pi_a (1{a=b} - pi_b)
            for (b, dst) in grad[s].iter_mut().enumerate() {
                let term: f64 = probs
                    .iter()
                    .enumerate()
                    .map(|(a, pa)| pa * (f64::from(u8::from(a == b)) - probs[b]))
                    .sum();
                *dst += w * kappa * term;
            }
        }
    }
    ActorLoss { value, grad }
}

/// Standard discrete soft actor loss `E_s sum_a pi_a (kappa log pi_a - Q(s, a))`,
/// differentiated through `log pi`.
pub fn soft_actor_loss(states: &[usize], policy: &SoftmaxPolicy, q: &Table, kappa: f64) -> ActorLoss {
    let mut grad = vec![vec![0.0; policy.n_actions()]; policy.n_states()];
    if states.is_empty() {
        return ActorLoss { value: 0.0, grad };
    }
    let w = 1.0 / states.len() as f64;
    let mut value = 0.0;
    for &s in states {
        let probs = policy.probs(s);
        let logp = policy.log_probs(s);
        let g: Vec<f64> = logp.iter().zip(&q[s]).map(|(lp, q)| kappa * lp - q).collect();
        value += w * probs.iter().zip(&g).map(|(p, x)| p * x).sum::<f64>();
        // The extra kappa sum_a pi_a grad log pi_a term is identically zero.
        for (dst, d) in grad[s].iter_mut().zip(expectation_grad(&probs, &g)) {
            *dst += w * d;
        }
    }
    ActorLoss { value, grad }
}

/// Gradient of the entropy `H(pi(.|s))` with respect to the logits of `s`:
/// `-pi_b (log pi_b + H)`.
pub fn entropy_grad(policy: &SoftmaxPolicy, s: usize) -> Vec<f64> {
    let probs = policy.probs(s);
    let logp = policy.log_probs(s);
    let h = policy.entropy(s);
    probs.iter().zip(&logp).map(|(p, lp)| -p * (lp + h)).collect()
}

/// `L(log kappa) = -exp(log kappa) (E[Q_KL] - eps)` and its derivative.
pub fn kappa_dual_loss(log_kappa: f64, expected_q_kl: f64, eps: f64) -> (f64, f64) {
    let kappa = log_kappa.exp();
    let loss = -kappa * (expected_q_kl - eps);
    (loss, loss)
}

/// One descent step on the kappa dual. Returns the gradient used.
pub fn kappa_dual_step(dual: &mut DualState, expected_q_kl: f64, lr: f64) -> f64 {
    let (_, grad) = kappa_dual_loss(dual.log_kappa, expected_q_kl, dual.kl_budget_eps);
    dual.log_kappa -= lr * grad;
    grad
}

/// `L(log kappa) = -exp(log kappa) (E[log pi] + H_bar)` with
/// `E[log pi] = -mean entropy`, and its derivative.
pub fn naive_tuning_loss(log_kappa: f64, mean_entropy: f64, target_entropy: f64) -> (f64, f64) {
    let kappa = log_kappa.exp();
    let loss = -kappa * (-mean_entropy + target_entropy);
    (loss, loss)
}

/// One descent step of the standard temperature update. Returns the gradient.
pub fn naive_tuning_step(dual: &mut DualState, mean_entropy: f64, target_entropy: f64, lr: f64) -> f64 {
    let (_, grad) = naive_tuning_loss(dual.log_kappa, mean_entropy, target_entropy);
    dual.log_kappa -= lr * grad;
    grad
}
