//! The collection and learning loop shared by all variants.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::mpo::{mpo_e_step, mpo_m_step, vt_mpo_td_target};
use super::sac::{
    actor_loss, as_sac_target_single, as_sac_targets_two, kappa_dual_step, naive_tuning_step, soft_actor_loss,
    TwinCritic,
};
use super::{DualState, LearnerConfig, LivingCost, Variant};
use crate::continuation::{ContinuationModel, ScheduledParam};
use crate::error::{Result, SdhError};
use crate::mdp::FiniteMdp;
use crate::oracle::expected_episode_returns;
use crate::policy::SoftmaxPolicy;
use crate::replay::{ReplayBuffer, RollingWindow, TransitionRecord, WindowEntry, NStepRecord};
use crate::rng::{self, streams};
use crate::Table;

/// Everything `train` needs besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub env: FiniteMdp,
    pub continuation: ContinuationModel,
    #[serde(default)]
    pub schedules: Vec<ScheduledParam>,
    pub learner: LearnerConfig,
    pub total_steps: u64,
    pub eval_interval: u64,
}

/// One line of the metrics stream. Returns are exact expectations of the
/// undiscounted episodic totals under the current policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub reward_return: f64,
    pub cost_return: f64,
    pub kappa: Option<f64>,
    #[serde(rename = "eta_E")]
    pub eta_e: Option<f64>,
    pub c_max: Option<f64>,
    /// Mean policy entropy over non-terminal states.
    pub entropy: f64,
    /// Mean squared TD error over the updates since the previous record.
    pub critic_loss: Option<f64>,
}

/// Learner parameters; also the checkpoint payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub variant: Variant,
    pub step: u64,
    pub policy: SoftmaxPolicy,
    /// Slow copy of the actor; the E-step prior and behavior policy of VT-MPO.
    pub target_policy: SoftmaxPolicy,
    /// Reward critic, the single soft critic, or the VT-MPO critic.
    pub critic: TwinCritic,
    pub critic_target: TwinCritic,
    /// Information critic of the two-critic variants.
    pub info_critic: Option<TwinCritic>,
    pub info_target: Option<TwinCritic>,
    pub dual: DualState,
    pub continuation: ContinuationModel,
}

impl AgentState {
    fn non_finite(&self) -> Option<&'static str> {
        if self.policy.logits().iter().flatten().any(|x| !x.is_finite()) {
            return Some("policy logits");
        }
        if !self.critic.is_finite() || self.info_critic.as_ref().is_some_and(|c| !c.is_finite()) {
            return Some("critic");
        }
        if !self.dual.log_kappa.is_finite() || !self.dual.eta_e.is_finite() {
            return Some("dual variables");
        }
        if self.continuation.c_max().is_some_and(|c| !c.is_finite()) {
            return Some("violation scale");
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub metrics: Vec<MetricsRecord>,
    pub state: AgentState,
}

/// Tabular regression step: each visited `(s, a)` moves toward the mean of
/// its targets in the batch by `lr`. Returns the mean squared TD error before
/// the step, measured on the first twin.
fn regress(critic: &mut TwinCritic, keys: &[(usize, usize)], targets: &[f64], lr: f64) -> f64 {
    let mut groups: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    let mut sq = 0.0;
    for (&(s, a), &y) in keys.iter().zip(targets) {
        let e = groups.entry((s, a)).or_insert((0.0, 0));
        e.0 += y;
        e.1 += 1;
        let d = y - critic.q[0][s][a];
        sq += d * d;
    }
    for ((s, a), (sum, n)) in groups {
        let y = sum / n as f64;
        for q in critic.q.iter_mut() {
            q[s][a] += lr * (y - q[s][a]);
        }
    }
    sq / keys.len().max(1) as f64
}

fn expected_under(policy: &SoftmaxPolicy, states: &[usize], q: &Table) -> f64 {
    states
        .iter()
        .map(|&s| policy.probs(s).iter().zip(&q[s]).map(|(p, x)| p * x).sum::<f64>())
        .sum::<f64>()
        / states.len() as f64
}

fn mean_entropy(policy: &SoftmaxPolicy, states: impl Iterator<Item = usize>) -> f64 {
    let (sum, n) = states.fold((0.0, 0usize), |(acc, n), s| (acc + policy.entropy(s), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn apply_actor_step(policy: &mut SoftmaxPolicy, grad: &Table, states: &[usize], lr: f64, clamp: f64) {
    // The loss averages over the batch; scale back so each state moves at `lr`.
    let scale = lr * states.len() as f64;
    for &s in states {
        for (l, g) in policy.logits_mut()[s].iter_mut().zip(&grad[s]) {
            *l = (*l - scale * g).clamp(-clamp, clamp);
        }
    }
}

/// Runs one seed of the configured learner and returns its metrics stream and
/// final parameters. Identical `(spec, seed)` pairs give identical outputs.
pub fn train(spec: &TrainSpec, seed: u64) -> Result<TrainOutput> {
    let cfg = &spec.learner;
    cfg.validate()?;
    spec.continuation.validate()?;
    for sp in &spec.schedules {
        sp.schedule.validate()?;
    }
    if spec.eval_interval == 0 {
        return crate::error::usage("eval_interval must be positive");
    }
    let env = match cfg.gamma {
        Some(g) => spec.env.with_gamma(g)?,
        None => spec.env.clone(),
    };
    let (ns, na) = (env.n_states(), env.n_actions());
    let gamma = env.gamma();
    let variant = cfg.variant;

    let mut rng_env = rng::stream(seed, streams::ENV);
    let mut rng_act = rng::stream(seed, streams::ACTOR);
    let mut rng_rep = rng::stream(seed, streams::REPLAY);
    let mut rng_init = rng::stream(seed, streams::INIT);
    let mut rng_tgt = rng::stream(seed, streams::TARGET);

    let h_tgt = cfg.h_tgt.unwrap_or((na as f64).ln());
    let c_lc = match cfg.living_cost() {
        LivingCost::HTgt => h_tgt,
        LivingCost::Zero => 0.0,
    };
    let target_entropy = cfg.target_entropy.unwrap_or(0.5 * (na as f64).ln());

    let critic = if variant == Variant::VtMpo {
        TwinCritic::from_table(TwinCritic::random(ns, na, cfg.critic_init_scale, &mut rng_init).q[0].clone())
    } else {
        TwinCritic::random(ns, na, cfg.critic_init_scale, &mut rng_init)
    };
    let info_critic = variant
        .uses_two_critics()
        .then(|| TwinCritic::random(ns, na, cfg.critic_init_scale, &mut rng_init));
    let policy = SoftmaxPolicy::uniform(ns, na);
    let mut st = AgentState {
        variant,
        step: 0,
        target_policy: policy.clone(),
        policy,
        critic_target: critic.clone(),
        critic,
        info_target: info_critic.clone(),
        info_critic,
        dual: DualState {
            log_kappa: cfg.init_log_kappa,
            kl_budget_eps: cfg.kl_budget_eps,
            eta_e: cfg.init_eta.max(super::ETA_MIN),
            mpo_kl_eps: cfg.mpo_kl_eps,
            h_tgt,
        },
        continuation: spec.continuation.clone(),
    };

    let mut sac_buffer: ReplayBuffer<TransitionRecord> = ReplayBuffer::new(cfg.replay_capacity)?;
    let mut mpo_buffer: ReplayBuffer<NStepRecord> = ReplayBuffer::new(cfg.replay_capacity)?;
    let mut window = RollingWindow::new(cfg.n_step, gamma)?;
    let live_states: Vec<usize> = (0..ns).filter(|&s| !env.is_terminal(s)).collect();

    let mut metrics = Vec::new();
    let mut loss_acc = (0.0, 0usize);
    let mut s = env.sample_initial(&mut rng_env);
    let mut ep_len = 0usize;

    for t in 0..spec.total_steps {
        for sp in &spec.schedules {
            sp.apply(&mut st.continuation, t);
        }

        // Collect one environment step. Violations never reset the episode.
        let behavior = if variant == Variant::VtMpo { &st.target_policy } else { &st.policy };
        let a = behavior.sample(s, &mut rng_act);
        let logp = behavior.log_probs(s)[a];
        let out = env.step(s, a, &mut rng_env)?;
        let alpha = st.continuation.alpha(&out.cost_vec)?;
        let cost: f64 = out.cost_vec.iter().sum();
        ep_len += 1;
        let terminated = out.terminated;
        let truncated = !terminated && ep_len >= cfg.episode_max_steps;
        if variant == Variant::VtMpo {
            let entry = WindowEntry { s, a, r: out.reward, cost, alpha, logp };
            if terminated || truncated {
                for rec in window.end_episode(entry, out.next_state, terminated)? {
                    mpo_buffer.push(rec);
                }
            } else if let Some(rec) = window.push(entry, out.next_state)? {
                mpo_buffer.push(rec);
            }
        } else {
            sac_buffer.push(TransitionRecord {
                s,
                a,
                r_tilde: alpha * out.reward,
                cost,
                s_next: out.next_state,
                gamma_tilde: gamma * alpha,
                done: terminated,
            });
        }
        if terminated || truncated {
            s = env.sample_initial(&mut rng_env);
            ep_len = 0;
        } else {
            s = out.next_state;
        }

        let learning = t + 1 > cfg.warmup_steps;
        if learning && variant.is_sac() && !sac_buffer.is_empty() {
            let batch = sac_buffer.sample_minibatch(cfg.batch_size, &mut rng_rep)?;
            let costs: Vec<f64> = batch.iter().map(|r| r.cost).collect();
            st.continuation.update_scale(&costs);
            let keys: Vec<(usize, usize)> = batch.iter().map(|r| (r.s, r.a)).collect();
            let states: Vec<usize> = batch.iter().map(|r| r.s).collect::<BTreeSet<_>>().into_iter().collect();
            let kappa = st.dual.kappa();

            if let (Some(info), Some(info_target)) = (st.info_critic.as_mut(), st.info_target.as_mut()) {
                let (y_r, y_kl): (Vec<f64>, Vec<f64>) = batch
                    .iter()
                    .map(|r| {
                        as_sac_targets_two(r, &st.policy, &st.critic_target, info_target, c_lc, cfg.next_action, &mut rng_tgt)
                    })
                    .unzip();
                loss_acc.0 += regress(&mut st.critic, &keys, &y_r, cfg.lr_critic);
                regress(info, &keys, &y_kl, cfg.lr_critic);
                loss_acc.1 += 1;
                let q_r = st.critic.mean_table();
                let q_kl = info.mean_table();
                let l = actor_loss(&states, &st.policy, &q_r, &q_kl, kappa, cfg.gi_actor);
                apply_actor_step(&mut st.policy, &l.grad, &states, cfg.lr_actor, cfg.logit_clamp);
                if cfg.learns_kappa() {
                    let e_kl = expected_under(&st.policy, &states, &info.mean_table());
                    kappa_dual_step(&mut st.dual, e_kl, cfg.lr_dual);
                }
                info_target.soft_update(info, cfg.tau);
            } else {
                let y: Vec<f64> = batch
                    .iter()
                    .map(|r| as_sac_target_single(r, &st.policy, &st.critic_target, kappa, c_lc, cfg.next_action, &mut rng_tgt))
                    .collect();
                loss_acc.0 += regress(&mut st.critic, &keys, &y, cfg.lr_critic);
                loss_acc.1 += 1;
                let q_min: Table = (0..ns).map(|s| (0..na).map(|a| st.critic.min(s, a)).collect()).collect();
                let l = soft_actor_loss(&states, &st.policy, &q_min, kappa);
                apply_actor_step(&mut st.policy, &l.grad, &states, cfg.lr_actor, cfg.logit_clamp);
                if cfg.learns_kappa() {
                    let h = mean_entropy(&st.policy, states.iter().cloned());
                    naive_tuning_step(&mut st.dual, h, target_entropy, cfg.lr_dual);
                }
            }
            st.critic_target.soft_update(&st.critic, cfg.tau);
        } else if learning && variant == Variant::VtMpo && !mpo_buffer.is_empty() {
            let batch = mpo_buffer.sample_minibatch(cfg.batch_size, &mut rng_rep)?;
            let costs: Vec<f64> = batch.iter().map(|r| r.cost).collect();
            st.continuation.update_scale(&costs);
            let keys: Vec<(usize, usize)> = batch.iter().map(|r| (r.s, r.a)).collect();
            let target_q = st.critic_target.mean_table();
            let y: Vec<f64> = batch
                .iter()
                .map(|r| vt_mpo_td_target(r, &st.policy, &target_q, cfg.next_action, &mut rng_tgt))
                .collect();
            loss_acc.0 += regress(&mut st.critic, &keys, &y, cfg.lr_critic);
            loss_acc.1 += 1;
            let mut states: Vec<usize> = batch.iter().map(|r| r.s).collect();
            if cfg.mpo_stacked_states {
                states.extend(batch.iter().map(|r| r.s_boot).filter(|&s| !env.is_terminal(s)));
            }
            let e = mpo_e_step(&states, &st.target_policy, &target_q, &mut st.dual)?;
            mpo_m_step(&mut st.policy, &e.states, &e.weights, cfg.lr_actor, cfg.m_step_iters, cfg.logit_clamp)?;
            st.critic_target.soft_update(&st.critic, cfg.tau);
            st.target_policy.soft_update(&st.policy, cfg.tau);
        }

        st.step = t + 1;
        if let Some(what) = st.non_finite() {
            return Err(SdhError::Diverged {
                step: st.step,
                reason: format!("{what} became non-finite"),
                snapshot: Box::new(serde_json::to_string(&st).unwrap_or_default()),
            });
        }

        if st.step % spec.eval_interval == 0 || st.step == spec.total_steps {
            let (reward_return, cost_return) = expected_episode_returns(&env, &st.policy, cfg.episode_max_steps)?;
            metrics.push(MetricsRecord {
                step: st.step,
                reward_return,
                cost_return,
                kappa: variant.is_sac().then(|| st.dual.kappa()),
                eta_e: (variant == Variant::VtMpo).then_some(st.dual.eta_e),
                c_max: st.continuation.c_max(),
                entropy: mean_entropy(&st.policy, live_states.iter().cloned()),
                critic_loss: (loss_acc.1 > 0).then(|| loss_acc.0 / loss_acc.1 as f64),
            });
            loss_acc = (0.0, 0);
        }
    }
    Ok(TrainOutput { metrics, state: st })
}
