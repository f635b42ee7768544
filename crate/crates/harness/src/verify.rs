//! Property suites behind `sdh verify`.
//!
//! Each suite returns its raw observations; `Suite::run` turns them into a
//! pass/fail report with the default tolerances below.

use std::time::Instant;

use anyhow::Context;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use sdh_core::agents::{
    actor_loss, e_step_dual, entropy_grad, gradient_check, gradient_check_scalar, kappa_dual_loss, naive_tuning_loss,
    soft_actor_loss, train, LearnerConfig, TrainSpec, Variant,
};
use sdh_core::bellman::{combine_kappa, contraction_check, shape, soft_evaluate_as, two_critic_fixed_point};
use sdh_core::continuation::{ContinuationModel, Schedule, ScheduleTarget, ScheduledParam};
use sdh_core::mdp::random::{random_hazard_chain, random_mdp, random_policy};
use sdh_core::mdp::{build_counterexample_mdp, FiniteMdp, CONTINUE};
use sdh_core::oracle::{
    argmax_scan, chance_bound, counterexample_objectives, exact_cost_tail, j_as_exact, j_vt_exact,
    mc_elbo_estimate, mc_violation_frequency, survival_statistic, ObjectiveSpec, Semantics, SurvivalMode,
};
use sdh_core::policy::SoftmaxPolicy;
use sdh_core::replay::{compress_window, WindowEntry};
use sdh_core::{rng, Table};

use crate::config::ExperimentConfig;
use crate::envs::{schedule_chain, EnvSpec};

pub const COUNTEREXAMPLE_TOL: f64 = 0.005;
pub const CONTRACTION_SLACK: f64 = 1e-12;
pub const MC_MAX_Z: f64 = 4.0;
pub const TWO_CRITIC_TOL: f64 = 1e-8;
pub const LIVING_COST_TOL: f64 = 0.03;
pub const GRADIENT_TOL: f64 = 1e-4;

fn random_continuation<R: Rng>(r: &mut R) -> ContinuationModel {
    match r.gen_range(0..4) {
        0 => ContinuationModel::exponential(r.gen_range(0.0..2.0)),
        1 => ContinuationModel::cat(r.gen_range(0.05..0.95), r.gen_range(0.5..3.0)),
        2 => ContinuationModel::HardIndicator,
        _ => ContinuationModel::Constant { alpha: r.gen_range(0.2..=1.0) },
    }
}

fn random_instance<R: Rng>(r: &mut R, ns: usize, na: usize, gamma: f64) -> anyhow::Result<(FiniteMdp, SoftmaxPolicy, ContinuationModel)> {
    let n_channels = r.gen_range(1..=2);
    let mdp = random_mdp(ns, na, n_channels, gamma, r)?;
    let pi = random_policy(ns, na, 1.5, r);
    Ok((mdp, pi, random_continuation(r)))
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleResult {
    pub argmax_as: f64,
    pub argmax_asn: f64,
    /// Largest gap between the closed forms and the generic exact oracle.
    pub oracle_gap: f64,
}

/// Maximizes both closed forms over the continue probability and checks them
/// against `j_as_exact` on the one-state MDP.
pub fn counterexample(gamma: f64, kappa: f64, r: f64) -> anyhow::Result<CounterexampleResult> {
    let obj = |p: f64| counterexample_objectives(p, gamma, kappa, r);
    obj(0.5)?;
    let argmax_as = argmax_scan(|p| obj(p).map_or(f64::NEG_INFINITY, |v| v.0), 0.0, 1.0, 2000, 80);
    let argmax_asn = argmax_scan(|p| obj(p).map_or(f64::NEG_INFINITY, |v| v.1), 0.0, 1.0, 2000, 80);
    let mdp = build_counterexample_mdp(r, gamma)?;
    let cont = ContinuationModel::HardIndicator;
    let ell = 2f64.ln();
    let mut oracle_gap: f64 = 0.0;
    for p in [0.1, 0.5, argmax_as, argmax_asn, 0.99] {
        let pi = SoftmaxPolicy::bernoulli(1, p)?;
        let (cf_as, cf_asn) = obj(p)?;
        let ex_as = j_as_exact(&mdp, &pi, &cont, &ObjectiveSpec::new(Semantics::As, kappa, ell))?.value;
        let ex_asn = j_as_exact(&mdp, &pi, &cont, &ObjectiveSpec::new(Semantics::As, kappa, 0.0))?.value;
        oracle_gap = oracle_gap.max((cf_as - ex_as).abs()).max((cf_asn - ex_asn).abs());
    }
    Ok(CounterexampleResult { argmax_as, argmax_asn, oracle_gap })
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionResult {
    pub n_tuples: usize,
    pub max_modulus: f64,
    /// `max(modulus - gamma)` over instances.
    pub max_excess: f64,
}

pub fn contraction(n_instances: usize, trials_per_instance: usize, seed: u64) -> anyhow::Result<ContractionResult> {
    let mut r = rng::stream(seed, rng::streams::EVAL);
    let mut max_modulus: f64 = 0.0;
    let mut max_excess = f64::NEG_INFINITY;
    for _ in 0..n_instances {
        let ns = r.gen_range(2..=6);
        let na = r.gen_range(2..=3);
        let gamma = r.gen_range(0.5..0.99);
        let (mdp, pi, cont) = random_instance(&mut r, ns, na, gamma)?;
        let shaped = shape(&mdp, &cont)?;
        let m = contraction_check(&shaped, &pi, trials_per_instance, &mut r)?;
        max_modulus = max_modulus.max(m);
        max_excess = max_excess.max(m - gamma);
    }
    Ok(ContractionResult { n_tuples: n_instances * trials_per_instance, max_modulus, max_excess })
}

#[derive(Debug, Clone, Serialize)]
pub struct McCase {
    pub instance: usize,
    pub semantics: Semantics,
    pub exact: f64,
    pub mc_mean: f64,
    pub std_err: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct McResult {
    pub n_samples: usize,
    pub cases: Vec<McCase>,
    pub max_z: f64,
}

/// Gate-explicit Monte Carlo estimates against the closed-form objectives on
/// random 3-state MDPs.
pub fn monte_carlo(n_mdps: usize, n_samples: usize, seed: u64) -> anyhow::Result<McResult> {
    let mut r = rng::stream(seed, rng::streams::EVAL);
    let mut cases = Vec::new();
    for i in 0..n_mdps {
        let gamma = r.gen_range(0.6..0.9);
        let (mdp, pi, cont) = random_instance(&mut r, 3, 2, gamma)?;
        let kappa = r.gen_range(0.1..1.5);
        for semantics in [Semantics::As, Semantics::Vt] {
            let spec = ObjectiveSpec::uniform_prior(semantics, kappa, &mdp);
            let exact = match semantics {
                Semantics::As => j_as_exact(&mdp, &pi, &cont, &spec)?.value,
                _ => j_vt_exact(&mdp, &pi, &cont, &spec)?.value,
            };
            let est = mc_elbo_estimate(&mdp, &pi, &cont, &spec, n_samples, seed.wrapping_add(i as u64))?;
            cases.push(McCase { instance: i, semantics, exact, mc_mean: est.mean, std_err: est.std_err, z: est.z_score(exact) });
        }
    }
    let max_z = cases.iter().map(|c| c.z).fold(0.0, f64::max);
    Ok(McResult { n_samples, cases, max_z })
}

#[derive(Debug, Clone, Serialize)]
pub struct TwoCriticResult {
    pub n_instances: usize,
    pub kappas: Vec<f64>,
    /// `max |V_kappa(mu) - J_AS|`.
    pub max_value_gap: f64,
    /// Largest residual of the two kappa-free recursions.
    pub max_recursion_residual: f64,
    /// `max |Q_R - kappa Q_KL - Q_kappa|` against direct soft evaluation.
    pub max_q_gap: f64,
}

fn kappa_free_residual(mdp: &FiniteMdp, pi: &SoftmaxPolicy, cont: &ContinuationModel, h_tgt: f64) -> anyhow::Result<(f64, sdh_core::bellman::CriticTables)> {
    let shaped = shape(mdp, cont)?;
    let c = two_critic_fixed_point(pi, &shaped, h_tgt, 1e-13)?;
    let mut worst: f64 = 0.0;
    for s in 0..mdp.n_states() {
        let logp = pi.log_probs(s);
        for a in 0..mdp.n_actions() {
            let (mut next_r, mut next_kl) = (0.0, 0.0);
            for (sn, &p) in mdp.transition(s, a).iter().enumerate() {
                if mdp.is_terminal(sn) || p == 0.0 {
                    continue;
                }
                let probs = pi.probs(sn);
                next_r += p * probs.iter().zip(&c.q_r[sn]).map(|(x, q)| x * q).sum::<f64>();
                next_kl += p * probs.iter().zip(&c.q_kl[sn]).map(|(x, q)| x * q).sum::<f64>();
            }
            let g = shaped.gamma_tilde[s][a];
            worst = worst
                .max((c.q_r[s][a] - (shaped.r_tilde[s][a] + g * next_r)).abs())
                .max((c.q_kl[s][a] - (logp[a] + h_tgt + g * next_kl)).abs());
        }
    }
    Ok((worst, c))
}

pub fn two_critic(n_instances: usize, kappas: &[f64], seed: u64) -> anyhow::Result<TwoCriticResult> {
    let mut r = rng::stream(seed, rng::streams::EVAL);
    let (mut max_value_gap, mut max_res, mut max_q_gap): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..n_instances {
        let ns = r.gen_range(2..=5);
        let na = r.gen_range(2..=3);
        let gamma = r.gen_range(0.5..0.95);
        let (mdp, pi, cont) = random_instance(&mut r, ns, na, gamma)?;
        let h_tgt = (na as f64).ln();
        let (res, critics) = kappa_free_residual(&mdp, &pi, &cont, h_tgt)?;
        max_res = max_res.max(res);
        let shaped = shape(&mdp, &cont)?;
        for &kappa in kappas {
            let spec = ObjectiveSpec::new(Semantics::As, kappa, h_tgt);
            let exact = j_as_exact(&mdp, &pi, &cont, &spec)?.value;
            let v = critics.v_kappa(&pi, kappa);
            let assembled: f64 = mdp.initial_dist().iter().zip(&v).map(|(m, x)| m * x).sum();
            max_value_gap = max_value_gap.max((assembled - exact).abs());
            let (q_direct, _) = soft_evaluate_as(&pi, &shaped, kappa, h_tgt, 1e-13)?;
            let q = combine_kappa(&critics, kappa);
            for s in (0..ns).filter(|&s| !mdp.is_terminal(s)) {
                for a in 0..na {
                    // Q_kappa keeps the current-step log pi; the soft critic does not.
                    let shift = kappa * pi.log_probs(s)[a];
                    max_q_gap = max_q_gap.max((q[s][a] + shift - q_direct[s][a]).abs());
                }
            }
        }
    }
    Ok(TwoCriticResult { n_instances, kappas: kappas.to_vec(), max_value_gap, max_recursion_residual: max_res, max_q_gap })
}

#[derive(Debug, Clone, Serialize)]
pub struct LivingCostResult {
    pub steps: u64,
    pub full: Vec<f64>,
    pub naive_critic: Vec<f64>,
}

pub fn counterexample_spec(variant: Variant, steps: u64) -> anyhow::Result<TrainSpec> {
    let mut learner = LearnerConfig::defaults(variant);
    learner.lr_dual = 0.0;
    Ok(TrainSpec {
        env: build_counterexample_mdp(0.4, 0.9)?,
        continuation: ContinuationModel::HardIndicator,
        schedules: vec![],
        learner,
        total_steps: steps,
        eval_interval: steps / 10,
    })
}

/// Final continue probabilities of the two critic variants with kappa fixed at 1.
pub fn living_cost(seeds: &[u64], steps: u64) -> anyhow::Result<LivingCostResult> {
    let run = |variant| -> anyhow::Result<Vec<f64>> {
        let spec = counterexample_spec(variant, steps)?;
        seeds
            .par_iter()
            .map(|&s| Ok(train(&spec, s)?.state.policy.probs(0)[CONTINUE]))
            .collect()
    };
    Ok(LivingCostResult { steps, full: run(Variant::AsSacFull)?, naive_critic: run(Variant::AsSacNaiveCritic)? })
}

#[derive(Debug, Clone, Serialize)]
pub struct ChanceCase {
    pub s_h: f64,
    pub threshold_b: f64,
    pub bound: f64,
    pub frequency: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BernoulliCase {
    pub s_h: f64,
    pub bound: f64,
    pub exact_frequency: f64,
    pub mc_frequency: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChanceResult {
    pub horizon: usize,
    pub lambda: f64,
    pub n_rollouts: usize,
    pub cases: Vec<ChanceCase>,
    /// `min(bound - frequency)` over the random chains.
    pub min_slack: f64,
    pub bernoulli: BernoulliCase,
}

/// One state whose action 1 costs 1 per step; a policy taking it with
/// probability `q` makes the step costs i.i.d. Bernoulli(q).
pub fn bernoulli_cost_mdp() -> anyhow::Result<FiniteMdp> {
    Ok(FiniteMdp::new(
        vec![vec![vec![1.0], vec![1.0]]],
        vec![vec![0.0, 0.0]],
        vec![vec![vec![0.0, 1.0]]],
        vec![1.0],
        vec![false],
        0.9,
    )?)
}

pub fn chance_bound_suite(n_chains: usize, n_rollouts: usize, horizon: usize, lambda: f64, seed: u64) -> anyhow::Result<ChanceResult> {
    let mut r = rng::stream(seed, rng::streams::EVAL);
    let mut cases = Vec::new();
    for i in 0..n_chains {
        let mdp = random_hazard_chain(&mut r)?;
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), 1.0, &mut r);
        // A continuous draw keeps b off the lattice of reachable cost totals.
        let b = r.gen_range(0.3..4.0);
        let s_h = survival_statistic(&mdp, &pi, lambda, horizon, SurvivalMode::Exact)?;
        let cert = chance_bound(s_h, lambda, b, horizon)?;
        let freq = mc_violation_frequency(&mdp, &pi, horizon, b, n_rollouts, seed.wrapping_add(i as u64))?;
        cases.push(ChanceCase { s_h, threshold_b: b, bound: cert.bound, frequency: freq.mean, std_err: freq.std_err });
    }
    let min_slack = cases.iter().map(|c| c.bound - c.frequency).fold(f64::INFINITY, f64::min);

    let mdp = bernoulli_cost_mdp()?;
    let pi = SoftmaxPolicy::bernoulli(1, 0.9)?;
    let s_h = survival_statistic(&mdp, &pi, 1.0, 5, SurvivalMode::Exact)?;
    let cert = chance_bound(s_h, 1.0, 1.0, 5)?;
    let bernoulli = BernoulliCase {
        s_h,
        bound: cert.bound,
        exact_frequency: exact_cost_tail(&mdp, &pi, 5, 1.0, 1 << 16)?,
        mc_frequency: mc_violation_frequency(&mdp, &pi, 5, 1.0, n_rollouts, seed)?.mean,
    };
    Ok(ChanceResult { horizon, lambda, n_rollouts, cases, min_slack, bernoulli })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayResult {
    pub n_windows: usize,
    pub bit_mismatches: usize,
    pub n_boundary: usize,
    pub max_identity_error: f64,
}

pub fn replay(n_windows: usize, seed: u64) -> anyhow::Result<ReplayResult> {
    let mut r = rng::stream(seed, rng::streams::EVAL);
    let mut bit_mismatches = 0;
    let mut max_identity_error: f64 = 0.0;
    let mut n_boundary = 0;
    for _ in 0..n_windows {
        let n = r.gen_range(1..=8);
        let gamma = r.gen_range(0.5..0.999);
        let w: Vec<WindowEntry> = (0..n)
            .map(|_| WindowEntry {
                s: r.gen_range(0..5),
                a: r.gen_range(0..3),
                r: r.gen_range(-2.0..2.0),
                cost: r.gen_range(0.0..1.0),
                alpha: if r.gen_bool(0.1) { 0.0 } else { r.gen_range(0.0..=1.0) },
                logp: r.gen_range(-3.0..0.0),
            })
            .collect();
        let rec = compress_window(&w, 0, false, gamma)?;
        // Brute force: every discount prefix rebuilt from scratch.
        let prefix = |k: usize| w[..k].iter().fold(1.0, |u, e| u * (gamma * e.alpha));
        let r_n = (0..n).fold(0.0, |acc, k| acc + prefix(k) * (w[k].alpha * w[k].r));
        if rec.r_n.to_bits() != r_n.to_bits() || rec.u_boot.to_bits() != prefix(n).to_bits() {
            bit_mismatches += 1;
        }
        // Episode ending inside the window: every shortened suffix obeys
        // R(w[k..]) = alpha_k r_k + gamma alpha_k R(w[k+1..]).
        for k in 0..n.saturating_sub(1) {
            let head = compress_window(&w[k..], 0, true, gamma)?;
            let tail = compress_window(&w[k + 1..], 0, true, gamma)?;
            let rhs = w[k].alpha * w[k].r + gamma * w[k].alpha * tail.r_n;
            max_identity_error = max_identity_error.max((head.r_n - rhs).abs());
            n_boundary += 1;
        }
    }
    Ok(ReplayResult { n_windows, bit_mismatches, n_boundary, max_identity_error })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientResult {
    pub n_instances: usize,
    pub actor: f64,
    pub actor_gi: f64,
    pub soft_actor: f64,
    pub entropy: f64,
    pub kappa_dual: f64,
    pub naive_tuning: f64,
    pub e_step_dual: f64,
}

impl GradientResult {
    pub fn max_error(&self) -> f64 {
        [self.actor, self.actor_gi, self.soft_actor, self.entropy, self.kappa_dual, self.naive_tuning, self.e_step_dual]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn random_table<R: Rng>(r: &mut R, ns: usize, na: usize, scale: f64) -> Table {
    (0..ns).map(|_| (0..na).map(|_| r.gen_range(-scale..scale)).collect()).collect()
}

pub fn gradients(n_instances: usize, seed: u64) -> anyhow::Result<GradientResult> {
    const H: f64 = 1e-5;
    let mut r = rng::stream(seed, rng::streams::EVAL);
    let mut out = GradientResult {
        n_instances,
        actor: 0.0,
        actor_gi: 0.0,
        soft_actor: 0.0,
        entropy: 0.0,
        kappa_dual: 0.0,
        naive_tuning: 0.0,
        e_step_dual: 0.0,
    };
    let policy_of = |l: &Table| SoftmaxPolicy::new(l.clone()).expect("finite logits");
    for _ in 0..n_instances {
        let ns = r.gen_range(1..=4);
        let na = r.gen_range(2..=4);
        let pi = random_policy(ns, na, 2.0, &mut r);
        let q_r = random_table(&mut r, ns, na, 3.0);
        let q_kl = random_table(&mut r, ns, na, 3.0);
        let states: Vec<usize> = (0..r.gen_range(1..=6)).map(|_| r.gen_range(0..ns)).collect();
        let kappa = r.gen_range(0.0..3.0);
        for gi in [false, true] {
            let l = actor_loss(&states, &pi, &q_r, &q_kl, kappa, gi);
            let e = gradient_check(|p| actor_loss(&states, &policy_of(p), &q_r, &q_kl, kappa, gi).value, pi.logits(), &l.grad, H);
            if gi {
                out.actor_gi = out.actor_gi.max(e);
            } else {
                out.actor = out.actor.max(e);
            }
        }
        let l = soft_actor_loss(&states, &pi, &q_r, kappa);
        out.soft_actor = out
            .soft_actor
            .max(gradient_check(|p| soft_actor_loss(&states, &policy_of(p), &q_r, kappa).value, pi.logits(), &l.grad, H));
        let s = states[0];
        let mut analytic = vec![vec![0.0; na]; ns];
        analytic[s] = entropy_grad(&pi, s);
        out.entropy = out.entropy.max(gradient_check(|p| policy_of(p).entropy(s), pi.logits(), &analytic, H));

        let log_kappa = r.gen_range(-3.0..2.0);
        let (a, b) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        let (_, g) = kappa_dual_loss(log_kappa, a, b);
        out.kappa_dual = out.kappa_dual.max(gradient_check_scalar(|x| kappa_dual_loss(x, a, b).0, log_kappa, g, H));
        let (_, g) = naive_tuning_loss(log_kappa, a, b);
        out.naive_tuning = out.naive_tuning.max(gradient_check_scalar(|x| naive_tuning_loss(x, a, b).0, log_kappa, g, H));

        let eta = r.gen_range(0.2..5.0);
        let eps = r.gen_range(0.01..0.5);
        let (_, dg) = e_step_dual(eta, eps, &states, &pi, &q_r);
        out.e_step_dual = out
            .e_step_dual
            .max(gradient_check_scalar(|x| e_step_dual(x, eps, &states, &pi, &q_r).0, eta, dg, H));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleArm {
    pub variant: Variant,
    pub endpoint: f64,
    pub final_costs: Vec<f64>,
    pub mean_final_cost: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleResult {
    pub steps: u64,
    pub arms: Vec<ScheduleArm>,
}

impl ScheduleResult {
    /// Whether the mean final cost never rises with the endpoint, per variant.
    pub fn monotone(&self, variant: Variant) -> bool {
        let means: Vec<f64> = self.arms.iter().filter(|a| a.variant == variant).map(|a| a.mean_final_cost).collect();
        means.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Config of one arm of the lambda-schedule experiment.
pub fn schedule_config(variant: Variant, endpoint: f64, steps: u64, seeds: &[u64]) -> ExperimentConfig {
    let mut learner = LearnerConfig::defaults(variant);
    if variant.is_sac() {
        learner.init_log_kappa = -5.0;
    }
    let mut schedules = std::collections::BTreeMap::new();
    schedules.insert(
        "lambda_ramp".to_string(),
        ScheduledParam {
            target: ScheduleTarget::Lambda,
            schedule: Schedule::Linear { start_value: 0.0, end_value: endpoint, start_step: steps / 10, end_step: steps * 6 / 10 },
        },
    );
    ExperimentConfig {
        env: EnvSpec::HazardChain(schedule_chain()),
        continuation: ContinuationModel::exponential(0.0),
        schedules,
        learner,
        seeds: seeds.to_vec(),
        total_steps: steps,
        eval_interval: steps / 10,
        output_dir: format!("runs/schedule_{}_{endpoint}", serde_json::to_value(variant).unwrap().as_str().unwrap()).into(),
        cost_limit: None,
    }
}

pub fn lambda_schedule(variants: &[Variant], endpoints: &[f64], seeds: &[u64], steps: u64) -> anyhow::Result<ScheduleResult> {
    let jobs: Vec<(Variant, f64)> = variants.iter().flat_map(|&v| endpoints.iter().map(move |&e| (v, e))).collect();
    let arms = jobs
        .par_iter()
        .map(|&(variant, endpoint)| {
            let spec = schedule_config(variant, endpoint, steps, seeds).train_spec()?;
            let final_costs = seeds
                .par_iter()
                .map(|&s| Ok(train(&spec, s)?.metrics.last().context("no metrics")?.cost_return))
                .collect::<anyhow::Result<Vec<f64>>>()?;
            let mean_final_cost = final_costs.iter().sum::<f64>() / final_costs.len() as f64;
            Ok(ScheduleArm { variant, endpoint, final_costs, mean_final_cost })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(ScheduleResult { steps, arms })
}

#[derive(Debug, Clone, Serialize)]
pub struct DeterminismResult {
    pub files_compared: usize,
    pub identical: bool,
}

/// Runs the same config twice into fresh directories and compares bytes.
pub fn determinism(cfg: &ExperimentConfig) -> anyhow::Result<DeterminismResult> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    crate::run::run(cfg, a.path())?;
    crate::run::run(cfg, b.path())?;
    let mut files_compared = 0;
    let mut identical = true;
    for &seed in &cfg.seeds {
        for path in [crate::run::metrics_path, crate::run::checkpoint_path] {
            let x = std::fs::read(path(a.path(), seed))?;
            let y = std::fs::read(path(b.path(), seed))?;
            identical &= x == y;
            files_compared += 1;
        }
    }
    Ok(DeterminismResult { files_compared, identical })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Counterexample,
    Contraction,
    MonteCarlo,
    TwoCritic,
    LivingCost,
    ChanceBound,
    Replay,
    Gradients,
    LambdaSchedule,
    Determinism,
    All,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub elapsed_s: f64,
    pub observed: serde_json::Value,
}

fn report<T: Serialize>(suite: &str, start: Instant, passed: bool, observed: &T) -> SuiteReport {
    SuiteReport {
        suite: suite.into(),
        passed,
        elapsed_s: start.elapsed().as_secs_f64(),
        observed: serde_json::to_value(observed).expect("observations serialize"),
    }
}

/// Small run used by the determinism suite.
pub fn determinism_config() -> ExperimentConfig {
    let mut cfg = schedule_config(Variant::AsSacFull, 0.9, 4000, &[0, 1]);
    cfg.eval_interval = 500;
    cfg
}

impl Suite {
    pub const ALL: [Suite; 10] = [
        Suite::Counterexample,
        Suite::Contraction,
        Suite::MonteCarlo,
        Suite::TwoCritic,
        Suite::LivingCost,
        Suite::ChanceBound,
        Suite::Replay,
        Suite::Gradients,
        Suite::LambdaSchedule,
        Suite::Determinism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Counterexample => "counterexample",
            Suite::Contraction => "contraction",
            Suite::MonteCarlo => "monte-carlo",
            Suite::TwoCritic => "two-critic",
            Suite::LivingCost => "living-cost",
            Suite::ChanceBound => "chance-bound",
            Suite::Replay => "replay",
            Suite::Gradients => "gradients",
            Suite::LambdaSchedule => "lambda-schedule",
            Suite::Determinism => "determinism",
            Suite::All => "all",
        }
    }

    /// Runs one suite with its default sizes and tolerances.
    pub fn run(self) -> anyhow::Result<Vec<SuiteReport>> {
        let t = Instant::now();
        let name = self.name();
        let one = |r: SuiteReport| Ok(vec![r]);
        match self {
            Suite::All => {
                let mut out = Vec::new();
                for s in Suite::ALL {
                    out.extend(s.run()?);
                }
                Ok(out)
            }
            Suite::Counterexample => {
                let o = counterexample(0.9, 1.0, 0.4)?;
                let ok = (o.argmax_as - 0.707).abs() <= COUNTEREXAMPLE_TOL
                    && (o.argmax_asn - 0.984).abs() <= COUNTEREXAMPLE_TOL
                    && o.oracle_gap < 1e-9;
                one(report(name, t, ok, &o))
            }
            Suite::Contraction => {
                let o = contraction(250, 4, 1)?;
                one(report(name, t, o.max_excess <= CONTRACTION_SLACK, &o))
            }
            Suite::MonteCarlo => {
                let o = monte_carlo(10, 1_000_000, 2)?;
                one(report(name, t, o.max_z <= MC_MAX_Z, &o))
            }
            Suite::TwoCritic => {
                let o = two_critic(20, &[0.0, 0.5, 2.0], 3)?;
                let ok = o.max_value_gap <= TWO_CRITIC_TOL && o.max_recursion_residual <= TWO_CRITIC_TOL && o.max_q_gap <= TWO_CRITIC_TOL;
                one(report(name, t, ok, &o))
            }
            Suite::LivingCost => {
                let o = living_cost(&[0, 1, 2, 3, 4], 30_000)?;
                let hits = |v: &[f64], target: f64| v.iter().filter(|p| (*p - target).abs() <= LIVING_COST_TOL).count();
                let ok = hits(&o.full, 0.707) >= 4 && hits(&o.naive_critic, 0.984) >= 4;
                one(report(name, t, ok, &o))
            }
            Suite::ChanceBound => {
                let o = chance_bound_suite(50, 100_000, 20, 1.0, 4)?;
                let ok = o.min_slack >= 0.0 && o.bernoulli.bound >= o.bernoulli.exact_frequency;
                one(report(name, t, ok, &o))
            }
            Suite::Replay => {
                let o = replay(10_000, 5)?;
                one(report(name, t, o.bit_mismatches == 0 && o.max_identity_error <= 1e-12, &o))
            }
            Suite::Gradients => {
                let o = gradients(100, 6)?;
                one(report(name, t, o.max_error() < GRADIENT_TOL, &o))
            }
            Suite::LambdaSchedule => {
                let variants = [Variant::AsSacNaiveTuning, Variant::VtMpo];
                let o = lambda_schedule(&variants, &[0.0, 0.45, 0.9], &[0, 1, 2, 3, 4], 50_000)?;
                let ok = variants.iter().all(|&v| o.monotone(v));
                one(report(name, t, ok, &o))
            }
            Suite::Determinism => {
                let o = determinism(&determinism_config())?;
                one(report(name, t, o.identical, &o))
            }
        }
    }
}
