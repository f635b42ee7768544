//! Variable-discount evaluation operators, fixed points and the two-critic
//! decomposition.
//!
//! Terminal states are absorbing with value zero: no decision is taken there,
//! so neither rewards nor information costs accrue.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::continuation::ContinuationModel;
use crate::error::{usage, Result, SdhError};
use crate::mdp::FiniteMdp;
use crate::policy::SoftmaxPolicy;
use crate::Table;

/// Default tolerance for tabular solves.
pub const DEFAULT_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 10_000_000;

/// Dynamics with rewards and discounts shaped by a continuation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedMdp {
    pub alpha: Table,
    pub r_tilde: Table,
    pub gamma_tilde: Table,
    /// `transition[s][a][s']`.
    pub transition: Vec<Table>,
    pub terminal: Vec<bool>,
    pub initial_dist: Vec<f64>,
    pub gamma: f64,
}

impl ShapedMdp {
    pub fn n_states(&self) -> usize {
        self.r_tilde.len()
    }

    pub fn n_actions(&self) -> usize {
        self.r_tilde[0].len()
    }

    /// Same discounts with every reward set to zero.
    pub fn with_zero_reward(&self) -> Self {
        let mut out = self.clone();
        for r in out.r_tilde.iter_mut().flatten() {
            *r = 0.0;
        }
        out
    }

    /// Largest shaped discount.
    pub fn max_gamma_tilde(&self) -> f64 {
        self.gamma_tilde.iter().flatten().fold(0.0, |m, g| m.max(*g))
    }

    fn expected_next(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.transition[s][a].iter().zip(v).map(|(p, x)| p * x).sum()
    }

    fn check_policy(&self, policy: &SoftmaxPolicy) -> Result<()> {
        if policy.n_states() != self.n_states() || policy.n_actions() != self.n_actions() {
            return usage("policy shape does not match the shaped MDP");
        }
        Ok(())
    }

    /// `Q(s, a) = step[s][a] + gamma~(s, a) * E_{s'} V(s')`, zero at terminals.
    pub fn q_from_v(&self, step: &Table, v: &[f64]) -> Table {
        (0..self.n_states())
            .map(|s| {
                (0..self.n_actions())
                    .map(|a| {
                        if self.terminal[s] {
                            0.0
                        } else {
                            step[s][a] + self.gamma_tilde[s][a] * self.expected_next(s, a, v)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// `r~ = alpha * r`, `gamma~ = gamma * alpha`.
pub fn shape(mdp: &FiniteMdp, cont: &ContinuationModel) -> Result<ShapedMdp> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.gamma();
    let mut alpha = vec![vec![0.0; na]; ns];
    let mut r_tilde = vec![vec![0.0; na]; ns];
    let mut gamma_tilde = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        for a in 0..na {
            let al = cont.alpha(&mdp.cost_vec(s, a))?;
            alpha[s][a] = al;
            r_tilde[s][a] = al * mdp.reward(s, a);
            gamma_tilde[s][a] = gamma * al;
        }
    }
    Ok(ShapedMdp {
        alpha,
        r_tilde,
        gamma_tilde,
        transition: (0..ns)
            .map(|s| (0..na).map(|a| mdp.transition(s, a).to_vec()).collect())
            .collect(),
        terminal: (0..ns).map(|s| mdp.is_terminal(s)).collect(),
        initial_dist: mdp.initial_dist().to_vec(),
        gamma,
    })
}

/// One application of `(T V)(s) = E_a[r~ + f + gamma~ * E_{s'} V(s')]`.
pub fn apply_eval_operator(
    v: &[f64],
    policy: &SoftmaxPolicy,
    shaped: &ShapedMdp,
    f: Option<&Table>,
) -> Result<Vec<f64>> {
    shaped.check_policy(policy)?;
    if v.len() != shaped.n_states() {
        return usage("value vector length does not match the MDP");
    }
    if let Some(f) = f {
        if f.len() != shaped.n_states() || f.iter().any(|row| row.len() != shaped.n_actions()) {
            return usage("extra-reward table shape does not match the MDP");
        }
    }
    Ok((0..shaped.n_states())
        .map(|s| {
            if shaped.terminal[s] {
                return 0.0;
            }
            policy
                .probs(s)
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(a, p)| {
                    let extra = f.map_or(0.0, |f| f[s][a]);
                    p * (shaped.r_tilde[s][a] + extra + shaped.gamma_tilde[s][a] * shaped.expected_next(s, a, v))
                })
                .sum()
        })
        .collect())
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Fixed point of the evaluation operator to within `tol` in the sup norm.
///
/// Iterates until `||T V - V|| <= tol * (1 - gamma) / gamma`, which bounds
/// the distance to the fixed point by `tol`.
pub fn evaluate_policy(
    policy: &SoftmaxPolicy,
    shaped: &ShapedMdp,
    f: Option<&Table>,
    tol: f64,
) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return usage("tolerance must be positive");
    }
    let gamma = shaped.gamma;
    let stop = tol * (1.0 - gamma) / gamma;
    let mut v = vec![0.0; shaped.n_states()];
    for _ in 0..MAX_SWEEPS {
        let next = apply_eval_operator(&v, policy, shaped, f)?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(SdhError::Numeric("policy evaluation produced a non-finite value".into()));
        }
        let residual = sup_dist(&next, &v);
        v = next;
        if residual <= stop {
            return Ok(v);
        }
    }
    Err(SdhError::Numeric("policy evaluation did not converge".into()))
}

/// Per-step information cost `log pi(a|s) + c`, with `0 * log 0 := 0`.
pub fn information_cost(policy: &SoftmaxPolicy, c: f64) -> Table {
    (0..policy.n_states())
        .map(|s| {
            let probs = policy.probs(s);
            policy
                .log_probs(s)
                .iter()
                .zip(&probs)
                .map(|(lp, p)| if *p > 0.0 { lp + c } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Soft AS evaluation: `Q = r~ - kappa * ell_c + gamma~ * E V`,
/// `V = E_a[Q - kappa * log pi]`.
pub fn soft_evaluate_as(
    policy: &SoftmaxPolicy,
    shaped: &ShapedMdp,
    kappa: f64,
    ell_c: f64,
    tol: f64,
) -> Result<(Table, Vec<f64>)> {
    let f: Table = information_cost(policy, ell_c)
        .into_iter()
        .map(|row| row.into_iter().map(|c| -kappa * c).collect())
        .collect();
    let v = evaluate_policy(policy, shaped, Some(&f), tol)?;
    let step: Table = shaped
        .r_tilde
        .iter()
        .map(|row| row.iter().map(|r| r - kappa * ell_c).collect())
        .collect();
    Ok((shaped.q_from_v(&step, &v), v))
}

/// Fixed points of the reward critic and the information critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticTables {
    pub q_r: Table,
    pub q_kl: Table,
    pub v_r: Vec<f64>,
    pub v_kl: Vec<f64>,
}

impl CriticTables {
    /// `V_kappa(s) = E_a[Q_R - kappa * Q_KL]`.
    pub fn v_kappa(&self, policy: &SoftmaxPolicy, kappa: f64) -> Vec<f64> {
        let q = combine_kappa(self, kappa);
        (0..q.len())
            .map(|s| policy.probs(s).iter().zip(&q[s]).map(|(p, x)| p * x).sum())
            .collect()
    }
}

/// Solves both kappa-free recursions:
/// `Q_R = r~ + gamma~ E V_R` and `Q_KL = (log pi + h_tgt) + gamma~ E V_KL`.
pub fn two_critic_fixed_point(
    policy: &SoftmaxPolicy,
    shaped: &ShapedMdp,
    h_tgt: f64,
    tol: f64,
) -> Result<CriticTables> {
    let v_r = evaluate_policy(policy, shaped, None, tol)?;
    let kl_step = information_cost(policy, h_tgt);
    let no_reward = shaped.with_zero_reward();
    let v_kl = evaluate_policy(policy, &no_reward, Some(&kl_step), tol)?;
    Ok(CriticTables {
        q_r: shaped.q_from_v(&shaped.r_tilde, &v_r),
        q_kl: shaped.q_from_v(&kl_step, &v_kl),
        v_r,
        v_kl,
    })
}

/// `Q_kappa = Q_R - kappa * Q_KL`.
pub fn combine_kappa(critics: &CriticTables, kappa: f64) -> Table {
    critics
        .q_r
        .iter()
        .zip(&critics.q_kl)
        .map(|(r, k)| r.iter().zip(k).map(|(r, k)| r - kappa * k).collect())
        .collect()
}

/// Largest observed ratio `||T V - T W|| / ||V - W||` over random bounded
/// pairs. Every third trial uses a constant offset `W = V + c`, which attains
/// the modulus when `alpha = 1`.
pub fn contraction_check<R: Rng + ?Sized>(
    shaped: &ShapedMdp,
    policy: &SoftmaxPolicy,
    n_trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_trials == 0 {
        return usage("contraction_check needs at least one trial");
    }
    let n = shaped.n_states();
    let mut worst: f64 = 0.0;
    for trial in 0..n_trials {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let w: Vec<f64> = if trial % 3 == 0 {
            let c = rng.gen_range(-5.0..5.0);
            v.iter().map(|x| x + c).collect()
        } else {
            (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect()
        };
        let gap = sup_dist(&v, &w);
        if gap == 0.0 {
            continue;
        }
        let tv = apply_eval_operator(&v, policy, shaped, None)?;
        let tw = apply_eval_operator(&w, policy, shaped, None)?;
        worst = worst.max(sup_dist(&tv, &tw) / gap);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::random::{random_mdp, random_policy};
    use crate::mdp::{build_counterexample_mdp, build_hazard_chain, FiniteMdp};
    use crate::rng;
    use std::f64::consts::LN_2;

    fn one_state(r: f64) -> FiniteMdp {
        FiniteMdp::new(vec![vec![vec![1.0]]], vec![vec![r]], vec![], vec![1.0], vec![false], 0.9).unwrap()
    }

    #[test]
    fn shape_identity_and_zero() {
        let mdp = build_hazard_chain(5, &[2], 1.0).unwrap();
        let s1 = shape(&mdp, &ContinuationModel::Constant { alpha: 1.0 }).unwrap();
        assert_eq!(&s1.r_tilde, mdp.rewards());
        assert!(s1.gamma_tilde.iter().flatten().all(|g| *g == 0.9));
        let s0 = shape(&mdp, &ContinuationModel::Constant { alpha: 0.0 }).unwrap();
        assert!(s0.r_tilde.iter().chain(&s0.gamma_tilde).flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn shape_attenuates_hazard_reward() {
        let chain = crate::mdp::HazardChain { safe_reward: 0.5, ..crate::mdp::HazardChain::new(4, &[0], 0.8) };
        let mdp = chain.build().unwrap();
        let shaped = shape(&mdp, &ContinuationModel::exponential(1.0)).unwrap();
        assert!((shaped.r_tilde[0][0] - (-0.8f64).exp() * 0.5).abs() < 1e-15);
    }

    #[test]
    fn operator_examples() {
        let mdp = FiniteMdp::new(vec![vec![vec![1.0]]], vec![vec![2.0]], vec![vec![vec![0.0]]], vec![1.0], vec![false], 0.9)
            .unwrap();
        let shaped = shape(&mdp, &ContinuationModel::Constant { alpha: 0.5 }).unwrap();
        let pi = SoftmaxPolicy::uniform(1, 1);
        let tv = apply_eval_operator(&[2.0], &pi, &shaped, None).unwrap();
        assert!((tv[0] - 1.9).abs() < 1e-15);
        let t0 = apply_eval_operator(&[0.0], &pi, &shaped, None).unwrap();
        assert_eq!(t0[0], 1.0);
    }

    #[test]
    fn geometric_value() {
        let shaped = shape(&one_state(1.0), &ContinuationModel::Constant { alpha: 1.0 }).unwrap();
        let v = evaluate_policy(&SoftmaxPolicy::uniform(1, 1), &shaped, None, 1e-10).unwrap();
        assert!((v[0] - 10.0).abs() <= 1e-10);
        let gated = shape(&one_state(1.0), &ContinuationModel::Constant { alpha: 0.0 }).unwrap();
        let v = evaluate_policy(&SoftmaxPolicy::uniform(1, 1), &gated, None, 1e-10).unwrap();
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn counterexample_values() {
        let mdp = build_counterexample_mdp(0.4, 0.9).unwrap();
        let shaped = shape(&mdp, &ContinuationModel::HardIndicator).unwrap();
        let pi = SoftmaxPolicy::bernoulli(1, 0.5).unwrap();
        let expected = 0.2 / 0.55;
        let v = evaluate_policy(&pi, &shaped, None, 1e-12).unwrap();
        assert!((v[0] - expected).abs() < 1e-11);
        let (_, vs) = soft_evaluate_as(&pi, &shaped, 1.0, LN_2, 1e-12).unwrap();
        assert!((vs[0] - expected).abs() < 1e-11);
        let critics = two_critic_fixed_point(&pi, &shaped, LN_2, 1e-12).unwrap();
        assert!(critics.v_kl[0].abs() < 1e-12);
    }

    #[test]
    fn soft_evaluation_with_zero_kappa_is_plain_evaluation() {
        let mut r = rng::stream(3, 0);
        let mdp = random_mdp(4, 3, 1, 0.8, &mut r).unwrap();
        let pi = random_policy(4, 3, 2.0, &mut r);
        let shaped = shape(&mdp, &ContinuationModel::exponential(0.5)).unwrap();
        let v = evaluate_policy(&pi, &shaped, None, 1e-12).unwrap();
        let (_, vs) = soft_evaluate_as(&pi, &shaped, 0.0, LN_2, 1e-12).unwrap();
        for (a, b) in v.iter().zip(&vs) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn deterministic_policy_has_zero_information_critic() {
        let mut r = rng::stream(4, 0);
        let mdp = random_mdp(3, 2, 1, 0.9, &mut r).unwrap();
        let pi = SoftmaxPolicy::from_probs(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let shaped = shape(&mdp, &ContinuationModel::exponential(0.3)).unwrap();
        let critics = two_critic_fixed_point(&pi, &shaped, 0.0, 1e-12).unwrap();
        // log pi is -1e-52-ish on the support after clamping, which rounds to 0.
        assert!(critics.v_kl.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn two_critic_matches_soft_evaluation() {
        let mut r = rng::stream(5, 0);
        for _ in 0..10 {
            let mdp = random_mdp(4, 3, 2, 0.85, &mut r).unwrap();
            let pi = random_policy(4, 3, 1.5, &mut r);
            let shaped = shape(&mdp, &ContinuationModel::exponential(0.7)).unwrap();
            let critics = two_critic_fixed_point(&pi, &shaped, 3f64.ln(), 1e-12).unwrap();
            for kappa in [0.0, 0.5, 2.0] {
                let vk = critics.v_kappa(&pi, kappa);
                let (_, vs) = soft_evaluate_as(&pi, &shaped, kappa, 3f64.ln(), 1e-12).unwrap();
                for (a, b) in vk.iter().zip(&vs) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn combine_kappa_examples() {
        let c = CriticTables {
            q_r: vec![vec![1.0]],
            q_kl: vec![vec![0.25]],
            v_r: vec![1.0],
            v_kl: vec![0.25],
        };
        assert_eq!(combine_kappa(&c, 2.0), vec![vec![0.5]]);
        assert_eq!(combine_kappa(&c, 0.0), c.q_r);
    }

    #[test]
    fn contraction_modulus_bounds() {
        let mut r = rng::stream(6, 0);
        let mdp = random_mdp(5, 3, 1, 0.9, &mut r).unwrap();
        let pi = random_policy(5, 3, 1.0, &mut r);
        let full = shape(&mdp, &ContinuationModel::Constant { alpha: 1.0 }).unwrap();
        let m = contraction_check(&full, &pi, 300, &mut r).unwrap();
        assert!(m <= 0.9 + 1e-12 && m > 0.9 - 1e-9);
        let dead = shape(&mdp, &ContinuationModel::Constant { alpha: 0.0 }).unwrap();
        assert_eq!(contraction_check(&dead, &pi, 50, &mut r).unwrap(), 0.0);
        let partial = shape(&mdp, &ContinuationModel::exponential(0.4)).unwrap();
        let m = contraction_check(&partial, &pi, 300, &mut r).unwrap();
        assert!(m <= partial.max_gamma_tilde() + 1e-12);
    }

    #[test]
    fn banach_residual_after_convergence() {
        let mut r = rng::stream(7, 0);
        let mdp = random_mdp(6, 2, 1, 0.95, &mut r).unwrap();
        let pi = random_policy(6, 2, 1.0, &mut r);
        let shaped = shape(&mdp, &ContinuationModel::exponential(0.2)).unwrap();
        let v = evaluate_policy(&pi, &shaped, None, 1e-10).unwrap();
        let tv = apply_eval_operator(&v, &pi, &shaped, None).unwrap();
        assert!(sup_dist(&tv, &v) <= 1e-10);
    }
}
