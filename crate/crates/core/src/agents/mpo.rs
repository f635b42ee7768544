//! VT-MPO: survival TD(n) targets and the E/M policy-improvement steps.

use std::collections::BTreeSet;

use rand::Rng;

use super::sac::next_action_average;
use super::{DualState, NextActionMode};
use crate::error::{usage, Result, SdhError};
use crate::policy::SoftmaxPolicy;
use crate::replay::NStepRecord;
use crate::Table;

/// Lower end of the temperature search.
pub const ETA_MIN: f64 = 1e-6;

const ETA_BISECTIONS: usize = 200;
const ETA_WIDENINGS: usize = 60;

/// `y = R_n + (1 - done) u_boot E_{a~pi} Q~(s_boot, a)`.
pub fn vt_mpo_td_target<R: Rng + ?Sized>(
    rec: &NStepRecord,
    policy: &SoftmaxPolicy,
    target_q: &Table,
    mode: NextActionMode,
    rng: &mut R,
) -> f64 {
    if rec.done {
        return rec.r_n;
    }
    let next = next_action_average(policy, rec.s_boot, mode, rng, |a| target_q[rec.s_boot][a]);
    rec.r_n + rec.u_boot * next
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `q(a) ∝ pi0(a) exp(Q(a) / eta)`, normalized.
pub fn boltzmann_weights(prior: &[f64], q: &[f64], eta: f64) -> Vec<f64> {
    let logits: Vec<f64> = prior
        .iter()
        .zip(q)
        .map(|(p, x)| if *p > 0.0 { p.ln() + x / eta } else { f64::NEG_INFINITY })
        .collect();
    let lse = log_sum_exp(logits.iter().cloned());
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// `KL(q || pi0)` for the Boltzmann weights at `eta`.
fn boltzmann_kl(prior: &[f64], q: &[f64], eta: f64) -> f64 {
    let w = boltzmann_weights(prior, q, eta);
    w.iter()
        .zip(prior)
        .map(|(wi, pi)| if *wi > 0.0 { wi * (wi.ln() - pi.ln()) } else { 0.0 })
        .sum()
}

/// E-step dual `g(eta) = eta eps + eta E_s log sum_a pi0 exp(Q/eta)` and its
/// derivative `eps - E_s KL(q_eta || pi0)` over the given states.
pub fn e_step_dual(eta: f64, eps: f64, states: &[usize], prior: &SoftmaxPolicy, q: &Table) -> (f64, f64) {
    let n = states.len().max(1) as f64;
    let mut g = eta * eps;
    let mut dg = eps;
    for &s in states {
        let p = prior.probs(s);
        let lse = log_sum_exp(p.iter().zip(&q[s]).map(|(pi, x)| if *pi > 0.0 { pi.ln() + x / eta } else { f64::NEG_INFINITY }));
        g += eta * lse / n;
        dg -= boltzmann_kl(&p, &q[s], eta) / n;
    }
    (g, dg)
}

/// Result of an E-step over a set of distinct states.
#[derive(Debug, Clone, PartialEq)]
pub struct EStep {
    pub states: Vec<usize>,
    pub weights: Table,
    pub eta: f64,
    /// Mean `KL(q || pi0)` at the chosen temperature.
    pub kl: f64,
}

fn mean_kl(states: &[usize], prior: &[Vec<f64>], q: &Table, eta: f64) -> f64 {
    states.iter().zip(prior).map(|(&s, p)| boltzmann_kl(p, &q[s], eta)).sum::<f64>() / states.len() as f64
}

/// Boltzmann improvement weights with the temperature chosen so that the
/// mean KL to the prior meets `dual.mpo_kl_eps`.
///
/// The mean KL falls as `eta` grows, so the dual minimizer is the root of
/// `KL(eta) = eps`. It is found by bisection in `log eta` and the feasible
/// end of the final bracket is used. When even `ETA_MIN` satisfies the budget
/// the constraint does not bind and `ETA_MIN` is returned. Duplicate states
/// count once.
pub fn mpo_e_step(states: &[usize], prior: &SoftmaxPolicy, q: &Table, dual: &mut DualState) -> Result<EStep> {
    let eps = dual.mpo_kl_eps;
    if !(eps > 0.0) {
        return usage("mpo_kl_eps must be positive");
    }
    let unique: Vec<usize> = states.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.is_empty() {
        return usage("E-step needs at least one state");
    }
    let priors: Vec<Vec<f64>> = unique.iter().map(|&s| prior.probs(s)).collect();
    let kl = |eta: f64| mean_kl(&unique, &priors, q, eta);

    let eta = if kl(ETA_MIN) <= eps {
        ETA_MIN
    } else {
        let spread = unique
            .iter()
            .map(|&s| {
                let row = &q[s];
                row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - row.iter().cloned().fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        let mut hi = (dual.eta_e.max(spread)).max(ETA_MIN * 10.0);
        let mut widened = 0;
        while kl(hi) > eps {
            widened += 1;
            if widened > ETA_WIDENINGS || !hi.is_finite() {
                return Err(SdhError::EtaSearch(format!(
                    "KL stays above {eps} up to eta = {hi:e}"
                )));
            }
            hi *= 10.0;
        }
        let mut lo = ETA_MIN;
        for _ in 0..ETA_BISECTIONS {
            let mid = (0.5 * (lo.ln() + hi.ln())).exp();
            if mid <= lo || mid >= hi {
                break;
            }
            if kl(mid) > eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    dual.eta_e = eta;
    let weights: Table = unique.iter().zip(&priors).map(|(&s, p)| boltzmann_weights(p, &q[s], eta)).collect();
    Ok(EStep {
        kl: kl(eta),
        states: unique,
        weights,
        eta,
    })
}

/// Gradient ascent on `sum_s sum_a q_s(a) log pi(a|s)` for the listed states.
/// Each step moves the logits of `s` by `lr (q_s - pi_s)`; logits are clamped
/// to `[-clamp, clamp]` afterwards.
pub fn mpo_m_step(
    policy: &mut SoftmaxPolicy,
    states: &[usize],
    weights: &Table,
    lr: f64,
    n_iters: usize,
    clamp: f64,
) -> Result<()> {
    if states.len() != weights.len() {
        return usage("one weight row per state is required");
    }
    for (&s, w) in states.iter().zip(weights) {
        if w.len() != policy.n_actions() {
            return usage("weight row length must match the action count");
        }
        for _ in 0..n_iters {
            let p = policy.probs(s);
            for ((l, wi), pi) in policy.logits_mut()[s].iter_mut().zip(w).zip(&p) {
                *l = (*l + lr * (wi - pi)).clamp(-clamp, clamp);
            }
        }
    }
    Ok(())
}
