//! Tabular softmax policies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::Table;

/// Logits are clamped to this magnitude so `log pi` stays finite.
pub const DEFAULT_LOGIT_CLAMP: f64 = 30.0;

/// Per-state softmax over a discrete action set. The logits are the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    logits: Table,
}

impl SoftmaxPolicy {
    pub fn new(logits: Table) -> Result<Self> {
        let n_actions = logits.first().map_or(0, Vec::len);
        if logits.is_empty() || n_actions == 0 {
            return usage("policy needs at least one state and one action");
        }
        if logits.iter().any(|row| row.len() != n_actions) {
            return usage("policy logits must be rectangular");
        }
        if logits.iter().flatten().any(|l| !l.is_finite()) {
            return usage("policy logits must be finite");
        }
        Ok(Self { logits })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            logits: vec![vec![0.0; n_actions]; n_states],
        }
    }

    /// Policy with the given action probabilities (zeros map to the clamp floor).
    pub fn from_probs(probs: &[Vec<f64>]) -> Result<Self> {
        let logits = probs
            .iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                if row.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return usage("probability rows must be nonnegative and sum to 1");
                }
                Ok(row
                    .iter()
                    .map(|&p| if p > 0.0 { p.ln() } else { -2.0 * DEFAULT_LOGIT_CLAMP })
                    .collect())
            })
            .collect::<Result<Table>>()?;
        Self::new(logits)
    }

    /// Two-action policy that picks action 0 with probability `p` in every state.
    pub fn bernoulli(n_states: usize, p: f64) -> Result<Self> {
        Self::from_probs(&vec![vec![p, 1.0 - p]; n_states])
    }

    pub fn n_states(&self) -> usize {
        self.logits.len()
    }

    pub fn n_actions(&self) -> usize {
        self.logits[0].len()
    }

    pub fn logits(&self) -> &Table {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Table {
        &mut self.logits
    }

    /// Clamp every logit to `[-limit, limit]`.
    pub fn clamp(&mut self, limit: f64) {
        for l in self.logits.iter_mut().flatten() {
            *l = l.clamp(-limit, limit);
        }
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        let row = &self.logits[s];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    pub fn log_probs(&self, s: usize) -> Vec<f64> {
        let row = &self.logits[s];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        row.iter().map(|l| l - lse).collect()
    }

    pub fn entropy(&self, s: usize) -> f64 {
        self.probs(s)
            .iter()
            .zip(self.log_probs(s))
            .map(|(p, lp)| if *p > 0.0 { -p * lp } else { 0.0 })
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(&self.probs(s), rng)
    }

    /// Polyak update `self <- tau * other + (1 - tau) * self` on the logits.
    pub fn soft_update(&mut self, other: &SoftmaxPolicy, tau: f64) {
        for (dst, src) in self.logits.iter_mut().flatten().zip(other.logits.iter().flatten()) {
            *dst = tau * src + (1.0 - tau) * *dst;
        }
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final partial sum; return the last supported index.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}
