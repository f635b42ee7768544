//! Random instances for property sweeps.

use rand::Rng;

use super::{FiniteMdp, HazardChain};
use crate::error::Result;
use crate::policy::SoftmaxPolicy;

fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // -ln(U) draws are Exp(1), so the normalized vector is Dirichlet(1, ..., 1).
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // Push the rounding residue into the largest entry so the row sums to 1 within 1e-12.
    let residue = 1.0 - row.iter().sum::<f64>();
    let imax = (0..n).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap_or(0);
    row[imax] += residue;
    row
}

/// Dense random MDP: Dirichlet rows, rewards in `[0, 1)`, and costs that are
/// zero half of the time and uniform on `[0, 2)` otherwise.
pub fn random_mdp<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    n_channels: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<FiniteMdp> {
    let transition = (0..n_states)
        .map(|_| (0..n_actions).map(|_| random_simplex(n_states, rng)).collect())
        .collect();
    let reward = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let costs = (0..n_channels)
        .map(|_| {
            (0..n_states)
                .map(|_| {
                    (0..n_actions)
                        .map(|_| if rng.gen_bool(0.5) { 0.0 } else { 2.0 * rng.gen::<f64>() })
                        .collect()
                })
                .collect()
        })
        .collect();
    let initial = random_simplex(n_states, rng);
    FiniteMdp::new(transition, reward, costs, initial, vec![false; n_states], gamma)
}

/// Policy with logits uniform on `[-scale, scale]`.
pub fn random_policy<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    scale: f64,
    rng: &mut R,
) -> SoftmaxPolicy {
    let logits = (0..n_states)
        .map(|_| (0..n_actions).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect())
        .collect();
    SoftmaxPolicy::new(logits).expect("finite rectangular logits")
}

/// Random slippery hazard chain with 4 to 10 states and at least one hazard.
pub fn random_hazard_chain<R: Rng + ?Sized>(rng: &mut R) -> Result<FiniteMdp> {
    let n = rng.gen_range(4..=10);
    let mut hazards: Vec<usize> = (1..n - 1).filter(|_| rng.gen_bool(0.35)).collect();
    if hazards.is_empty() {
        hazards.push(rng.gen_range(1..n - 1));
    }
    HazardChain {
        n,
        hazards,
        hazard_cost: rng.gen_range(0.5..2.0),
        slip: rng.gen_range(0.0..0.3),
        safe_reward: 0.0,
        gamma: 0.9,
    }
    .build()
}
