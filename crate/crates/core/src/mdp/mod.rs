//! Finite MDPs, toy environments and seeded rollouts.

mod builders;
pub mod random;

pub use builders::{
    build_counterexample_mdp, build_hazard_chain, build_hazard_gridworld, HazardChain,
    HazardGridworld, CONTINUE, STOP,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::continuation::ContinuationModel;
use crate::error::{usage, Result, SdhError};
use crate::policy::{sample_categorical, SoftmaxPolicy};
use crate::Table;

const ROW_TOL: f64 = 1e-12;

/// Tabular dynamics with one reward table and any number of cost channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Table>,
    reward: Table,
    costs: Vec<Table>,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
    gamma: f64,
    action_names: Vec<String>,
}

/// Serialized form of [`FiniteMdp`]: dense arrays indexed `[s][a][s']`,
/// `[s][a]` and `[channel][s][a]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    #[serde(default)]
    pub action_names: Vec<String>,
    pub gamma: f64,
    pub transition: Vec<Table>,
    pub reward: Table,
    pub costs: Vec<Table>,
    pub initial_dist: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl TryFrom<MdpDocument> for FiniteMdp {
    type Error = SdhError;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let mdp = FiniteMdp::new(
            doc.transition,
            doc.reward,
            doc.costs,
            doc.initial_dist,
            doc.terminal,
            doc.gamma,
        )?;
        if mdp.n_states != doc.n_states || mdp.n_actions != doc.n_actions {
            return Err(SdhError::Format(format!(
                "declared shape {}x{} does not match tables {}x{}",
                doc.n_states, doc.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        mdp.with_action_names(doc.action_names)
    }
}

impl From<FiniteMdp> for MdpDocument {
    fn from(m: FiniteMdp) -> Self {
        MdpDocument {
            n_states: m.n_states,
            n_actions: m.n_actions,
            action_names: m.action_names,
            gamma: m.gamma,
            transition: m.transition,
            reward: m.reward,
            costs: m.costs,
            initial_dist: m.initial_dist,
            terminal: m.terminal,
        }
    }
}

impl FiniteMdp {
    /// Build and validate an MDP.
    ///
    /// Rows of `transition` and `initial_dist` must sum to one, costs must be
    /// nonnegative, rewards finite, and terminal states must self-loop with
    /// zero reward and zero cost.
    pub fn new(
        transition: Vec<Table>,
        reward: Table,
        costs: Vec<Table>,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
        gamma: f64,
    ) -> Result<Self> {
        let n_states = transition.len();
        if n_states == 0 {
            return usage("MDP needs at least one state");
        }
        let n_actions = transition[0].len();
        if n_actions == 0 {
            return usage("MDP needs at least one action");
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return usage(format!("gamma must lie in (0, 1), got {gamma}"));
        }
        let shape_ok = |t: &Table| t.len() == n_states && t.iter().all(|r| r.len() == n_actions);
        if !shape_ok(&reward) {
            return usage("reward table shape mismatch");
        }
        if initial_dist.len() != n_states || terminal.len() != n_states {
            return usage("initial_dist / terminal length mismatch");
        }
        for (s, rows) in transition.iter().enumerate() {
            if rows.len() != n_actions {
                return usage(format!("transition[{s}] has {} actions", rows.len()));
            }
            for (a, row) in rows.iter().enumerate() {
                check_distribution(row, n_states, &format!("transition[{s}][{a}]"))?;
            }
        }
        check_distribution(&initial_dist, n_states, "initial_dist")?;
        if reward.iter().flatten().any(|r| !r.is_finite()) {
            return usage("rewards must be finite");
        }
        for (i, c) in costs.iter().enumerate() {
            if !shape_ok(c) {
                return usage(format!("cost channel {i} shape mismatch"));
            }
            if c.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return usage(format!("cost channel {i} must be finite and nonnegative"));
            }
        }
        for s in (0..n_states).filter(|&s| terminal[s]) {
            for a in 0..n_actions {
                let loops = (transition[s][a][s] - 1.0).abs() <= ROW_TOL;
                let silent = reward[s][a] == 0.0 && costs.iter().all(|c| c[s][a] == 0.0);
                if !loops || !silent {
                    return usage(format!(
                        "terminal state {s} must self-loop with zero reward and cost"
                    ));
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            costs,
            initial_dist,
            terminal,
            gamma,
            action_names: Vec::new(),
        })
    }

    pub fn with_action_names(mut self, names: Vec<String>) -> Result<Self> {
        if !names.is_empty() && names.len() != self.n_actions {
            return usage("action_names length must match n_actions");
        }
        self.action_names = names;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_channels(&self) -> usize {
        self.costs.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn rewards(&self) -> &Table {
        &self.reward
    }

    pub fn costs(&self) -> &[Table] {
        &self.costs
    }

    /// Per-channel cost vector at `(s, a)`.
    pub fn cost_vec(&self, s: usize, a: usize) -> Vec<f64> {
        self.costs.iter().map(|c| c[s][a]).collect()
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn action_names(&self) -> &[String] {
        &self.action_names
    }

    /// Largest absolute reward.
    pub fn r_max(&self) -> f64 {
        self.reward.iter().flatten().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Same dynamics with another discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return usage(format!("gamma must lie in (0, 1), got {gamma}"));
        }
        Ok(Self { gamma, ..self.clone() })
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial_dist, rng)
    }

    fn check_index(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.n_states || a >= self.n_actions {
            return usage(format!(
                "(state {s}, action {a}) out of range for {}x{} MDP",
                self.n_states, self.n_actions
            ));
        }
        Ok(())
    }

    /// One environment transition. `truncated` is always false here; time
    /// limits belong to the caller.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<StepOutcome> {
        self.check_index(s, a)?;
        let next_state = sample_categorical(&self.transition[s][a], rng);
        Ok(StepOutcome {
            next_state,
            reward: self.reward[s][a],
            cost_vec: self.cost_vec(s, a),
            terminated: self.terminal[next_state],
            truncated: false,
        })
    }

    /// Roll out `policy` from the initial distribution for at most `max_steps`
    /// steps, recording the continuation probability of every step.
    /// Violations never reset the environment.
    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        policy: &SoftmaxPolicy,
        max_steps: usize,
        cont: &ContinuationModel,
        rng: &mut R,
    ) -> Result<Trajectory> {
        if max_steps == 0 {
            return usage("max_steps must be at least 1");
        }
        self.check_policy(policy)?;
        let mut s = self.sample_initial(rng);
        let mut steps = Vec::with_capacity(max_steps.min(1024));
        let mut terminal = self.terminal[s];
        while !terminal && steps.len() < max_steps {
            let a = policy.sample(s, rng);
            let out = self.step(s, a, rng)?;
            let alpha = cont.alpha(&out.cost_vec)?;
            steps.push(TrajectoryStep {
                state: s,
                action: a,
                reward: out.reward,
                cost_vec: out.cost_vec,
                alpha,
            });
            s = out.next_state;
            terminal = out.terminated;
        }
        Ok(Trajectory {
            steps,
            final_state: s,
            terminal,
            truncated: !terminal,
        })
    }

    pub(crate) fn check_policy(&self, policy: &SoftmaxPolicy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return usage(format!(
                "policy shape {}x{} does not match MDP {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            ));
        }
        Ok(())
    }
}

fn check_distribution(row: &[f64], n: usize, what: &str) -> Result<()> {
    if row.len() != n {
        return usage(format!("{what} has length {}, expected {n}", row.len()));
    }
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return usage(format!("{what} has negative or non-finite entries"));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return usage(format!("{what} sums to {total}, not 1"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: usize,
    pub reward: f64,
    pub cost_vec: Vec<f64>,
    /// The environment reached a true terminal state.
    pub terminated: bool,
    /// The episode hit its time limit. Loses to `terminated` when both apply.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub cost_vec: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// State after the last recorded step.
    pub final_state: usize,
    pub terminal: bool,
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn reward_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn cost_return(&self) -> f64 {
        self.steps.iter().flat_map(|s| s.cost_vec.iter()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn two_state(p0: f64) -> FiniteMdp {
        FiniteMdp::new(
            vec![vec![vec![p0, 1.0 - p0]], vec![vec![0.0, 1.0]]],
            vec![vec![1.0], vec![0.5]],
            vec![vec![vec![0.0], vec![2.0]]],
            vec![1.0, 0.0],
            vec![false, false],
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn deterministic_row_always_hits_target() {
        let mdp = two_state(0.0);
        let mut r = rng::stream(1, 0);
        for _ in 0..100 {
            assert_eq!(mdp.step(0, 0, &mut r).unwrap().next_state, 1);
        }
    }

    #[test]
    fn terminal_state_self_loops_silently() {
        let mdp = build_hazard_chain(4, &[], 1.0).unwrap();
        let mut r = rng::stream(1, 0);
        let out = mdp.step(3, 1, &mut r).unwrap();
        assert_eq!(out.next_state, 3);
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.cost_vec, vec![0.0]);
        assert!(out.terminated);
    }

    #[test]
    fn empirical_frequencies_match_row() {
        let mdp = two_state(0.3);
        let mut r = rng::stream(11, 0);
        let n = 100_000;
        let hits = (0..n).filter(|_| mdp.step(0, 0, &mut r).unwrap().next_state == 0).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.3).abs() < 0.01, "freq {freq}");
        // chi-square with one degree of freedom at the 0.999 quantile
        let expected = [0.3 * n as f64, 0.7 * n as f64];
        let observed = [hits as f64, (n - hits) as f64];
        let chi2: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
        assert!(chi2 < 10.83, "chi2 {chi2}");
    }

    #[test]
    fn out_of_range_step_is_usage_error() {
        let mdp = two_state(0.5);
        let mut r = rng::stream(1, 0);
        assert!(matches!(mdp.step(2, 0, &mut r), Err(SdhError::Usage(_))));
        assert!(matches!(mdp.step(0, 1, &mut r), Err(SdhError::Usage(_))));
    }

    #[test]
    fn rejects_bad_rows_and_negative_costs() {
        let bad_row = FiniteMdp::new(
            vec![vec![vec![0.5, 0.4]], vec![vec![0.0, 1.0]]],
            vec![vec![0.0], vec![0.0]],
            vec![],
            vec![1.0, 0.0],
            vec![false, false],
            0.9,
        );
        assert!(bad_row.is_err());
        let neg_cost = FiniteMdp::new(
            vec![vec![vec![1.0]]],
            vec![vec![0.0]],
            vec![vec![vec![-1.0]]],
            vec![1.0],
            vec![false],
            0.9,
        );
        assert!(neg_cost.is_err());
    }

    #[test]
    fn self_looping_action_truncates_at_max_steps() {
        let mdp = build_counterexample_mdp(0.4, 0.9).unwrap();
        let pi = SoftmaxPolicy::from_probs(&[vec![1.0, 0.0]]).unwrap();
        let cont = ContinuationModel::Constant { alpha: 1.0 };
        let mut r = rng::stream(3, 0);
        let traj = mdp.sample_trajectory(&pi, 5, &cont, &mut r).unwrap();
        assert_eq!(traj.len(), 5);
        assert!(traj.truncated && !traj.terminal);
        assert!(traj.steps.iter().all(|s| s.alpha == 1.0));
    }

    #[test]
    fn counterexample_always_continue_collects_r_every_step() {
        let mdp = build_counterexample_mdp(0.4, 0.9).unwrap();
        let pi = SoftmaxPolicy::from_probs(&[vec![1.0, 0.0]]).unwrap();
        let cont = ContinuationModel::HardIndicator;
        let mut r = rng::stream(3, 0);
        let traj = mdp.sample_trajectory(&pi, 50, &cont, &mut r).unwrap();
        assert_eq!(traj.len(), 50);
        assert!(traj.steps.iter().all(|s| s.reward == 0.4 && s.alpha == 1.0));
        assert_eq!(traj.cost_return(), 0.0);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let mdp = build_hazard_chain(6, &[2, 3], 1.0).unwrap();
        let pi = SoftmaxPolicy::uniform(6, 2);
        let cont = ContinuationModel::exponential(0.5);
        let a = mdp.sample_trajectory(&pi, 40, &cont, &mut rng::stream(9, 0)).unwrap();
        let b = mdp.sample_trajectory(&pi, 40, &cont, &mut rng::stream(9, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn json_round_trip_preserves_mdp() {
        let mdp = build_hazard_gridworld(3, 2, (2, 1), &[(1, 0)]).unwrap();
        let text = serde_json::to_string(&mdp).unwrap();
        let back: FiniteMdp = serde_json::from_str(&text).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn json_with_invalid_rows_is_rejected() {
        let text = r#"{"n_states":1,"n_actions":1,"gamma":0.9,"transition":[[[0.5]]],
            "reward":[[0.0]],"costs":[],"initial_dist":[1.0],"terminal":[false]}"#;
        assert!(serde_json::from_str::<FiniteMdp>(text).is_err());
    }
}
