use serde::{Deserialize, Serialize};

use super::FiniteMdp;
use crate::error::{usage, Result};
use crate::Table;

/// Action indices of the counterexample MDP.
pub const CONTINUE: usize = 0;
pub const STOP: usize = 1;

/// One state, actions {continue, stop}. Continuing pays `r` and is always
/// feasible; stopping pays nothing and emits a unit cost, so a hard-indicator
/// continuation model gives `alpha(continue) = 1`, `alpha(stop) = 0`.
pub fn build_counterexample_mdp(r: f64, gamma: f64) -> Result<FiniteMdp> {
    if !(r > 0.0 && r.is_finite()) {
        return usage(format!("counterexample reward must be positive, got {r}"));
    }
    FiniteMdp::new(
        vec![vec![vec![1.0], vec![1.0]]],
        vec![vec![r, 0.0]],
        vec![vec![vec![0.0, 1.0]]],
        vec![1.0],
        vec![false],
        gamma,
    )?
    .with_action_names(vec!["continue".into(), "stop".into()])
}

/// Line MDP with actions {left, right}, starting at state 0.
///
/// Entering the last state pays 1 and ends the episode. Every action taken
/// in a hazard state emits `hazard_cost` on the single cost channel. With
/// `slip > 0` a move goes the opposite way with that probability, and
/// `safe_reward` (default 0) is paid for pushing left at state 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazardChain {
    pub n: usize,
    pub hazards: Vec<usize>,
    pub hazard_cost: f64,
    #[serde(default)]
    pub slip: f64,
    #[serde(default)]
    pub safe_reward: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    0.9
}

impl HazardChain {
    pub fn new(n: usize, hazards: &[usize], hazard_cost: f64) -> Self {
        Self {
            n,
            hazards: hazards.to_vec(),
            hazard_cost,
            slip: 0.0,
            safe_reward: 0.0,
            gamma: default_gamma(),
        }
    }

    pub fn build(&self) -> Result<FiniteMdp> {
        let n = self.n;
        if n == 0 {
            return usage("hazard chain must not be empty");
        }
        if n < 2 {
            return usage("hazard chain needs at least 2 states");
        }
        if !(0.0..0.5).contains(&self.slip) {
            return usage("slip must lie in [0, 0.5)");
        }
        if !(self.hazard_cost.is_finite() && self.hazard_cost >= 0.0) {
            return usage("hazard_cost must be finite and nonnegative");
        }
        let goal = n - 1;
        if let Some(h) = self.hazards.iter().find(|&&h| h >= goal) {
            return usage(format!("hazard state {h} must lie in 0..{goal}"));
        }
        let mut transition = vec![vec![vec![0.0; n]; 2]; n];
        let mut reward = vec![vec![0.0; 2]; n];
        let mut cost = vec![vec![0.0; 2]; n];
        for s in 0..n {
            if s == goal {
                for a in 0..2 {
                    transition[s][a][s] = 1.0;
                }
                continue;
            }
            let left = s.saturating_sub(1);
            let right = s + 1;
            // action 0 = left, action 1 = right
            for (a, (intended, other)) in [(left, right), (right, left)].into_iter().enumerate() {
                transition[s][a][intended] += 1.0 - self.slip;
                transition[s][a][other] += self.slip;
                reward[s][a] = if intended == goal { 1.0 - self.slip } else { 0.0 }
                    + if other == goal { self.slip } else { 0.0 };
            }
            if self.hazards.contains(&s) {
                cost[s] = vec![self.hazard_cost; 2];
            }
        }
        reward[0][0] += self.safe_reward;
        let mut initial = vec![0.0; n];
        initial[0] = 1.0;
        let mut terminal = vec![false; n];
        terminal[goal] = true;
        FiniteMdp::new(transition, reward, vec![cost], initial, terminal, self.gamma)?
            .with_action_names(vec!["left".into(), "right".into()])
    }
}

/// Deterministic hazard chain with discount 0.9.
pub fn build_hazard_chain(n: usize, hazard_states: &[usize], hazard_cost: f64) -> Result<FiniteMdp> {
    HazardChain::new(n, hazard_states, hazard_cost).build()
}

/// Grid with moves {up, down, left, right}; bumping a wall stays in place.
/// State index is `y * width + x`. Entering the goal pays 1 and ends the
/// episode; acting in a hazard cell emits `hazard_cost`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazardGridworld {
    pub width: usize,
    pub height: usize,
    pub goal: (usize, usize),
    pub hazards: Vec<(usize, usize)>,
    #[serde(default)]
    pub start: (usize, usize),
    #[serde(default = "unit_cost")]
    pub hazard_cost: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn unit_cost() -> f64 {
    1.0
}

impl HazardGridworld {
    pub fn new(width: usize, height: usize, goal: (usize, usize), hazards: &[(usize, usize)]) -> Self {
        Self {
            width,
            height,
            goal,
            hazards: hazards.to_vec(),
            start: (0, 0),
            hazard_cost: unit_cost(),
            gamma: default_gamma(),
        }
    }

    pub fn index(&self, (x, y): (usize, usize)) -> usize {
        y * self.width + x
    }

    pub fn build(&self) -> Result<FiniteMdp> {
        let (w, h) = (self.width, self.height);
        if w == 0 || h == 0 {
            return usage("gridworld must not be empty");
        }
        let inside = |(x, y): (usize, usize)| x < w && y < h;
        if !inside(self.goal) || !inside(self.start) {
            return usage("goal and start must lie inside the grid");
        }
        if self.start == self.goal {
            return usage("start must differ from the goal");
        }
        if self.hazards.iter().any(|&c| !inside(c) || c == self.goal) {
            return usage("hazards must lie inside the grid and off the goal");
        }
        let n = w * h;
        let goal = self.index(self.goal);
        let mut transition = vec![vec![vec![0.0; n]; 4]; n];
        let mut reward: Table = vec![vec![0.0; 4]; n];
        let mut cost: Table = vec![vec![0.0; 4]; n];
        for y in 0..h {
            for x in 0..w {
                let s = self.index((x, y));
                if s == goal {
                    for a in 0..4 {
                        transition[s][a][s] = 1.0;
                    }
                    continue;
                }
                let moves = [
                    (x, (y + 1).min(h - 1)),
                    (x, y.saturating_sub(1)),
                    (x.saturating_sub(1), y),
                    ((x + 1).min(w - 1), y),
                ];
                for (a, cell) in moves.into_iter().enumerate() {
                    let next = self.index(cell);
                    transition[s][a][next] = 1.0;
                    if next == goal {
                        reward[s][a] = 1.0;
                    }
                }
                if self.hazards.contains(&(x, y)) {
                    cost[s] = vec![self.hazard_cost; 4];
                }
            }
        }
        let mut initial = vec![0.0; n];
        initial[self.index(self.start)] = 1.0;
        let mut terminal = vec![false; n];
        terminal[goal] = true;
        FiniteMdp::new(transition, reward, vec![cost], initial, terminal, self.gamma)?.with_action_names(
            ["up", "down", "left", "right"].iter().map(|s| s.to_string()).collect(),
        )
    }
}

/// Gridworld with unit hazard cost, start at `(0, 0)` and discount 0.9.
pub fn build_hazard_gridworld(
    width: usize,
    height: usize,
    goal: (usize, usize),
    hazards: &[(usize, usize)],
) -> Result<FiniteMdp> {
    HazardGridworld::new(width, height, goal, hazards).build()
}
