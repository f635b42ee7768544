//! Environment specs accepted by configs and `sdh env export`.

use serde::{Deserialize, Serialize};

use sdh_core::mdp::{build_counterexample_mdp, FiniteMdp, HazardChain, HazardGridworld};
use sdh_core::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Counterexample { r: f64, gamma: f64 },
    HazardChain(HazardChain),
    HazardGridworld(HazardGridworld),
    /// A fully specified MDP, as written by `sdh env export`.
    Inline { mdp: FiniteMdp },
}

impl EnvSpec {
    pub fn build(&self) -> Result<FiniteMdp> {
        match self {
            EnvSpec::Counterexample { r, gamma } => build_counterexample_mdp(*r, *gamma),
            EnvSpec::HazardChain(c) => c.build(),
            EnvSpec::HazardGridworld(g) => g.build(),
            EnvSpec::Inline { mdp } => Ok(mdp.clone()),
        }
    }
}

/// Chain used by the lambda-schedule experiment: crossing two unit-cost
/// hazards reaches the goal, pushing left at the start pays a small reward.
pub fn schedule_chain() -> HazardChain {
    let mut c = HazardChain::new(8, &[3, 4], 1.0);
    c.safe_reward = 0.035;
    c
}

pub const NAMES: &[&str] = &["counterexample", "hazard-chain", "schedule-chain", "hazard-gridworld"];

pub fn named(name: &str) -> Option<EnvSpec> {
    Some(match name {
        "counterexample" => EnvSpec::Counterexample { r: 0.4, gamma: 0.9 },
        "hazard-chain" => EnvSpec::HazardChain(HazardChain::new(8, &[3, 4], 1.0)),
        "schedule-chain" => EnvSpec::HazardChain(schedule_chain()),
        "hazard-gridworld" => EnvSpec::HazardGridworld(HazardGridworld::new(5, 5, (4, 4), &[(2, 1), (2, 2), (2, 3)])),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_named_env_builds() {
        for n in NAMES {
            let spec = named(n).unwrap();
            let mdp = spec.build().unwrap();
            let inline = EnvSpec::Inline { mdp: mdp.clone() };
            let back: EnvSpec = serde_json::from_str(&serde_json::to_string(&inline).unwrap()).unwrap();
            assert_eq!(back.build().unwrap(), mdp);
        }
        assert!(named("nope").is_none());
    }
}
