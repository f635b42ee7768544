//! Experiment configuration: one JSON document per run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdh_core::agents::{LearnerConfig, TrainSpec};
use sdh_core::continuation::{ContinuationModel, ScheduledParam};

use crate::envs::EnvSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub continuation: ContinuationModel,
    /// Named parameter schedules, applied in name order.
    #[serde(default)]
    pub schedules: BTreeMap<String, ScheduledParam>,
    pub learner: LearnerConfig,
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub output_dir: PathBuf,
    /// Reference line drawn on cost plots.
    #[serde(default)]
    pub cost_limit: Option<f64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.total_steps == 0 || self.eval_interval == 0 {
            bail!("total_steps and eval_interval must be positive");
        }
        self.env.build()?;
        self.continuation.validate()?;
        self.learner.validate()?;
        for (name, s) in &self.schedules {
            s.schedule.validate().with_context(|| format!("schedule `{name}`"))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact) serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn train_spec(&self) -> anyhow::Result<TrainSpec> {
        Ok(TrainSpec {
            env: self.env.build()?,
            continuation: self.continuation.clone(),
            schedules: self.schedules.values().cloned().collect(),
            learner: self.learner.clone(),
            total_steps: self.total_steps,
            eval_interval: self.eval_interval,
        })
    }
}

/// Parses `SDH_SEED`, a comma-separated list of seeds.
pub fn seeds_from_env() -> anyhow::Result<Option<Vec<u64>>> {
    match std::env::var("SDH_SEED") {
        Ok(v) => parse_seed_list(&v).map(Some),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("SDH_SEED: {e}"),
    }
}

pub fn parse_seed_list(v: &str) -> anyhow::Result<Vec<u64>> {
    let seeds = v
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("SDH_SEED: `{s}` is not a seed")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("SDH_SEED is empty");
    }
    Ok(seeds)
}
