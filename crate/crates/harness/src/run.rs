//! Runs every seed of a config and writes metrics, checkpoints and a summary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use sdh_core::agents::{train, AgentState, MetricsRecord};
use sdh_core::{SdhError, ARTIFACT_VERSION};

use crate::config::ExperimentConfig;

pub fn metrics_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("metrics_seed{seed}.jsonl"))
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("checkpoint_seed{seed}.json"))
}

/// First line of every metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub kind: String,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub cost_limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub state: AgentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_reward_return: f64,
    pub final_cost_return: f64,
}

/// Order statistics of one final metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub iqm: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub version: String,
    pub per_seed: Vec<SeedSummary>,
    pub reward_return: Aggregate,
    pub cost_return: Aggregate,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Interquartile mean: drops the lowest and highest `floor(n / 4)` values.
/// Falls back to the plain mean for fewer than four values.
pub fn aggregate(values: &[f64]) -> Aggregate {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let trim = n / 4;
    let mid = &v[trim..n - trim];
    Aggregate {
        iqm: mid.iter().sum::<f64>() / mid.len() as f64,
        q25: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q75: quantile(&v, 0.75),
        mean: v.iter().sum::<f64>() / n as f64,
    }
}

pub fn render_metrics(header: &MetricsHeader, records: &[MetricsRecord]) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Reads a metrics file back into its header and records.
pub fn read_metrics(path: &Path) -> anyhow::Result<(MetricsHeader, Vec<MetricsRecord>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: MetricsHeader = serde_json::from_str(lines.next().context("empty metrics file")?)
        .with_context(|| format!("{}: bad header", path.display()))?;
    let records = lines
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 2)))
        .collect::<anyhow::Result<Vec<MetricsRecord>>>()?;
    Ok((header, records))
}

fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(contents.as_bytes())?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains every seed in parallel into `out_dir`. A diverged seed leaves its
/// snapshot in `diverged_seed{seed}.json` and fails the run.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let spec = cfg.train_spec()?;
    let hash = cfg.hash();
    let results: Vec<anyhow::Result<SeedSummary>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            log::info!("seed {seed}: training {} steps", cfg.total_steps);
            let out = match train(&spec, seed) {
                Ok(o) => o,
                Err(SdhError::Diverged { step, reason, snapshot }) => {
                    let p = out_dir.join(format!("diverged_seed{seed}.json"));
                    write_atomic(&p, &snapshot)?;
                    anyhow::bail!("seed {seed} diverged at step {step}: {reason} (snapshot in {})", p.display());
                }
                Err(e) => return Err(e.into()),
            };
            let header = MetricsHeader {
                kind: "header".into(),
                config_hash: hash.clone(),
                version: ARTIFACT_VERSION.into(),
                seed,
                cost_limit: cfg.cost_limit,
            };
            write_atomic(&metrics_path(out_dir, seed), &render_metrics(&header, &out.metrics))?;
            let ckpt = Checkpoint { config_hash: hash.clone(), version: ARTIFACT_VERSION.into(), seed, state: out.state };
            write_atomic(&checkpoint_path(out_dir, seed), &serde_json::to_string(&ckpt)?)?;
            let last = out.metrics.last().context("run produced no metrics")?;
            Ok(SeedSummary { seed, final_reward_return: last.reward_return, final_cost_return: last.cost_return })
        })
        .collect();
    let per_seed = results.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    let rewards: Vec<f64> = per_seed.iter().map(|s| s.final_reward_return).collect();
    let costs: Vec<f64> = per_seed.iter().map(|s| s.final_cost_return).collect();
    let summary = RunSummary {
        config_hash: hash,
        version: ARTIFACT_VERSION.into(),
        reward_return: aggregate(&rewards),
        cost_return: aggregate(&costs),
        per_seed,
    };
    write_atomic(&out_dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    write_atomic(
        &out_dir.join("config.json"),
        &serde_json::to_string_pretty(&json!({ "config_hash": summary.config_hash, "version": ARTIFACT_VERSION, "config": cfg }))?,
    )?;
    Ok(summary)
}
