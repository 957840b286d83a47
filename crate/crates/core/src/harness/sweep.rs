//! One-axis config sweeps and end-of-run summaries.

use std::borrow::Cow;
use std::path::Path;

use serde::Serialize;

use crate::diffusion::{Checkpoint, PolicyNet};
use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::eval::{evaluate, kl_estimate};
use super::train::{build_reference, check_reference, run_training, EpochStats, RunResult};

/// End-of-run numbers: a fresh evaluation of the final policy over every
/// prompt and a KL estimate, both with `eval_samples` per prompt.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub final_reward: f64,
    pub final_reward_stderr: f64,
    pub kl_estimate: f64,
    pub kl_stderr: f64,
    pub final_quarter_reward: f64,
    pub finite: bool,
    pub reward_queries: u64,
    pub gradient_updates: u64,
    pub divergence: Option<String>,
}

pub fn summarize(config: &TrainConfig, reference: &Checkpoint, run: &RunResult) -> RunSummary {
    let prompts: Vec<usize> = (0..config.task.prompt_count).collect();
    let schedule = &reference.schedule;
    let nan = (f64::NAN, f64::NAN);
    let (final_reward, final_reward_stderr) = config
        .reward_spec()
        .and_then(|spec| {
            evaluate(
                &run.policy,
                schedule,
                &prompts,
                &spec,
                config.eval_samples,
                config.seed,
            )
        })
        .map_or(nan, |e| (e.reward_mean, e.reward_stderr));
    let (kl, kl_stderr) = kl_estimate(
        &run.policy,
        &reference.policy,
        schedule,
        &prompts,
        config.eval_samples,
        config.seed,
    )
    .map_or(nan, |k| (k.mean, k.stderr));
    RunSummary {
        final_reward,
        final_reward_stderr,
        kl_estimate: kl,
        kl_stderr,
        final_quarter_reward: run.final_quarter_reward(),
        finite: run.finite(),
        reward_queries: run.reward_queries,
        gradient_updates: run.gradient_updates,
        divergence: run
            .divergence
            .as_ref()
            .map(|d| format!("epoch {}, update {}: {}", d.epoch, d.update, d.detail)),
    }
}

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub value: String,
    pub config: TrainConfig,
    pub stats: Option<Vec<EpochStats>>,
    pub policy: Option<PolicyNet>,
    pub summary: Option<RunSummary>,
    /// Set when the run could not execute at all.
    pub error: Option<String>,
}

/// Runs `template` once per value of `axis`. An unknown axis or invalid
/// value is a config error before anything runs; a failing run is recorded
/// and the sweep continues. Runs whose task shape or T no longer match
/// `reference` get their own pretrained reference.
pub fn sweep(
    template: &TrainConfig,
    axis: &str,
    values: &[String],
    reference: &Checkpoint,
) -> Result<Vec<SweepRun>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut c = template.clone();
            c.set(axis, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(values
        .iter()
        .zip(configs)
        .map(|(value, config)| {
            let outcome = (|| {
                let reference = match check_reference(&config, reference) {
                    Ok(()) => Cow::Borrowed(reference),
                    Err(_) => Cow::Owned(build_reference(&config)?),
                };
                let run = run_training(&config, &reference)?;
                Ok::<_, Error>((summarize(&config, &reference, &run), run.stats, run.policy))
            })();
            match outcome {
                Ok((summary, stats, policy)) => SweepRun {
                    value: value.clone(),
                    config,
                    stats: Some(stats),
                    policy: Some(policy),
                    summary: Some(summary),
                    error: None,
                },
                Err(e) => SweepRun {
                    value: value.clone(),
                    config,
                    stats: None,
                    policy: None,
                    summary: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

#[derive(Serialize)]
struct SweepRow<'a> {
    value: &'a str,
    status: &'a str,
    final_reward: f64,
    final_reward_stderr: f64,
    kl_estimate: f64,
    kl_stderr: f64,
    final_quarter_reward: f64,
    reward_queries: u64,
    gradient_updates: u64,
}

/// Comparison table, one row per value; `status` is `ok`, `diverged`, or
/// `error`.
pub fn emit_sweep_table(runs: &[SweepRun], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in runs {
        let s = r.summary.as_ref();
        let get = |f: fn(&RunSummary) -> f64| s.map_or(f64::NAN, f);
        w.serialize(SweepRow {
            value: &r.value,
            status: match s {
                None => "error",
                Some(s) if s.divergence.is_some() => "diverged",
                Some(_) => "ok",
            },
            final_reward: get(|s| s.final_reward),
            final_reward_stderr: get(|s| s.final_reward_stderr),
            kl_estimate: get(|s| s.kl_estimate),
            kl_stderr: get(|s| s.kl_stderr),
            final_quarter_reward: get(|s| s.final_quarter_reward),
            reward_queries: s.map_or(0, |s| s.reward_queries),
            gradient_updates: s.map_or(0, |s| s.gradient_updates),
        })?;
    }
    w.flush()?;
    Ok(())
}
