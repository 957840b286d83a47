//! The epoch loop: snapshot, sample, query rewards, K gradient steps.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::baselines::{offline_batch, DdpoGraph, OfflineDataset, OfflineEntry, RewardNormalizer};
use crate::diffusion::{
    pretrain_reference, sample_batch, step_log_ratios, Checkpoint, DenoisingPolicy, NoiseSchedule,
    PolicyNet, Trajectory,
};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, global_norm, AdamW, AdamWConfig};
use crate::rdp::{LossEval, LossGraph, PairBatch, PromptGroup, Rollout};
use crate::rewards::RewardOracle;
use crate::rng::stream;

use super::config::{Algorithm, TrainConfig};

// stream identifiers under the run seed
const DATA: u64 = 1;
const PROMPTS: u64 = 10;
const ROLLOUTS: u64 = 11;
const OFFLINE_DATA: u64 = 12;
const OFFLINE_DRAW: u64 = 13;

/// One row of the metrics file. Reward and KL columns describe the epoch's
/// `N·B` rollouts from the snapshot `θ_old`; `loss` and
/// `max_abs_step_ratio` are the mean and the max over the epoch's updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub reward_mean: f64,
    pub reward_stderr: f64,
    pub loss: f64,
    /// Mean of `r̂_{θ_old}` over the rollouts, a Monte-Carlo estimate of
    /// `KL(π_{θ_old} ‖ π_ref)`.
    pub kl_estimate: f64,
    pub max_abs_step_ratio: f64,
    pub wall_ms: u64,
}

/// Diagnostics of one gradient update, taken before the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub epoch: usize,
    pub update: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub max_abs_step_ratio: f64,
    pub max_step_deviation: f64,
    pub max_clipped_deviation: f64,
    pub clipped_fraction: f64,
}

/// Where and why a run stopped early.
#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub update: usize,
    pub detail: String,
    /// Last parameters known to be finite (the epoch's snapshot).
    pub snapshot: PolicyNet,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub policy: PolicyNet,
    pub stats: Vec<EpochStats>,
    pub updates: Vec<UpdateStats>,
    /// Counted reward-oracle calls used for training.
    pub reward_queries: u64,
    pub gradient_updates: u64,
    /// The `N` prompts drawn in each epoch.
    pub prompt_draws: Vec<Vec<usize>>,
    pub divergence: Option<Divergence>,
}

impl RunResult {
    /// Every recorded loss is finite and the run finished all epochs.
    pub fn finite(&self) -> bool {
        self.divergence.is_none() && self.stats.iter().all(|s| s.loss.is_finite())
    }

    /// Mean epoch reward over the last quarter of epochs (at least one).
    pub fn final_quarter_reward(&self) -> f64 {
        let n = self.stats.len();
        if n == 0 {
            return f64::NAN;
        }
        let tail = &self.stats[n - n.div_ceil(4)..];
        tail.iter().map(|s| s.reward_mean).sum::<f64>() / tail.len() as f64
    }

    /// The reference's reward over the same final-quarter prompt draws as
    /// [`final_quarter_reward`](Self::final_quarter_reward), given its mean
    /// reward per prompt. Pairing the draws removes prompt-sampling noise
    /// when prompts differ in reward level.
    pub fn matched_baseline(&self, reference_prompt_means: &[f64]) -> f64 {
        let n = self.stats.len();
        if n == 0 {
            return f64::NAN;
        }
        let tail = &self.prompt_draws[n - n.div_ceil(4)..n];
        let per_epoch = |draws: &Vec<usize>| {
            draws
                .iter()
                .map(|&c| reference_prompt_means[c])
                .sum::<f64>()
                / draws.len() as f64
        };
        tail.iter().map(per_epoch).sum::<f64>() / tail.len() as f64
    }

    /// Finite throughout, and final-quarter reward at or above the matched
    /// reference baseline.
    pub fn stable(&self, reference_prompt_means: &[f64]) -> bool {
        self.finite()
            && self.final_quarter_reward() >= self.matched_baseline(reference_prompt_means)
    }
}

/// Pretrains the reference on the config's toy task.
pub fn build_reference(config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let schedule = NoiseSchedule::linear(config.ddpm_steps)?;
    let data = config
        .task
        .sample(config.pretrain_samples, &mut stream(config.seed, &[DATA]));
    let policy = pretrain_reference(
        &data,
        &schedule,
        config.task.prompt_count,
        &config.pretrain_config(),
    )?;
    Ok(Checkpoint {
        policy,
        schedule,
        seed: config.seed,
    })
}

/// Whether `reference` was built for the config's task shape and T.
pub fn check_reference(config: &TrainConfig, reference: &Checkpoint) -> Result<()> {
    let arch = reference.policy.arch();
    if arch.state_dim != 2 || arch.prompt_count != config.task.prompt_count {
        return Err(Error::Config(format!(
            "reference has {} prompts in {} dimensions; config expects {} prompts in 2",
            arch.prompt_count, arch.state_dim, config.task.prompt_count
        )));
    }
    if reference.schedule.steps() != config.ddpm_steps {
        return Err(Error::Config(format!(
            "reference uses T = {}, config sets ddpm_steps = {}",
            reference.schedule.steps(),
            config.ddpm_steps
        )));
    }
    Ok(())
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct Sampled {
    trajectories: Vec<Trajectory>,
    /// Per-step `log π_{θ_old}/π_ref`.
    snapshots: Vec<Vec<f64>>,
}

fn sample_epoch(
    snapshot: &PolicyNet,
    reference: &PolicyNet,
    schedule: &NoiseSchedule,
    ids: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<Sampled> {
    let trajectories = sample_batch(snapshot, schedule, ids, seed, &[ROLLOUTS, epoch as u64])?;
    let snapshots = trajectories
        .iter()
        .map(|t| step_log_ratios(snapshot, reference, schedule, t))
        .collect::<Result<_>>()?;
    Ok(Sampled {
        trajectories,
        snapshots,
    })
}

/// Either loss graph, evaluated at the current parameters.
enum Objective {
    Rdp(LossGraph),
    Ddpo(DdpoGraph),
}

impl Objective {
    fn evaluate(&self, policy: &PolicyNet) -> Result<LossEval> {
        match self {
            Objective::Rdp(g) => g.evaluate(policy.params()),
            Objective::Ddpo(g) => g.evaluate(policy.params()),
        }
    }
}

fn gradients_finite(grads: &Gradients) -> bool {
    grads
        .values()
        .all(|g| g.data().iter().all(|v| v.is_finite()))
}

fn groups_of(ids: &[usize], b: usize, sampled: Sampled, rewards: &[f64]) -> Vec<PromptGroup> {
    let mut rollouts = sampled
        .trajectories
        .into_iter()
        .zip(sampled.snapshots)
        .zip(rewards)
        .map(|((trajectory, snap), &reward)| Rollout {
            trajectory,
            reward,
            snapshot: Some(snap),
        });
    ids.chunks(b)
        .map(|chunk| PromptGroup {
            prompt: chunk[0],
            rollouts: rollouts.by_ref().take(chunk.len()).collect(),
        })
        .collect()
}

/// Offline data: `E·N·B` reference rollouts, prompts assigned round-robin,
/// each queried once.
fn offline_dataset(
    config: &TrainConfig,
    reference: &PolicyNet,
    schedule: &NoiseSchedule,
    oracle: &RewardOracle,
) -> Result<OfflineDataset> {
    let total = config.epochs * config.rollouts_per_epoch();
    let ids: Vec<usize> = (0..total).map(|i| i % config.task.prompt_count).collect();
    let trajs = sample_batch(reference, schedule, &ids, config.seed, &[OFFLINE_DATA])?;
    let entries = trajs
        .into_iter()
        .map(|t| {
            let reward = oracle.query(t.x0(), t.prompt)?;
            Ok(OfflineEntry {
                trajectory: t,
                reward,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    OfflineDataset::new(entries)
}

/// The offline dataset a `prdp-offline` run with this config and reference
/// trains on, built with its own uncounted oracle.
pub fn training_offline_dataset(
    config: &TrainConfig,
    reference: &Checkpoint,
) -> Result<OfflineDataset> {
    config.validate()?;
    check_reference(config, reference)?;
    let oracle = RewardOracle::new(config.reward_spec()?);
    offline_dataset(config, &reference.policy, &reference.schedule, &oracle)
}

/// Runs `E` epochs of the configured algorithm starting from the
/// reference. Every epoch snapshots `θ_old ← θ`, draws `N` prompts
/// uniformly with replacement, samples `B` rollouts per prompt from the
/// snapshot, and takes `K` gradient steps on one fixed batch. Online
/// algorithms query the reward for each of the `N·B` rollouts; the offline
/// variant spends the same `E·N·B` queries up front on reference rollouts
/// and still samples from the snapshot each epoch, but only to report
/// metrics (scored without counting).
///
/// A non-finite loss, gradient, or sample stops the run; the result then
/// carries a [`Divergence`] and the statistics gathered so far.
pub fn run_training(config: &TrainConfig, reference: &Checkpoint) -> Result<RunResult> {
    config.validate()?;
    check_reference(config, reference)?;
    let spec = config.reward_spec()?;
    let oracle = RewardOracle::new(spec.clone());
    let schedule = &reference.schedule;
    let ref_policy = &reference.policy;
    let mut policy = ref_policy.clone();
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let clip = config.clip();
    let mut normalizer = RewardNormalizer::new(config.normalizer);
    let dataset = match config.algorithm {
        Algorithm::PrdpOffline => Some(offline_dataset(config, ref_policy, schedule, &oracle)?),
        _ => None,
    };
    let mut offline_rng = stream(config.seed, &[OFFLINE_DRAW]);
    let mut stats = Vec::with_capacity(config.epochs);
    let mut updates = Vec::new();
    let mut gradient_updates = 0u64;
    let mut prompt_draws = Vec::with_capacity(config.epochs);
    let (n, b, k) = (
        config.prompts_per_epoch,
        config.samples_per_prompt,
        config.updates_per_epoch,
    );

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let snapshot = policy.clone();
        let diverged = |update: usize, detail: String| Divergence {
            epoch,
            update,
            detail,
            snapshot: snapshot.clone(),
        };
        let mut prompt_rng = stream(config.seed, &[PROMPTS, epoch as u64]);
        let draws: Vec<usize> = (0..n)
            .map(|_| prompt_rng.random_range(0..config.task.prompt_count))
            .collect();
        let ids: Vec<usize> = draws
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, b))
            .collect();
        prompt_draws.push(draws);
        let sampled = match sample_epoch(&snapshot, ref_policy, schedule, &ids, config.seed, epoch)
        {
            Ok(s) => s,
            Err(Error::Diverged { step }) => {
                stats.push(nan_stats(epoch));
                let d = diverged(0, format!("non-finite sample state at step {step}"));
                return Ok(finish(
                    snapshot,
                    stats,
                    updates,
                    prompt_draws,
                    &oracle,
                    gradient_updates,
                    Some(d),
                ));
            }
            Err(e) => return Err(e),
        };
        let rewards: Vec<f64> = match config.algorithm {
            Algorithm::PrdpOffline => sampled
                .trajectories
                .iter()
                .map(|t| spec.evaluate(t.x0(), t.prompt))
                .collect::<Result<_>>()?,
            _ => sampled
                .trajectories
                .iter()
                .map(|t| oracle.query(t.x0(), t.prompt))
                .collect::<Result<_>>()?,
        };
        let (reward_mean, reward_stderr) = mean_stderr(&rewards);
        let rhats: Vec<f64> = sampled.snapshots.iter().map(|s| s.iter().sum()).collect();
        let (kl_estimate, _) = mean_stderr(&rhats);

        let objective = match config.algorithm {
            Algorithm::Prdp => {
                let batch = PairBatch::new(groups_of(&ids, b, sampled, &rewards))?;
                Objective::Rdp(LossGraph::build(
                    &policy,
                    ref_policy,
                    schedule,
                    &batch,
                    config.beta,
                    clip.as_ref(),
                )?)
            }
            Algorithm::PrdpOffline => {
                let data = dataset.as_ref().expect("offline dataset");
                let batch = offline_batch(
                    data,
                    &snapshot,
                    ref_policy,
                    schedule,
                    n,
                    b,
                    &mut offline_rng,
                )?;
                Objective::Rdp(LossGraph::build(
                    &policy,
                    ref_policy,
                    schedule,
                    &batch,
                    config.beta,
                    clip.as_ref(),
                )?)
            }
            Algorithm::Ddpo => {
                let keyed: Vec<(usize, f64)> =
                    ids.iter().copied().zip(rewards.iter().copied()).collect();
                let advantages = normalizer.normalize_batch(&keyed);
                let rollouts: Vec<Rollout> = groups_of(&ids, b, sampled, &rewards)
                    .into_iter()
                    .flat_map(|g| g.rollouts)
                    .collect();
                Objective::Ddpo(DdpoGraph::build(
                    &policy,
                    ref_policy,
                    schedule,
                    &rollouts,
                    &advantages,
                    config.ddpo_clip_range,
                )?)
            }
        };

        let (mut loss_sum, mut max_ratio) = (0.0, 0.0f64);
        let mut failure = None;
        if k == 0 {
            let eval = objective.evaluate(&policy)?;
            loss_sum = eval.loss;
            max_ratio = eval.max_abs_step_ratio;
        }
        for update in 0..k {
            let eval = match objective.evaluate(&policy) {
                Ok(e) => e,
                Err(e @ Error::NonFinite { .. }) => {
                    failure = Some((update, e.to_string()));
                    break;
                }
                Err(e) => return Err(e),
            };
            let mut grads = eval.gradients;
            let grad_norm = global_norm(&grads);
            updates.push(UpdateStats {
                epoch,
                update,
                loss: eval.loss,
                grad_norm,
                max_abs_step_ratio: eval.max_abs_step_ratio,
                max_step_deviation: eval.max_step_deviation,
                max_clipped_deviation: eval.max_clipped_deviation,
                clipped_fraction: eval.clipped_fraction,
            });
            loss_sum += eval.loss;
            max_ratio = max_ratio.max(eval.max_abs_step_ratio);
            if !eval.loss.is_finite() || !gradients_finite(&grads) {
                failure = Some((update, format!("non-finite loss {} or gradient", eval.loss)));
                break;
            }
            if config.grad_clip_norm > 0.0 {
                clip_global_norm(&mut grads, config.grad_clip_norm);
            }
            opt.step(policy.params_mut(), &grads);
            gradient_updates += 1;
        }
        let loss = match failure {
            Some(_) => f64::NAN,
            None => loss_sum / k.max(1) as f64,
        };
        stats.push(EpochStats {
            epoch,
            reward_mean,
            reward_stderr,
            loss,
            kl_estimate,
            max_abs_step_ratio: max_ratio,
            wall_ms: if config.record_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        if let Some((update, detail)) = failure {
            let d = diverged(update, detail);
            return Ok(finish(
                snapshot,
                stats,
                updates,
                prompt_draws,
                &oracle,
                gradient_updates,
                Some(d),
            ));
        }
    }
    Ok(finish(
        policy,
        stats,
        updates,
        prompt_draws,
        &oracle,
        gradient_updates,
        None,
    ))
}

fn nan_stats(epoch: usize) -> EpochStats {
    EpochStats {
        epoch,
        reward_mean: f64::NAN,
        reward_stderr: f64::NAN,
        loss: f64::NAN,
        kl_estimate: f64::NAN,
        max_abs_step_ratio: f64::NAN,
        wall_ms: 0,
    }
}

fn finish(
    policy: PolicyNet,
    stats: Vec<EpochStats>,
    updates: Vec<UpdateStats>,
    prompt_draws: Vec<Vec<usize>>,
    oracle: &RewardOracle,
    gradient_updates: u64,
    divergence: Option<Divergence>,
) -> RunResult {
    RunResult {
        policy,
        stats,
        updates,
        reward_queries: oracle.queries(),
        gradient_updates,
        prompt_draws,
        divergence,
    }
}
