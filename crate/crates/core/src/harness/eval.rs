//! Monte-Carlo evaluation with shared noise across policies.

use serde::Serialize;

use crate::diffusion::{sample_batch, step_log_ratios, DenoisingPolicy, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rewards::RewardSpec;

const EVAL: u64 = 20;
const KL: u64 = 21;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptEvaluation {
    pub prompt: usize,
    pub reward_mean: f64,
    pub reward_stderr: f64,
    /// Per-coordinate sample mean of `x₀`.
    pub x0_mean: Vec<f64>,
    /// Per-coordinate sample standard deviation of `x₀`.
    pub x0_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardEvaluation {
    pub per_prompt: Vec<PromptEvaluation>,
    pub reward_mean: f64,
    pub reward_stderr: f64,
    /// Every sample's reward, prompt-major; sample `i` used noise index `i`.
    #[serde(skip)]
    pub rewards: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() < 2 {
        0.0
    } else {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    (mean, var.sqrt())
}

/// Samples `samples_per_prompt` rollouts per prompt and scores them. Sample
/// `i` (prompt-major) always uses noise index `i` under `seed`, so two
/// policies evaluated with the same seed see identical noise draws.
pub fn evaluate<P: DenoisingPolicy + ?Sized>(
    policy: &P,
    schedule: &NoiseSchedule,
    prompts: &[usize],
    spec: &RewardSpec,
    samples_per_prompt: usize,
    seed: u64,
) -> Result<RewardEvaluation> {
    if prompts.is_empty() || samples_per_prompt == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs prompts and samples".into(),
        ));
    }
    let ids: Vec<usize> = prompts
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, samples_per_prompt))
        .collect();
    let trajs = sample_batch(policy, schedule, &ids, seed, &[EVAL])?;
    let rewards: Vec<f64> = trajs
        .iter()
        .map(|t| spec.evaluate(t.x0(), t.prompt))
        .collect::<Result<_>>()?;
    let d = policy.state_dim();
    let per_prompt = prompts
        .iter()
        .enumerate()
        .map(|(k, &prompt)| {
            let range = k * samples_per_prompt..(k + 1) * samples_per_prompt;
            let (reward_mean, std) = mean_std(&rewards[range.clone()]);
            let (x0_mean, x0_std) = (0..d)
                .map(|i| {
                    let xs: Vec<f64> = trajs[range.clone()].iter().map(|t| t.x0()[i]).collect();
                    mean_std(&xs)
                })
                .unzip();
            PromptEvaluation {
                prompt,
                reward_mean,
                reward_stderr: std / (samples_per_prompt as f64).sqrt(),
                x0_mean,
                x0_std,
            }
        })
        .collect();
    let (reward_mean, std) = mean_std(&rewards);
    Ok(RewardEvaluation {
        per_prompt,
        reward_mean,
        reward_stderr: std / (rewards.len() as f64).sqrt(),
        rewards,
    })
}

/// Difference of two evaluations made with the same prompts, sample count,
/// and seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub mean_a: f64,
    pub mean_b: f64,
    pub difference: f64,
    /// `√(se_a² + se_b²)`.
    pub pooled_stderr: f64,
    /// Standard error of the per-sample differences.
    pub paired_stderr: f64,
}

impl Comparison {
    /// `difference / pooled_stderr`.
    pub fn z_score(&self) -> f64 {
        self.difference / self.pooled_stderr
    }
}

pub fn compare(a: &RewardEvaluation, b: &RewardEvaluation) -> Result<Comparison> {
    if a.rewards.len() != b.rewards.len() || a.rewards.len() < 2 {
        return Err(Error::InvalidArgument(
            "paired comparison needs evaluations of equal size".into(),
        ));
    }
    let diffs: Vec<f64> = a
        .rewards
        .iter()
        .zip(&b.rewards)
        .map(|(x, y)| x - y)
        .collect();
    let (difference, sd) = mean_std(&diffs);
    Ok(Comparison {
        mean_a: a.reward_mean,
        mean_b: b.reward_mean,
        difference,
        pooled_stderr: a.reward_stderr.hypot(b.reward_stderr),
        paired_stderr: sd / (diffs.len() as f64).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KlEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// `E_{π_θ}[r̂_θ]` from `n` fresh trajectories per prompt, with its standard
/// error: a Monte-Carlo estimate of the prompt-averaged trajectory KL.
pub fn kl_estimate<P, R>(
    policy: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    prompts: &[usize],
    n: usize,
    seed: u64,
) -> Result<KlEstimate>
where
    P: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    if n == 0 || prompts.is_empty() {
        return Err(Error::InvalidArgument(
            "KL estimate needs prompts and n ≥ 1".into(),
        ));
    }
    let ids: Vec<usize> = prompts
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, n))
        .collect();
    let trajs = sample_batch(policy, schedule, &ids, seed, &[KL])?;
    let rhats: Vec<f64> = trajs
        .iter()
        .map(|t| {
            Ok(step_log_ratios(policy, reference, schedule, t)?
                .iter()
                .sum())
        })
        .collect::<Result<_>>()?;
    let (mean, sd) = mean_std(&rhats);
    Ok(KlEstimate {
        mean,
        stderr: sd / (rhats.len() as f64).sqrt(),
    })
}
