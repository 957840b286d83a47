use crate::error::{Error, Result};
use crate::rewards::log_sum_exp;

use super::model::{decode_trajectory, LogTables, TabularDiffusion, TabularPolicy};

/// Exact probabilities of every trajectory for one prompt, indexed as in
/// [`decode_trajectory`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDistribution {
    states: usize,
    steps: usize,
    log_probs: Vec<f64>,
}

impl TrajectoryDistribution {
    pub(crate) fn from_log_probs(states: usize, steps: usize, log_probs: Vec<f64>) -> Result<Self> {
        let total = log_sum_exp(&log_probs);
        if (total.exp() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "trajectory probabilities sum to {}",
                total.exp()
            )));
        }
        Ok(Self {
            states,
            steps,
            log_probs,
        })
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn probability(&self, traj: &[usize]) -> f64 {
        self.log_probs[super::model::encode_trajectory(traj, self.states)].exp()
    }

    pub fn trajectory(&self, idx: usize) -> Vec<usize> {
        decode_trajectory(idx, self.states, self.steps)
    }

    /// Distribution of `x₀`.
    pub fn marginal_x0(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.states];
        for (idx, lp) in self.log_probs.iter().enumerate() {
            // x₀ is the least significant digit
            m[idx % self.states] += lp.exp();
        }
        m
    }

    /// `½ Σ |p − q|`.
    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self
            .log_probs
            .iter()
            .zip(&other.log_probs)
            .map(|(a, b)| (a.exp() - b.exp()).abs())
            .sum::<f64>()
    }
}

fn enumerate_tables(
    model: &TabularDiffusion,
    tables: &LogTables,
    prompt: usize,
) -> Result<TrajectoryDistribution> {
    model.check_prompt(prompt)?;
    let (s, t) = (model.states(), model.steps());
    let log_probs = (0..model.trajectory_count())
        .map(|idx| tables.log_prob(prompt, &decode_trajectory(idx, s, t)))
        .collect();
    TrajectoryDistribution::from_log_probs(s, t, log_probs)
}

/// Exact `π_θ(x̄ | c)` for every trajectory.
pub fn enumerate_distribution(
    model: &TabularDiffusion,
    policy: &TabularPolicy,
    prompt: usize,
) -> Result<TrajectoryDistribution> {
    policy.matches(model)?;
    enumerate_tables(model, &policy.log_tables(), prompt)
}

pub fn reference_distribution(
    model: &TabularDiffusion,
    prompt: usize,
) -> Result<TrajectoryDistribution> {
    enumerate_tables(model, &LogTables::of_reference(model), prompt)
}

/// `r(x₀, c)/β` for every trajectory.
pub(crate) fn scaled_rewards(model: &TabularDiffusion, prompt: usize) -> Vec<f64> {
    let s = model.states();
    (0..model.trajectory_count())
        .map(|idx| model.reward(idx % s, prompt) / model.beta())
        .collect()
}

/// `log Z(c) = log Σ_x̄ π_ref(x̄|c) exp(r(x₀,c)/β)`, by log-sum-exp.
pub fn log_partition_function(model: &TabularDiffusion, prompt: usize) -> Result<f64> {
    let reference = reference_distribution(model, prompt)?;
    let terms: Vec<f64> = reference
        .log_probs()
        .iter()
        .zip(scaled_rewards(model, prompt))
        .map(|(lp, r)| lp + r)
        .collect();
    Ok(log_sum_exp(&terms))
}

pub fn partition_function(model: &TabularDiffusion, prompt: usize) -> Result<f64> {
    Ok(log_partition_function(model, prompt)?.exp())
}

/// `π*(x̄|c) = π_ref(x̄|c) exp(r(x₀,c)/β) / Z(c)`.
pub fn optimal_distribution(
    model: &TabularDiffusion,
    prompt: usize,
) -> Result<TrajectoryDistribution> {
    let log_z = log_partition_function(model, prompt)?;
    let reference = reference_distribution(model, prompt)?;
    let log_probs = reference
        .log_probs()
        .iter()
        .zip(scaled_rewards(model, prompt))
        .map(|(lp, r)| lp + r - log_z)
        .collect();
    TrajectoryDistribution::from_log_probs(model.states(), model.steps(), log_probs)
}

/// `KL[P ‖ Q]` of two enumerated distributions.
pub fn kl_divergence(p: &TrajectoryDistribution, q: &TrajectoryDistribution) -> f64 {
    p.log_probs
        .iter()
        .zip(&q.log_probs)
        .map(|(a, b)| a.exp() * (a - b))
        .sum()
}

fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// `KL[π_P(x̄|c) ‖ π_Q(x̄|c)]` over whole trajectories.
pub fn kl_trajectory(
    model: &TabularDiffusion,
    p: &TabularPolicy,
    q: &TabularPolicy,
    prompt: usize,
) -> Result<f64> {
    Ok(kl_divergence(
        &enumerate_distribution(model, p, prompt)?,
        &enumerate_distribution(model, q, prompt)?,
    ))
}

/// `KL[π_P(x₀|c) ‖ π_Q(x₀|c)]` over `x₀` marginals.
pub fn kl_marginal(
    model: &TabularDiffusion,
    p: &TabularPolicy,
    q: &TabularPolicy,
    prompt: usize,
) -> Result<f64> {
    Ok(kl_categorical(
        &enumerate_distribution(model, p, prompt)?.marginal_x0(),
        &enumerate_distribution(model, q, prompt)?.marginal_x0(),
    ))
}

/// Trajectory-level objective `E_π[r(x₀,c)] − β KL[π(x̄|c) ‖ π_ref(x̄|c)]`.
pub fn rlhf_objective(
    model: &TabularDiffusion,
    policy: &TabularPolicy,
    prompt: usize,
) -> Result<f64> {
    let p = enumerate_distribution(model, policy, prompt)?;
    let reference = reference_distribution(model, prompt)?;
    Ok(objective_of(model, &p, &reference, prompt))
}

pub(crate) fn objective_of(
    model: &TabularDiffusion,
    p: &TrajectoryDistribution,
    reference: &TrajectoryDistribution,
    prompt: usize,
) -> f64 {
    let s = model.states();
    let reward: f64 = p
        .log_probs()
        .iter()
        .enumerate()
        .map(|(idx, lp)| lp.exp() * model.reward(idx % s, prompt))
        .sum();
    reward - model.beta() * kl_divergence(p, reference)
}

/// Markov factorization of `π*` by the soft backward recursion
/// `V₀ = r/β`, `V_t(x) = log Σ_y π_ref(y|x,t) e^{V_{t−1}(y)}`,
/// `π*(y|x,t) = π_ref(y|x,t) e^{V_{t−1}(y) − V_t(x)}`, and prior
/// `∝ p(x_T) e^{V_T(x_T)}`.
pub fn optimal_policy(model: &TabularDiffusion) -> TabularPolicy {
    let (s, steps, prompts) = (model.states(), model.steps(), model.prompts());
    let mut prior_logits = vec![0.0; prompts * s];
    let mut step_logits = vec![0.0; steps * prompts * s * s];
    for c in 0..prompts {
        let mut v: Vec<f64> = (0..s).map(|x| model.reward(x, c) / model.beta()).collect();
        for t in 1..=steps {
            let mut next = vec![0.0; s];
            for (x, slot) in next.iter_mut().enumerate() {
                let row = model.reference_row(t, c, x);
                let terms: Vec<f64> = row.iter().zip(&v).map(|(p, vy)| p.ln() + vy).collect();
                *slot = log_sum_exp(&terms);
                let r = super::model::row_index(s, prompts, t, c, x);
                for y in 0..s {
                    step_logits[r * s + y] = terms[y] - *slot;
                }
            }
            v = next;
        }
        let terms: Vec<f64> = model
            .prior()
            .iter()
            .zip(&v)
            .map(|(p, vx)| p.ln() + vx)
            .collect();
        let lse = log_sum_exp(&terms);
        for x in 0..s {
            prior_logits[c * s + x] = terms[x] - lse;
        }
    }
    TabularPolicy::from_logits(model, prior_logits, step_logits).expect("finite logits")
}
