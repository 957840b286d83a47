//! Analytic rewards over final samples `x₀`.
//!
//! Rewards are black boxes to the training code: they take plain state
//! vectors and return plain numbers, and nothing here builds graph nodes.
//! Losses see rewards only as constants.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
}

impl GaussianMixture {
    /// Weights are normalized; every component needs a positive std and a
    /// mean of the same dimension.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || stds.len() != k {
            return Err(Error::InvalidArgument(
                "mixture needs matching, non-empty weights/means/stds".into(),
            ));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidArgument(
                "mixture means differ in dimension".into(),
            ));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite())
            || stds.iter().any(|s| !(*s > 0.0) || !s.is_finite())
        {
            return Err(Error::InvalidArgument(
                "mixture weights and stds must be positive and finite".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            means,
            stds,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, m), s)| {
                let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * d * (LN_2PI + 2.0 * s.ln()) - sq / (2.0 * s * s)
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.stds[k] * z
            })
            .collect()
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Reward function `r(x₀, c)`.
#[derive(Clone, Debug, PartialEq)]
pub enum RewardSpec {
    /// `−‖x₀ − target(c)‖²`.
    TargetDistance { targets: Vec<Vec<f64>> },
    /// Log-density of the prompt's mixture at `x₀`.
    Density { mixtures: Vec<GaussianMixture> },
    /// `⟨w, x₀⟩`, ignoring the prompt.
    ScalarField { direction: Vec<f64> },
    /// `Σ wᵢ rᵢ(x₀, c)`; weights may be negative.
    WeightedSum(Vec<(f64, RewardSpec)>),
}

impl RewardSpec {
    pub fn weighted(components: Vec<(f64, RewardSpec)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("weighted-sum reward needs components".into()));
        }
        if let Some((w, _)) = components.iter().find(|(w, _)| !w.is_finite()) {
            return Err(Error::Config(format!("non-finite reward weight {w}")));
        }
        Ok(RewardSpec::WeightedSum(components))
    }

    /// Whether the reward reads the prompt.
    pub fn is_prompt_aware(&self) -> bool {
        match self {
            RewardSpec::TargetDistance { .. } | RewardSpec::Density { .. } => true,
            RewardSpec::ScalarField { .. } => false,
            RewardSpec::WeightedSum(parts) => parts.iter().any(|(_, s)| s.is_prompt_aware()),
        }
    }

    pub fn evaluate(&self, x0: &[f64], prompt: usize) -> Result<f64> {
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("reward input is not finite".into()));
        }
        let dim_check = |d: usize| {
            if d != x0.len() {
                Err(Error::ShapeMismatch {
                    op: "reward",
                    detail: format!("sample has dim {}, reward expects {d}", x0.len()),
                })
            } else {
                Ok(())
            }
        };
        match self {
            RewardSpec::TargetDistance { targets } => {
                let t = targets.get(prompt).ok_or(Error::UnknownPrompt {
                    prompt,
                    count: targets.len(),
                })?;
                dim_check(t.len())?;
                Ok(-x0
                    .iter()
                    .zip(t)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>())
            }
            RewardSpec::Density { mixtures } => {
                let m = mixtures.get(prompt).ok_or(Error::UnknownPrompt {
                    prompt,
                    count: mixtures.len(),
                })?;
                dim_check(m.dim())?;
                Ok(m.log_density(x0))
            }
            RewardSpec::ScalarField { direction } => {
                dim_check(direction.len())?;
                Ok(x0.iter().zip(direction).map(|(a, b)| a * b).sum())
            }
            RewardSpec::WeightedSum(parts) => {
                let mut total = 0.0;
                for (w, spec) in parts {
                    if !w.is_finite() {
                        return Err(Error::Config(format!("non-finite reward weight {w}")));
                    }
                    total += w * spec.evaluate(x0, prompt)?;
                }
                Ok(total)
            }
        }
    }
}

pub fn evaluate_reward(spec: &RewardSpec, x0: &[f64], prompt: usize) -> Result<f64> {
    spec.evaluate(x0, prompt)
}

/// `r(x₀ᵃ, c) − r(x₀ᵇ, c)`.
pub fn reward_difference(
    spec: &RewardSpec,
    x0a: &[f64],
    x0b: &[f64],
    prompt: usize,
) -> Result<f64> {
    Ok(spec.evaluate(x0a, prompt)? - spec.evaluate(x0b, prompt)?)
}

/// Reward function wrapper that counts every query.
#[derive(Debug)]
pub struct RewardOracle {
    spec: RewardSpec,
    queries: AtomicU64,
}

impl RewardOracle {
    pub fn new(spec: RewardSpec) -> Self {
        Self {
            spec,
            queries: AtomicU64::new(0),
        }
    }

    pub fn spec(&self) -> &RewardSpec {
        &self.spec
    }

    pub fn query(&self, x0: &[f64], prompt: usize) -> Result<f64> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.spec.evaluate(x0, prompt)
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}
