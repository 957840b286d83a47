use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Bindings, Tensor};
use crate::error::{Error, Result};
use crate::rewards::log_sum_exp;
use crate::rng::Rng;

/// Maximum number of enumerated trajectories `S^(T+1)`.
pub const ENUMERATION_BUDGET: usize = 10_000;
/// Smallest probability any reference row or prior entry may hold.
pub const MIN_PROBABILITY: f64 = 1e-6;

/// A discrete denoising chain over states `0..S` with `T` steps and `C`
/// prompts. Reference rows are stored at
/// `((t − 1)·C + c)·S·S + x_t·S + x_{t−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDiffusion {
    states: usize,
    steps: usize,
    prompts: usize,
    reference: Vec<f64>,
    prior: Vec<f64>,
    rewards: Vec<f64>,
    beta: f64,
}

/// Parameters of [`TabularDiffusion::random`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomInstance {
    pub states: usize,
    pub steps: usize,
    pub prompts: usize,
    pub beta: f64,
    /// Rewards are drawn uniformly from `[0, reward_scale]`.
    pub reward_scale: f64,
    /// Standard deviation of the logits behind every reference row.
    pub logit_scale: f64,
}

impl Default for RandomInstance {
    /// The default instance: S = 3, T = 2, C = 2.
    fn default() -> Self {
        Self {
            states: 3,
            steps: 2,
            prompts: 2,
            beta: 0.5,
            reward_scale: 2.0,
            logit_scale: 1.0,
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

fn random_row(s: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let logits: Vec<f64> = (0..s)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let p = softmax(&logits);
        if p.iter().all(|v| *v >= MIN_PROBABILITY) {
            return p;
        }
    }
}

impl TabularDiffusion {
    pub fn new(
        states: usize,
        steps: usize,
        prompts: usize,
        reference: Vec<f64>,
        prior: Vec<f64>,
        rewards: Vec<f64>,
        beta: f64,
    ) -> Result<Self> {
        if states < 2 || steps == 0 || prompts == 0 {
            return Err(Error::Config(format!(
                "tabular chain needs S ≥ 2, T ≥ 1, C ≥ 1 (got {states}, {steps}, {prompts})"
            )));
        }
        let count = trajectory_count(states, steps);
        if count > ENUMERATION_BUDGET {
            return Err(Error::BudgetExceeded {
                count,
                limit: ENUMERATION_BUDGET,
            });
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        let s = states;
        if reference.len() != steps * prompts * s * s
            || prior.len() != s
            || rewards.len() != s * prompts
        {
            return Err(Error::ShapeMismatch {
                op: "tabular chain",
                detail: "reference, prior, or reward table has the wrong size".into(),
            });
        }
        let check_row = |row: &[f64], what: &str| -> Result<()> {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || row.iter().any(|p| !(*p >= MIN_PROBABILITY)) {
                return Err(Error::Config(format!(
                    "{what} must be a full-support distribution (sum {sum}, entries ≥ {MIN_PROBABILITY})"
                )));
            }
            Ok(())
        };
        check_row(&prior, "prior")?;
        for row in reference.chunks(s) {
            check_row(row, "reference row")?;
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Config("rewards must be finite".into()));
        }
        Ok(Self {
            states,
            steps,
            prompts,
            reference,
            prior,
            rewards,
            beta,
        })
    }

    /// Reference rows, prior, and rewards drawn at random.
    pub fn random(spec: &RandomInstance, rng: &mut Rng) -> Result<Self> {
        let s = spec.states;
        let rows = spec.steps * spec.prompts * s;
        let reference: Vec<f64> = (0..rows)
            .flat_map(|_| random_row(s, spec.logit_scale, rng))
            .collect();
        let prior = random_row(s, spec.logit_scale, rng);
        let rewards = (0..s * spec.prompts)
            .map(|_| rng.random_range(0.0..=spec.reward_scale))
            .collect();
        Self::new(
            s,
            spec.steps,
            spec.prompts,
            reference,
            prior,
            rewards,
            spec.beta,
        )
    }

    /// The reproducible default instance (S = 3, T = 2, C = 2).
    pub fn default_instance() -> Self {
        Self::random(
            &RandomInstance::default(),
            &mut crate::rng::stream(2024, &[]),
        )
        .expect("default instance is valid")
    }

    /// S = 2, T = 1, C = 1, uniform prior and reference, `r(0) = 0`,
    /// `r(1) = ln 2`, β = 1. Every `x₀` value is reached by two of the four
    /// equally likely trajectories, so `Z = (2·1 + 2·2)/4 = 1.5`.
    pub fn two_state_example() -> Self {
        Self::new(
            2,
            1,
            1,
            vec![0.5; 4],
            vec![0.5; 2],
            vec![0.0, std::f64::consts::LN_2],
            1.0,
        )
        .expect("valid instance")
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn reward(&self, x0: usize, prompt: usize) -> f64 {
        self.rewards[x0 * self.prompts + prompt]
    }

    /// `π_ref(· | x_t, c)` at step `t`.
    pub fn reference_row(&self, t: usize, prompt: usize, xt: usize) -> &[f64] {
        let s = self.states;
        let start = row_index(s, self.prompts, t, prompt, xt) * s;
        &self.reference[start..start + s]
    }

    /// Same chain with rewards replaced.
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        Self::new(
            self.states,
            self.steps,
            self.prompts,
            self.reference.clone(),
            self.prior.clone(),
            rewards,
            self.beta,
        )
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let mut m = self.clone();
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        m.beta = beta;
        Ok(m)
    }

    pub fn trajectory_count(&self) -> usize {
        trajectory_count(self.states, self.steps)
    }

    pub(crate) fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt >= self.prompts {
            return Err(Error::UnknownPrompt {
                prompt,
                count: self.prompts,
            });
        }
        Ok(())
    }
}

pub(crate) fn trajectory_count(states: usize, steps: usize) -> usize {
    (0..=steps).fold(1usize, |acc, _| acc.saturating_mul(states))
}

/// Row number of `(t, c, x_t)` in step tables.
pub(crate) fn row_index(
    states: usize,
    prompts: usize,
    t: usize,
    prompt: usize,
    xt: usize,
) -> usize {
    ((t - 1) * prompts + prompt) * states + xt
}

/// Decodes trajectory index `idx` into states `x_T, …, x_0`; `x_T` is the
/// most significant digit.
pub fn decode_trajectory(idx: usize, states: usize, steps: usize) -> Vec<usize> {
    let mut out = vec![0; steps + 1];
    let mut rest = idx;
    for k in (0..=steps).rev() {
        out[k] = rest % states;
        rest /= states;
    }
    out
}

pub fn encode_trajectory(traj: &[usize], states: usize) -> usize {
    traj.iter().fold(0, |acc, &x| acc * states + x)
}

pub(crate) const PRIOR_PARAM: &str = "prior";
pub(crate) const STEP_PARAM: &str = "steps";

/// Per-step categorical policy with softmax rows and a learnable,
/// prompt-dependent prior over `x_T`. Parameters are named tensors:
/// `prior` `[C, S]` and `steps` `[T·C·S, S]` (rows as in
/// [`TabularDiffusion`]).
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    states: usize,
    steps: usize,
    prompts: usize,
    params: Bindings,
}

impl TabularPolicy {
    pub fn from_logits(
        model: &TabularDiffusion,
        prior_logits: Vec<f64>,
        step_logits: Vec<f64>,
    ) -> Result<Self> {
        let (s, t, c) = (model.states, model.steps, model.prompts);
        let prior = Tensor::new(vec![c, s], prior_logits)?;
        let steps = Tensor::new(vec![t * c * s, s], step_logits)?;
        let mut params = Bindings::new();
        params.insert(PRIOR_PARAM.into(), prior);
        params.insert(STEP_PARAM.into(), steps);
        Ok(Self {
            states: s,
            steps: t,
            prompts: c,
            params,
        })
    }

    /// `π_θ = π_ref`: logits are the reference log probabilities.
    pub fn reference(model: &TabularDiffusion) -> Self {
        let prior = (0..model.prompts)
            .flat_map(|_| model.prior.iter().map(|p| p.ln()))
            .collect();
        let steps = model.reference.iter().map(|p| p.ln()).collect();
        Self::from_logits(model, prior, steps).expect("reference probabilities are valid")
    }

    /// Logits drawn as `N(0, scale²)`.
    pub fn random(model: &TabularDiffusion, scale: f64, rng: &mut Rng) -> Self {
        let (s, t, c) = (model.states, model.steps, model.prompts);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                })
                .collect()
        };
        let prior = draw(c * s);
        let steps = draw(t * c * s * s);
        Self::from_logits(model, prior, steps).expect("finite logits")
    }

    pub fn params(&self) -> &Bindings {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Bindings {
        &mut self.params
    }

    pub fn prior_logits(&self) -> &[f64] {
        self.params[PRIOR_PARAM].data()
    }

    pub fn step_logits(&self) -> &[f64] {
        self.params[STEP_PARAM].data()
    }

    pub fn prior(&self, prompt: usize) -> Vec<f64> {
        let s = self.states;
        softmax(&self.prior_logits()[prompt * s..(prompt + 1) * s])
    }

    pub fn row(&self, t: usize, prompt: usize, xt: usize) -> Vec<f64> {
        let s = self.states;
        let r = row_index(s, self.prompts, t, prompt, xt);
        softmax(&self.step_logits()[r * s..(r + 1) * s])
    }

    pub(crate) fn shape(&self) -> (usize, usize, usize) {
        (self.states, self.steps, self.prompts)
    }

    pub(crate) fn matches(&self, model: &TabularDiffusion) -> Result<()> {
        if self.shape() != (model.states, model.steps, model.prompts) {
            return Err(Error::ShapeMismatch {
                op: "tabular policy",
                detail: format!(
                    "policy {:?} vs model {:?}",
                    self.shape(),
                    (model.states, model.steps, model.prompts)
                ),
            });
        }
        Ok(())
    }

    /// Log-softmax of every prior and step row.
    pub(crate) fn log_tables(&self) -> LogTables {
        let s = self.states;
        let norm = |logits: &[f64]| -> Vec<f64> {
            logits
                .chunks(s)
                .flat_map(|row| {
                    let lse = log_sum_exp(row);
                    row.iter().map(move |l| l - lse)
                })
                .collect()
        };
        LogTables {
            states: s,
            steps: self.steps,
            prompts: self.prompts,
            prior: norm(self.prior_logits()),
            rows: norm(self.step_logits()),
        }
    }

    /// Ancestral sample `x_T, …, x_0` for `prompt`.
    pub fn sample(&self, prompt: usize, rng: &mut Rng) -> Vec<usize> {
        let draw = |p: &[f64], rng: &mut Rng| -> usize {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, v) in p.iter().enumerate() {
                acc += v;
                if u < acc {
                    return i;
                }
            }
            p.len() - 1
        };
        let mut traj = Vec::with_capacity(self.steps + 1);
        let mut x = draw(&self.prior(prompt), rng);
        traj.push(x);
        for t in (1..=self.steps).rev() {
            x = draw(&self.row(t, prompt, x), rng);
            traj.push(x);
        }
        traj
    }
}

/// Log probabilities of a tabular policy or the reference.
#[derive(Clone, Debug)]
pub(crate) struct LogTables {
    pub states: usize,
    pub steps: usize,
    pub prompts: usize,
    /// `[C, S]`
    pub prior: Vec<f64>,
    /// `[T·C·S, S]`
    pub rows: Vec<f64>,
}

impl LogTables {
    pub fn of_reference(model: &TabularDiffusion) -> Self {
        Self {
            states: model.states,
            steps: model.steps,
            prompts: model.prompts,
            prior: (0..model.prompts)
                .flat_map(|_| model.prior.iter().map(|p| p.ln()))
                .collect(),
            rows: model.reference.iter().map(|p| p.ln()).collect(),
        }
    }

    pub fn prior(&self, prompt: usize, x: usize) -> f64 {
        self.prior[prompt * self.states + x]
    }

    pub fn step(&self, t: usize, prompt: usize, xt: usize, prev: usize) -> f64 {
        self.rows[row_index(self.states, self.prompts, t, prompt, xt) * self.states + prev]
    }

    /// Log probability of each factor of `traj` (`x_T` first): the prior
    /// term, then steps `t = T, …, 1`.
    pub fn factors<'a>(
        &'a self,
        prompt: usize,
        traj: &'a [usize],
    ) -> impl Iterator<Item = f64> + 'a {
        let t_max = self.steps;
        std::iter::once(self.prior(prompt, traj[0]))
            .chain((0..t_max).map(move |k| self.step(t_max - k, prompt, traj[k], traj[k + 1])))
    }

    pub fn log_prob(&self, prompt: usize, traj: &[usize]) -> f64 {
        self.factors(prompt, traj).sum()
    }
}
