use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

use super::{DenoisingPolicy, NoiseSchedule, StepRows};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One denoising rollout `x_T, …, x_0` for a prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub prompt: usize,
    states: Vec<Vec<f64>>,
}

impl Trajectory {
    /// `states[0]` is `x_T`, the last entry is `x_0`.
    pub fn new(prompt: usize, states: Vec<Vec<f64>>) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::InvalidArgument(
                "a trajectory needs at least x_1 and x_0".into(),
            ));
        }
        let d = states[0].len();
        if d == 0 || states.iter().any(|s| s.len() != d) {
            return Err(Error::ShapeMismatch {
                op: "trajectory",
                detail: "states differ in dimension".into(),
            });
        }
        if let Some(i) = states.iter().position(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                step: states.len() - 1 - i,
            });
        }
        Ok(Self { prompt, states })
    }

    /// Number of denoising steps T.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// `x_t` for `t ∈ 0..=T`.
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[self.steps() - t]
    }

    pub fn x0(&self) -> &[f64] {
        self.state(0)
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }
}

/// Standard-normal draws for one rollout: `x_T` first, then the step
/// noise for `t = T, …, 1`, each block `d` long.
pub fn draw_noise(rng: &mut Rng, steps: usize, dim: usize) -> Vec<f64> {
    (0..(steps + 1) * dim)
        .map(|_| StandardNormal.sample(rng))
        .collect()
}

fn check_policy<P: DenoisingPolicy + ?Sized>(
    policy: &P,
    schedule: &NoiseSchedule,
    dim: usize,
    prompt: usize,
) -> Result<()> {
    if policy.state_dim() != dim {
        return Err(Error::ShapeMismatch {
            op: "policy",
            detail: format!("policy dim {} vs state dim {dim}", policy.state_dim()),
        });
    }
    if prompt >= policy.prompt_count() {
        return Err(Error::UnknownPrompt {
            prompt,
            count: policy.prompt_count(),
        });
    }
    if schedule.sigmas().iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config("sigma_t must be positive".into()));
    }
    Ok(())
}

/// Ancestral sampling driven by pre-drawn noise (see [`draw_noise`]). All
/// rollouts advance one step at a time so the policy sees one batch per
/// step.
pub fn sample_with_noise<P: DenoisingPolicy + ?Sized>(
    policy: &P,
    schedule: &NoiseSchedule,
    prompts: &[usize],
    noise: &[Vec<f64>],
) -> Result<Vec<Trajectory>> {
    let d = policy.state_dim();
    let steps = schedule.steps();
    if noise.len() != prompts.len() || noise.iter().any(|n| n.len() != (steps + 1) * d) {
        return Err(Error::ShapeMismatch {
            op: "sample",
            detail: "noise blocks do not match prompts, steps, or dimension".into(),
        });
    }
    for &c in prompts {
        check_policy(policy, schedule, d, c)?;
    }
    let mut states: Vec<Vec<Vec<f64>>> = noise
        .iter()
        .map(|n| {
            let mut v = Vec::with_capacity(steps + 1);
            v.push(n[..d].to_vec());
            v
        })
        .collect();
    for (j, t) in (1..=steps).rev().enumerate() {
        let mut rows = StepRows::new(d);
        for (k, traj) in states.iter().enumerate() {
            rows.push(traj.last().expect("non-empty"), prompts[k], t);
        }
        let means = policy.means(schedule, &rows);
        let sigma = schedule.sigma(t);
        for (k, traj) in states.iter_mut().enumerate() {
            let z = &noise[k][(j + 1) * d..(j + 2) * d];
            let next: Vec<f64> = (0..d).map(|i| means[k * d + i] + sigma * z[i]).collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: t - 1 });
            }
            traj.push(next);
        }
    }
    prompts
        .iter()
        .zip(states)
        .map(|(&c, s)| Trajectory::new(c, s))
        .collect()
}

/// `x_T ~ N(0, I)`, then `x_{t−1} = μ(x_t, c, t) + σ_t z` for `t = T, …, 1`.
pub fn sample_trajectory<P: DenoisingPolicy + ?Sized>(
    policy: &P,
    schedule: &NoiseSchedule,
    prompt: usize,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let noise = draw_noise(rng, schedule.steps(), policy.state_dim());
    Ok(sample_with_noise(policy, schedule, &[prompt], &[noise])?.remove(0))
}

/// Noise for rollout `index` of the stream `path` under `seed`.
pub fn indexed_noise(seed: u64, path: &[u64], index: u64, steps: usize, dim: usize) -> Vec<f64> {
    let mut full = path.to_vec();
    full.push(index);
    draw_noise(&mut stream(seed, &full), steps, dim)
}

/// Samples one rollout per prompt in parallel. Rollout `i` always uses the
/// noise from [`indexed_noise`]`(seed, path, i)`, so results do not depend
/// on thread scheduling, and two policies given the same `(seed, path)`
/// see identical noise.
pub fn sample_batch<P: DenoisingPolicy + ?Sized>(
    policy: &P,
    schedule: &NoiseSchedule,
    prompts: &[usize],
    seed: u64,
    path: &[u64],
) -> Result<Vec<Trajectory>> {
    const CHUNK: usize = 64;
    let (steps, d) = (schedule.steps(), policy.state_dim());
    let chunks: Vec<Result<Vec<Trajectory>>> = prompts
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let noise: Vec<Vec<f64>> = (0..chunk.len())
                .map(|k| indexed_noise(seed, path, (ci * CHUNK + k) as u64, steps, d))
                .collect();
            sample_with_noise(policy, schedule, chunk, &noise)
        })
        .collect();
    let mut out = Vec::with_capacity(prompts.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn check_trajectory<P: DenoisingPolicy + ?Sized>(
    policy: &P,
    schedule: &NoiseSchedule,
    traj: &Trajectory,
) -> Result<()> {
    if traj.steps() != schedule.steps() {
        return Err(Error::ShapeMismatch {
            op: "trajectory",
            detail: format!("{} steps vs schedule {}", traj.steps(), schedule.steps()),
        });
    }
    check_policy(policy, schedule, traj.dim(), traj.prompt)
}

/// Rows `(x_t, c, t)` for `t = 1..=T` of each trajectory, trajectory-major.
pub fn step_rows(trajs: &[&Trajectory]) -> StepRows {
    let d = trajs.first().map_or(0, |t| t.dim());
    let mut rows = StepRows::new(d);
    for traj in trajs {
        for t in 1..=traj.steps() {
            rows.push(traj.state(t), traj.prompt, t);
        }
    }
    rows
}

/// `‖x_{t−1} − μ(x_t, c, t)‖²` for each row of [`step_rows`].
pub fn step_sq_errors<P: DenoisingPolicy + ?Sized>(
    policy: &P,
    schedule: &NoiseSchedule,
    trajs: &[&Trajectory],
) -> Result<Vec<f64>> {
    for traj in trajs {
        check_trajectory(policy, schedule, traj)?;
    }
    let rows = step_rows(trajs);
    let means = policy.means(schedule, &rows);
    let d = rows.dim();
    let mut out = Vec::with_capacity(rows.len());
    let mut r = 0;
    for traj in trajs {
        for t in 1..=traj.steps() {
            let target = traj.state(t - 1);
            let mu = &means[r * d..(r + 1) * d];
            out.push(target.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum());
            r += 1;
        }
    }
    if out.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "policy mean",
            node: 0,
        });
    }
    Ok(out)
}

/// `log p(x_T) + Σ_t log N(x_{t−1}; μ(x_t, c, t), σ_t² I)` with every
/// normalization constant included.
pub fn trajectory_log_prob<P: DenoisingPolicy + ?Sized>(
    policy: &P,
    schedule: &NoiseSchedule,
    traj: &Trajectory,
) -> Result<f64> {
    let sq = step_sq_errors(policy, schedule, &[traj])?;
    let d = traj.dim() as f64;
    let prior_sq: f64 = traj.state(traj.steps()).iter().map(|v| v * v).sum();
    let mut lp = -0.5 * d * LN_2PI - 0.5 * prior_sq;
    for t in 1..=traj.steps() {
        let s = schedule.sigma(t);
        lp += -0.5 * d * (LN_2PI + 2.0 * s.ln()) - sq[t - 1] / (2.0 * s * s);
    }
    Ok(lp)
}

/// Per-step `log π(x_{t−1}|x_t,c) − log π_ref(x_{t−1}|x_t,c)`, indexed
/// `t − 1`. The shared σ_t makes the normalizers cancel.
pub fn step_log_ratios<P, R>(
    policy: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    traj: &Trajectory,
) -> Result<Vec<f64>>
where
    P: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    let own = step_sq_errors(policy, schedule, &[traj])?;
    let base = step_sq_errors(reference, schedule, &[traj])?;
    Ok((1..=traj.steps())
        .map(|t| {
            let s = schedule.sigma(t);
            (base[t - 1] - own[t - 1]) / (2.0 * s * s)
        })
        .collect())
}

/// Log ratio at a single step `t ∈ 1..=T`.
pub fn stepwise_log_ratio<P, R>(
    policy: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    traj: &Trajectory,
    t: usize,
) -> Result<f64>
where
    P: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    if t == 0 || t > traj.steps() {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside 1..={}",
            traj.steps()
        )));
    }
    Ok(step_log_ratios(policy, reference, schedule, traj)?[t - 1])
}

/// Graph computing `Σ_k log π(x̄_k | c_k)` as a function of the policy
/// parameters. The value equals the sum of [`trajectory_log_prob`].
pub fn log_prob_graph<P: DenoisingPolicy + ?Sized>(
    policy: &P,
    schedule: &NoiseSchedule,
    trajs: &[&Trajectory],
) -> Result<crate::autodiff::Graph> {
    use crate::autodiff::{GraphBuilder, Tensor};
    for traj in trajs {
        check_trajectory(policy, schedule, traj)?;
    }
    let rows = step_rows(trajs);
    let d = rows.dim();
    let mut targets = Vec::with_capacity(rows.len() * d);
    let mut weights = Vec::with_capacity(rows.len() * d);
    let mut constant = 0.0;
    for traj in trajs {
        let prior_sq: f64 = traj.state(traj.steps()).iter().map(|v| v * v).sum();
        constant += -0.5 * d as f64 * LN_2PI - 0.5 * prior_sq;
        for t in 1..=traj.steps() {
            let s = schedule.sigma(t);
            constant += -0.5 * d as f64 * (LN_2PI + 2.0 * s.ln());
            targets.extend_from_slice(traj.state(t - 1));
            weights.extend(std::iter::repeat_n(-1.0 / (2.0 * s * s), d));
        }
    }
    let mut g = GraphBuilder::new();
    let mu = policy.mean_node(&mut g, schedule, &rows);
    let x = g.constant(Tensor::new(vec![rows.len(), d], targets)?);
    let w = g.constant(Tensor::new(vec![rows.len(), d], weights)?);
    let diff = g.sub(x, mu);
    let sq = g.square(diff);
    let weighted = g.mul(w, sq);
    let total = g.sum(weighted);
    let out = g.offset(total, constant);
    g.finish(out)
}
