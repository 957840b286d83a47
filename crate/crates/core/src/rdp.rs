//! Reward-difference prediction: implicit rewards `r̂ = log π_θ/π_ref`, the
//! pairwise squared-error loss, proximal clipping around a snapshot, and
//! the batch objective over all same-prompt pairs.

use crate::autodiff::{Bindings, Gradients, Graph, GraphBuilder, NodeId, Tensor};
use crate::diffusion::{
    step_log_ratios, step_rows, step_sq_errors, DenoisingPolicy, NoiseSchedule, Trajectory,
};
use crate::error::{Error, Result};

/// Where the proximal window is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClipMode {
    /// Clamp each per-step log ratio to `[old_t − ε, old_t + ε]`.
    #[default]
    Stepwise,
    /// Clamp the summed log ratio to `[old − ε′, old + ε′]`.
    Trajectory,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipConfig {
    pub epsilon_step: f64,
    /// Trajectory-level window; `None` means `T·ε`.
    pub epsilon_traj: Option<f64>,
    pub mode: ClipMode,
}

impl ClipConfig {
    pub fn stepwise(epsilon: f64) -> Result<Self> {
        let c = Self {
            epsilon_step: epsilon,
            epsilon_traj: None,
            mode: ClipMode::Stepwise,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn trajectory(epsilon_step: f64, epsilon_traj: Option<f64>) -> Result<Self> {
        let c = Self {
            epsilon_step,
            epsilon_traj,
            mode: ClipMode::Trajectory,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_step > 0.0 && self.epsilon_step.is_finite()) {
            return Err(Error::Config(format!(
                "clip epsilon must be positive, got {}",
                self.epsilon_step
            )));
        }
        if let Some(e) = self.epsilon_traj {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config(format!(
                    "trajectory clip epsilon must be positive, got {e}"
                )));
            }
        }
        Ok(())
    }

    pub fn trajectory_epsilon(&self, steps: usize) -> f64 {
        self.epsilon_traj
            .unwrap_or(steps as f64 * self.epsilon_step)
    }

    /// Sum of `ratios` after clamping around `snapshot`.
    pub fn clipped_sum(&self, ratios: &[f64], snapshot: &[f64]) -> Result<f64> {
        if ratios.len() != snapshot.len() {
            return Err(Error::MissingSnapshot);
        }
        Ok(match self.mode {
            ClipMode::Stepwise => ratios
                .iter()
                .zip(snapshot)
                .map(|(r, s)| r.clamp(s - self.epsilon_step, s + self.epsilon_step))
                .sum(),
            ClipMode::Trajectory => {
                let e = self.trajectory_epsilon(ratios.len());
                let old: f64 = snapshot.iter().sum();
                ratios.iter().sum::<f64>().clamp(old - e, old + e)
            }
        })
    }
}

/// `(Δr̂ − Δr/β)²`.
pub fn pair_loss(delta_rhat: f64, delta_reward: f64, beta: f64) -> f64 {
    let e = delta_rhat - delta_reward / beta;
    e * e
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("beta must be positive, got {beta}")))
    }
}

fn check_same_prompt(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.prompt != b.prompt {
        return Err(Error::PromptMismatch {
            a: a.prompt,
            b: b.prompt,
        });
    }
    Ok(())
}

/// Implicit reward `r̂_θ(x̄, c) = Σ_t log π_θ(x_{t−1}|x_t,c) − log π_ref(x_{t−1}|x_t,c)`.
pub fn rhat<P, R>(
    policy: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    traj: &Trajectory,
) -> Result<f64>
where
    P: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    Ok(step_log_ratios(policy, reference, schedule, traj)?
        .iter()
        .sum())
}

/// Unclipped pair loss for two same-prompt trajectories with rewards
/// `(r_a, r_b)`.
pub fn rdp_loss_pair<P, R>(
    policy: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    a: &Trajectory,
    b: &Trajectory,
    rewards: (f64, f64),
    beta: f64,
) -> Result<f64>
where
    P: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    check_same_prompt(a, b)?;
    check_beta(beta)?;
    let d = rhat(policy, reference, schedule, a)? - rhat(policy, reference, schedule, b)?;
    Ok(pair_loss(d, rewards.0 - rewards.1, beta))
}

/// `r̂_θ` with each step (or the whole sum, in trajectory mode) clamped
/// around the snapshot's log ratios.
pub fn clipped_rhat<P, R>(
    policy: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    traj: &Trajectory,
    snapshot: Option<&[f64]>,
    clip: &ClipConfig,
) -> Result<f64>
where
    P: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    let snapshot = snapshot.ok_or(Error::MissingSnapshot)?;
    let ratios = step_log_ratios(policy, reference, schedule, traj)?;
    clip.clipped_sum(&ratios, snapshot)
}

/// A sampled trajectory with its reward and, when sampled from a snapshot,
/// the snapshot's per-step log ratios against the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub reward: f64,
    pub snapshot: Option<Vec<f64>>,
}

/// `max(l, l_clip)` for one pair.
pub fn prdp_loss_pair<P, R>(
    policy: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    a: &Rollout,
    b: &Rollout,
    beta: f64,
    clip: &ClipConfig,
) -> Result<f64>
where
    P: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    check_same_prompt(&a.trajectory, &b.trajectory)?;
    check_beta(beta)?;
    clip.validate()?;
    let ra = step_log_ratios(policy, reference, schedule, &a.trajectory)?;
    let rb = step_log_ratios(policy, reference, schedule, &b.trajectory)?;
    let sa = a.snapshot.as_deref().ok_or(Error::MissingSnapshot)?;
    let sb = b.snapshot.as_deref().ok_or(Error::MissingSnapshot)?;
    let dr = a.reward - b.reward;
    let plain = pair_loss(ra.iter().sum::<f64>() - rb.iter().sum::<f64>(), dr, beta);
    let clipped = pair_loss(
        clip.clipped_sum(&ra, sa)? - clip.clipped_sum(&rb, sb)?,
        dr,
        beta,
    );
    Ok(plain.max(clipped))
}

/// Rollouts sharing one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGroup {
    pub prompt: usize,
    pub rollouts: Vec<Rollout>,
}

/// Prompt groups of an epoch; the loss averages over every within-group pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    groups: Vec<PromptGroup>,
    steps: usize,
}

impl PairBatch {
    pub fn new(groups: Vec<PromptGroup>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(|g| g.rollouts.len() < 2) {
            return Err(Error::NoPairs);
        }
        let steps = groups[0].rollouts[0].trajectory.steps();
        for g in &groups {
            for r in &g.rollouts {
                if r.trajectory.prompt != g.prompt {
                    return Err(Error::PromptMismatch {
                        a: g.prompt,
                        b: r.trajectory.prompt,
                    });
                }
                if r.trajectory.steps() != steps {
                    return Err(Error::ShapeMismatch {
                        op: "pair batch",
                        detail: "trajectories differ in step count".into(),
                    });
                }
                if let Some(s) = &r.snapshot {
                    if s.len() != steps {
                        return Err(Error::ShapeMismatch {
                            op: "pair batch",
                            detail: format!("snapshot has {} steps, expected {steps}", s.len()),
                        });
                    }
                }
                if !r.reward.is_finite() {
                    return Err(Error::InvalidArgument("reward is not finite".into()));
                }
            }
        }
        Ok(Self { groups, steps })
    }

    pub fn groups(&self) -> &[PromptGroup] {
        &self.groups
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn rollouts(&self) -> impl Iterator<Item = &Rollout> {
        self.groups.iter().flat_map(|g| g.rollouts.iter())
    }

    pub fn rollout_count(&self) -> usize {
        self.groups.iter().map(|g| g.rollouts.len()).sum()
    }

    /// `Σ_n B_n(B_n − 1)/2`.
    pub fn pair_count(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.rollouts.len() * (g.rollouts.len() - 1) / 2)
            .sum()
    }

    /// Pairs `(i, j)`, `i < j`, as indices into [`Self::rollouts`] order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.pair_count());
        let mut base = 0;
        for g in &self.groups {
            let b = g.rollouts.len();
            for i in 0..b {
                for j in i + 1..b {
                    out.push((base + i, base + j));
                }
            }
            base += b;
        }
        out
    }

    fn snapshots(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.rollout_count() * self.steps);
        for r in self.rollouts() {
            out.extend_from_slice(r.snapshot.as_deref().ok_or(Error::MissingSnapshot)?);
        }
        Ok(out)
    }
}

/// Per-step log ratios of every rollout, rollout-major.
fn batch_step_ratios<P, R>(
    policy: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    batch: &PairBatch,
) -> Result<Vec<f64>>
where
    P: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    let trajs: Vec<&Trajectory> = batch.rollouts().map(|r| &r.trajectory).collect();
    let own = step_sq_errors(policy, schedule, &trajs)?;
    let base = step_sq_errors(reference, schedule, &trajs)?;
    let steps = batch.steps();
    Ok(own
        .iter()
        .zip(&base)
        .enumerate()
        .map(|(k, (o, b))| {
            let s = schedule.sigma(k % steps + 1);
            (b - o) / (2.0 * s * s)
        })
        .collect())
}

/// Mean pair loss over all `Σ_n C(B_n, 2)` pairs; with `clip`, each pair
/// contributes `max(l, l_clip)`.
pub fn batch_loss<P, R>(
    policy: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    batch: &PairBatch,
    beta: f64,
    clip: Option<&ClipConfig>,
) -> Result<f64>
where
    P: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    check_beta(beta)?;
    let steps = batch.steps();
    let ratios = batch_step_ratios(policy, reference, schedule, batch)?;
    let rollouts: Vec<&Rollout> = batch.rollouts().collect();
    let rhats: Vec<f64> = ratios.chunks(steps).map(|c| c.iter().sum()).collect();
    let clipped: Option<Vec<f64>> = match clip {
        Some(c) => {
            c.validate()?;
            let snaps = batch.snapshots()?;
            Some(
                ratios
                    .chunks(steps)
                    .zip(snaps.chunks(steps))
                    .map(|(r, s)| c.clipped_sum(r, s))
                    .collect::<Result<_>>()?,
            )
        }
        None => None,
    };
    let pairs = batch.pairs();
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| {
            let dr = rollouts[i].reward - rollouts[j].reward;
            let plain = pair_loss(rhats[i] - rhats[j], dr, beta);
            match &clipped {
                Some(c) => plain.max(pair_loss(c[i] - c[j], dr, beta)),
                None => plain,
            }
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Graph node `[Σ_k T_k]` of per-step log ratios `r̂_{θ,t}` for every
/// trajectory, trajectory-major with `t` ascending. The reference enters as
/// constants; the policy parameters are the graph inputs.
pub(crate) fn step_ratio_node<P, R>(
    g: &mut GraphBuilder,
    policy: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    trajs: &[&Trajectory],
) -> Result<NodeId>
where
    P: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    let ref_sq = step_sq_errors(reference, schedule, trajs)?;
    // validates policy/trajectory agreement before graph construction
    step_sq_errors(policy, schedule, &trajs[..1])?;
    let rows = step_rows(trajs);
    let (n_rows, d) = (rows.len(), rows.dim());
    let mut targets = Vec::with_capacity(n_rows * d);
    let mut inv_two_var = Vec::with_capacity(n_rows);
    for traj in trajs {
        for t in 1..=traj.steps() {
            targets.extend_from_slice(traj.state(t - 1));
            let s = schedule.sigma(t);
            inv_two_var.push(1.0 / (2.0 * s * s));
        }
    }
    let ref_term: Vec<f64> = ref_sq
        .iter()
        .zip(&inv_two_var)
        .map(|(a, w)| a * w)
        .collect();
    let mu = policy.mean_node(g, schedule, &rows);
    let x = g.constant(Tensor::new(vec![n_rows, d], targets)?);
    let diff = g.sub(x, mu);
    let sq = g.square(diff);
    let sq = g.sum_rows(sq);
    let w = g.constant(Tensor::new(vec![n_rows], inv_two_var)?);
    let own_term = g.mul(w, sq);
    let base = g.constant(Tensor::new(vec![n_rows], ref_term)?);
    Ok(g.sub(base, own_term))
}

/// Differentiable form of [`batch_loss`] for a fixed batch. Data, reference
/// statistics, and snapshot windows are baked in as constants; the graph's
/// inputs are the policy parameters only, so one build serves every
/// gradient step of an epoch.
#[derive(Clone, Debug)]
pub struct LossGraph {
    graph: Graph,
    step_ratios: NodeId,
    steps: usize,
    snapshots: Option<Vec<f64>>,
    clip: Option<ClipConfig>,
}

/// Loss, gradients, and the per-update quantities that clipping controls.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub gradients: Gradients,
    /// `max |r̂_{θ,t}|` over all steps of the batch.
    pub max_abs_step_ratio: f64,
    /// `max |r̂_{θ,t} − r̂_{θ_old,t}|`; zero without snapshots.
    pub max_step_deviation: f64,
    /// `max |clip(r̂_θ) − r̂_{θ_old}|` over clipped quantities (steps, or
    /// whole trajectories in trajectory mode); never exceeds the window.
    pub max_clipped_deviation: f64,
    /// Fraction of clipped quantities that sit outside their window.
    pub clipped_fraction: f64,
}

impl LossGraph {
    pub fn build<P, R>(
        policy: &P,
        reference: &R,
        schedule: &NoiseSchedule,
        batch: &PairBatch,
        beta: f64,
        clip: Option<&ClipConfig>,
    ) -> Result<Self>
    where
        P: DenoisingPolicy + ?Sized,
        R: DenoisingPolicy + ?Sized,
    {
        check_beta(beta)?;
        if let Some(c) = clip {
            c.validate()?;
        }
        let steps = batch.steps();
        let rollouts: Vec<&Rollout> = batch.rollouts().collect();
        let trajs: Vec<&Trajectory> = rollouts.iter().map(|r| &r.trajectory).collect();
        let mut g = GraphBuilder::new();
        let step_ratios = step_ratio_node(&mut g, policy, reference, schedule, &trajs)?;
        let n_rows = trajs.len() * steps;
        let rhat = g.sum_groups(step_ratios, steps);

        let pairs = batch.pairs();
        let (left, right): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let target: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| (rollouts[i].reward - rollouts[j].reward) / beta)
            .collect();
        let target = g.constant(Tensor::new(vec![pairs.len()], target)?);

        let pair_losses = |g: &mut GraphBuilder, r: NodeId| {
            let a = g.gather(r, left.clone());
            let b = g.gather(r, right.clone());
            let dr = g.sub(a, b);
            let e = g.sub(dr, target);
            g.square(e)
        };
        let plain = pair_losses(&mut g, rhat);
        let mut snapshots = None;
        let per_pair = match clip {
            None => plain,
            Some(c) => {
                let snaps = batch.snapshots()?;
                let clipped_rhat = match c.mode {
                    ClipMode::Stepwise => {
                        let lo: Vec<f64> = snaps.iter().map(|s| s - c.epsilon_step).collect();
                        let hi: Vec<f64> = snaps.iter().map(|s| s + c.epsilon_step).collect();
                        let lo = g.constant(Tensor::new(vec![n_rows], lo)?);
                        let hi = g.constant(Tensor::new(vec![n_rows], hi)?);
                        let clipped = g.clip(step_ratios, lo, hi);
                        g.sum_groups(clipped, steps)
                    }
                    ClipMode::Trajectory => {
                        let e = c.trajectory_epsilon(steps);
                        let old: Vec<f64> = snaps.chunks(steps).map(|s| s.iter().sum()).collect();
                        let lo: Vec<f64> = old.iter().map(|s| s - e).collect();
                        let hi: Vec<f64> = old.iter().map(|s| s + e).collect();
                        let lo = g.constant(Tensor::new(vec![old.len()], lo)?);
                        let hi = g.constant(Tensor::new(vec![old.len()], hi)?);
                        g.clip(rhat, lo, hi)
                    }
                };
                snapshots = Some(snaps);
                let clipped = pair_losses(&mut g, clipped_rhat);
                g.max(plain, clipped)
            }
        };
        let loss = g.mean(per_pair);
        Ok(Self {
            graph: g.finish(loss)?,
            step_ratios,
            steps,
            snapshots,
            clip: clip.copied(),
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self, params: &Bindings) -> Result<f64> {
        Ok(self.graph.forward(params)?.item().expect("scalar loss"))
    }

    pub fn evaluate(&self, params: &Bindings) -> Result<LossEval> {
        let eval = self.graph.evaluate(params)?;
        let loss = eval.output()[0];
        let gradients = self.graph.backward_from(&eval);
        let ratios = eval.value(self.step_ratios);
        let max_abs_step_ratio = ratios.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        let (mut max_step_deviation, mut max_clipped_deviation, mut clipped_fraction) =
            (0.0f64, 0.0f64, 0.0);
        if let (Some(snaps), Some(clip)) = (&self.snapshots, &self.clip) {
            for (r, s) in ratios.iter().zip(snaps) {
                max_step_deviation = max_step_deviation.max((r - s).abs());
            }
            let (deviations, eps): (Vec<f64>, f64) = match clip.mode {
                ClipMode::Stepwise => (
                    ratios.iter().zip(snaps).map(|(r, s)| r - s).collect(),
                    clip.epsilon_step,
                ),
                ClipMode::Trajectory => (
                    ratios
                        .chunks(self.steps)
                        .zip(snaps.chunks(self.steps))
                        .map(|(r, s)| r.iter().sum::<f64>() - s.iter().sum::<f64>())
                        .collect(),
                    clip.trajectory_epsilon(self.steps),
                ),
            };
            let mut outside = 0usize;
            for dev in &deviations {
                let clamped = dev.clamp(-eps, eps);
                max_clipped_deviation = max_clipped_deviation.max(clamped.abs());
                if dev.abs() > eps {
                    outside += 1;
                }
            }
            clipped_fraction = outside as f64 / deviations.len() as f64;
        }
        Ok(LossEval {
            loss,
            gradients,
            max_abs_step_ratio,
            max_step_deviation,
            max_clipped_deviation,
            clipped_fraction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::diffusion::{sample_trajectory, PolicyArch, PolicyNet, ShiftPolicy};
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn unit_schedule(steps: usize) -> NoiseSchedule {
        let alpha_bar = (1..=steps).map(|t| 1.0 - 0.1 * t as f64).collect();
        NoiseSchedule::from_parts(alpha_bar, vec![1.0; steps]).unwrap()
    }

    fn traj(prompt: usize, states: &[f64]) -> Trajectory {
        Trajectory::new(prompt, states.iter().map(|v| vec![*v]).collect()).unwrap()
    }

    fn rollout(t: Trajectory, reward: f64, snapshot: Vec<f64>) -> Rollout {
        Rollout {
            trajectory: t,
            reward,
            snapshot: Some(snapshot),
        }
    }

    #[test]
    fn pair_loss_examples() {
        let sched = unit_schedule(2);
        let reference = ShiftPolicy::new(0.5, 2, 1, 1);
        let a = traj(0, &[0.3, 0.1, -0.4]);
        let b = traj(0, &[1.0, -0.2, 0.8]);
        let beta = 0.25;
        assert_eq!(
            rdp_loss_pair(&reference, &reference, &sched, &a, &b, (1.0, 1.0), beta).unwrap(),
            0.0
        );
        let l = rdp_loss_pair(
            &reference,
            &reference,
            &sched,
            &a,
            &b,
            (1.0 + beta, 1.0),
            beta,
        )
        .unwrap();
        assert!((l - 1.0).abs() < 1e-15);

        let policy = ShiftPolicy::with_shifts(0.5, vec![vec![0.2], vec![-0.3]], 1);
        let ab = rdp_loss_pair(&policy, &reference, &sched, &a, &b, (0.7, -0.1), beta).unwrap();
        let ba = rdp_loss_pair(&policy, &reference, &sched, &b, &a, (-0.1, 0.7), beta).unwrap();
        assert!((ab - ba).abs() < 1e-12);

        let other = traj(1, &[0.0, 0.0, 0.0]);
        let multi = ShiftPolicy::new(0.5, 2, 1, 2);
        assert!(matches!(
            rdp_loss_pair(&multi, &multi, &sched, &a, &other, (0.0, 0.0), beta),
            Err(Error::PromptMismatch { .. })
        ));
        assert!(rdp_loss_pair(&reference, &reference, &sched, &a, &b, (0.0, 0.0), 0.0).is_err());
    }

    #[test]
    fn clipping_examples() {
        let clip = ClipConfig::stepwise(0.1).unwrap();
        let s = clip.clipped_sum(&[0.5], &[0.2]).unwrap();
        assert!((s - 0.3).abs() < 1e-15);
        assert!(clip.clipped_sum(&[0.5, 0.1], &[0.2]).is_err());
        assert!(ClipConfig::stepwise(0.0).is_err());
        assert!(ClipConfig::trajectory(0.1, Some(-1.0)).is_err());
        let traj_clip = ClipConfig::trajectory(0.1, None).unwrap();
        // window T·ε = 0.2 around the summed snapshot 0.0
        assert!((traj_clip.clipped_sum(&[0.5, 0.1], &[0.0, 0.0]).unwrap() - 0.2).abs() < 1e-15);

        let sched = unit_schedule(1);
        let reference = ShiftPolicy::new(0.0, 1, 1, 1);
        let t = traj(0, &[0.0, 0.0]);
        assert!(matches!(
            clipped_rhat(&reference, &reference, &sched, &t, None, &clip),
            Err(Error::MissingSnapshot)
        ));
    }

    #[test]
    fn max_composition_picks_the_larger_loss() {
        // d=1, T=1, σ=1, reference mean 0: r̂ = (x0² − (x0 − θ)²)/2.
        let sched = unit_schedule(1);
        let reference = ShiftPolicy::new(0.0, 1, 1, 1);
        let policy = ShiftPolicy::with_shifts(0.0, vec![vec![0.4]], 1);
        let a = traj(0, &[0.0, 1.0]);
        let b = traj(0, &[0.0, -1.0]);
        let ra = rhat(&policy, &reference, &sched, &a).unwrap();
        let rb = rhat(&policy, &reference, &sched, &b).unwrap();
        assert!((ra - rb - 0.8).abs() < 1e-12);
        let clip = ClipConfig::stepwise(0.05).unwrap();
        let (ra_, rb_) = (
            rollout(a.clone(), 0.0, vec![0.0]),
            rollout(b.clone(), 0.0, vec![0.0]),
        );
        let plain = rdp_loss_pair(&policy, &reference, &sched, &a, &b, (0.0, 0.0), 1.0).unwrap();
        let full = prdp_loss_pair(&policy, &reference, &sched, &ra_, &rb_, 1.0, &clip).unwrap();
        // clipped Δr̂ = 0.1 → 0.01 < 0.64
        assert!((plain - 0.64).abs() < 1e-12 && (full - plain).abs() < 1e-15);
        // target 1.0: plain (0.8 − 1)² = 0.04, clipped (0.1 − 1)² = 0.81
        let (ra_, rb_) = (rollout(a, 1.0, vec![0.0]), rollout(b, 0.0, vec![0.0]));
        let full = prdp_loss_pair(&policy, &reference, &sched, &ra_, &rb_, 1.0, &clip).unwrap();
        assert!((full - 0.81).abs() < 1e-12);
    }

    #[test]
    fn clipped_branch_blocks_gradient() {
        let sched = unit_schedule(1);
        let reference = ShiftPolicy::new(0.0, 1, 1, 1);
        let policy = ShiftPolicy::with_shifts(0.0, vec![vec![0.4]], 1);
        let a = traj(0, &[0.0, 1.0]);
        let b = traj(0, &[0.0, -1.0]);
        let batch = PairBatch::new(vec![PromptGroup {
            prompt: 0,
            rollouts: vec![rollout(a, 1.0, vec![0.0]), rollout(b, 0.0, vec![0.0])],
        }])
        .unwrap();
        let clip = ClipConfig::stepwise(0.05).unwrap();
        let lg = LossGraph::build(&policy, &reference, &sched, &batch, 1.0, Some(&clip)).unwrap();
        let ev = lg.evaluate(policy.params()).unwrap();
        assert!((ev.loss - 0.81).abs() < 1e-12);
        assert_eq!(ev.gradients["shift"].data(), &[0.0]);
        let fd = finite_difference_check(lg.graph(), policy.params(), 1e-5).unwrap();
        assert!(fd.boundary.is_empty());
        assert!(fd.max_rel_error < 1e-9);
        assert!(ev.max_clipped_deviation <= 0.05 + 1e-15);
        assert_eq!(ev.clipped_fraction, 1.0);
    }

    fn net(seed: u64, jitter: f64) -> PolicyNet {
        let mut rng = stream(seed, &[]);
        let mut n = PolicyNet::new(
            PolicyArch {
                state_dim: 2,
                prompt_count: 2,
                hidden: vec![5],
            },
            &mut rng,
        )
        .unwrap();
        for t in n.params_mut().values_mut() {
            t.map_inplace(|_, v| v + rng.random_range(-jitter..jitter));
        }
        n
    }

    fn random_batch(
        policy: &PolicyNet,
        reference: &PolicyNet,
        sched: &NoiseSchedule,
        n: usize,
        b: usize,
        seed: u64,
    ) -> PairBatch {
        let mut rng = stream(seed, &[]);
        let groups = (0..n)
            .map(|k| {
                let prompt = k % 2;
                let rollouts = (0..b)
                    .map(|_| {
                        let t = sample_trajectory(policy, sched, prompt, &mut rng).unwrap();
                        let snap = step_log_ratios(policy, reference, sched, &t).unwrap();
                        rollout(t, rng.random_range(-1.0..1.0), snap)
                    })
                    .collect();
                PromptGroup { prompt, rollouts }
            })
            .collect();
        PairBatch::new(groups).unwrap()
    }

    #[test]
    fn batch_counts_and_single_pair() {
        let sched = NoiseSchedule::linear(3).unwrap();
        let (reference, policy) = (net(1, 0.2), net(2, 0.2));
        let batch = random_batch(&policy, &reference, &sched, 2, 3, 0);
        assert_eq!(batch.pair_count(), 6);
        assert_eq!(batch.pairs().len(), 6);

        let single = random_batch(&policy, &reference, &sched, 1, 2, 1);
        let clip = ClipConfig::stepwise(1e-3).unwrap();
        let rs: Vec<&Rollout> = single.rollouts().collect();
        let pair = prdp_loss_pair(&policy, &reference, &sched, rs[0], rs[1], 0.5, &clip).unwrap();
        let whole = batch_loss(&policy, &reference, &sched, &single, 0.5, Some(&clip)).unwrap();
        assert!((pair - whole).abs() < 1e-12);

        let too_small = PairBatch::new(vec![PromptGroup {
            prompt: 0,
            rollouts: vec![rs[0].clone()],
        }]);
        assert!(matches!(too_small, Err(Error::NoPairs)));
    }

    #[test]
    fn reference_with_equal_rewards_has_zero_loss() {
        let sched = NoiseSchedule::linear(3).unwrap();
        let reference = net(1, 0.2);
        let mut batch = random_batch(&reference, &reference, &sched, 2, 3, 4);
        for g in &mut batch.groups {
            for r in &mut g.rollouts {
                r.reward = g.prompt as f64;
            }
        }
        let clip = ClipConfig::stepwise(1e-4).unwrap();
        assert_eq!(
            batch_loss(&reference, &reference, &sched, &batch, 0.1, Some(&clip)).unwrap(),
            0.0
        );
    }

    #[test]
    fn graph_matches_scalar_loss_and_gradients_check() {
        let sched = NoiseSchedule::linear(4).unwrap();
        let (reference, snapshot) = (net(1, 0.3), net(2, 0.3));
        let batch = random_batch(&snapshot, &reference, &sched, 2, 3, 7);
        let policy = net(3, 0.3);
        for clip in [
            None,
            Some(ClipConfig::stepwise(0.05).unwrap()),
            Some(ClipConfig::trajectory(0.05, None).unwrap()),
        ] {
            let scalar =
                batch_loss(&policy, &reference, &sched, &batch, 0.7, clip.as_ref()).unwrap();
            let lg =
                LossGraph::build(&policy, &reference, &sched, &batch, 0.7, clip.as_ref()).unwrap();
            let graph = lg.value(policy.params()).unwrap();
            assert!(
                (scalar - graph).abs() < 1e-10 * scalar.max(1.0),
                "{clip:?}: {scalar} vs {graph}"
            );
            let fd = finite_difference_check(lg.graph(), policy.params(), 1e-6).unwrap();
            assert!(fd.max_rel_error < 1e-4, "{clip:?}: {fd:?}");
        }
    }

    #[test]
    fn snapshot_identity_and_ordering_invariance() {
        let sched = NoiseSchedule::linear(3).unwrap();
        let (reference, policy) = (net(1, 0.3), net(2, 0.3));
        let batch = random_batch(&policy, &reference, &sched, 2, 4, 3);
        let clip = ClipConfig::stepwise(1e-4).unwrap();
        let plain = batch_loss(&policy, &reference, &sched, &batch, 0.3, None).unwrap();
        let clipped = batch_loss(&policy, &reference, &sched, &batch, 0.3, Some(&clip)).unwrap();
        assert_eq!(plain, clipped);

        let mut shuffled = batch.clone();
        for g in &mut shuffled.groups {
            g.rollouts.reverse();
            g.rollouts.swap(0, 1);
        }
        let again = batch_loss(&policy, &reference, &sched, &shuffled, 0.3, Some(&clip)).unwrap();
        assert!((again - clipped).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn clipped_sum_stays_within_window(
            ratios in prop::collection::vec(-5.0f64..5.0, 1..6),
            seed in 0u64..1000,
            eps in 1e-4f64..1.0,
        ) {
            let mut rng = stream(seed, &[]);
            let snap: Vec<f64> = ratios.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
            let clip = ClipConfig::stepwise(eps).unwrap();
            let c = clip.clipped_sum(&ratios, &snap).unwrap();
            let old: f64 = snap.iter().sum();
            prop_assert!((c - old).abs() <= ratios.len() as f64 * eps * (1.0 + 1e-12));
        }

        #[test]
        fn prdp_bounds_rdp_from_above(
            ra in prop::collection::vec(-3.0f64..3.0, 3),
            rb in prop::collection::vec(-3.0f64..3.0, 3),
            sa in prop::collection::vec(-3.0f64..3.0, 3),
            sb in prop::collection::vec(-3.0f64..3.0, 3),
            dr in -5.0f64..5.0,
            beta in 0.01f64..10.0,
            eps in 1e-4f64..1.0,
        ) {
            let clip = ClipConfig::stepwise(eps).unwrap();
            let plain = pair_loss(ra.iter().sum::<f64>() - rb.iter().sum::<f64>(), dr, beta);
            let clipped = pair_loss(
                clip.clipped_sum(&ra, &sa).unwrap() - clip.clipped_sum(&rb, &sb).unwrap(),
                dr,
                beta,
            );
            prop_assert!(plain.max(clipped) >= plain);
            // at the snapshot the two coincide
            let at_snapshot = pair_loss(
                clip.clipped_sum(&ra, &ra).unwrap() - clip.clipped_sum(&rb, &rb).unwrap(),
                dr,
                beta,
            );
            prop_assert!((at_snapshot - plain).abs() <= 1e-12 * plain.max(1.0));
        }

        #[test]
        fn loss_depends_on_reward_over_beta_only(
            drh in -3.0f64..3.0,
            dr in -5.0f64..5.0,
            beta in 0.01f64..10.0,
            k in 0.1f64..100.0,
        ) {
            let a = pair_loss(drh, dr, beta);
            let b = pair_loss(drh, k * dr, k * beta);
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }
}
