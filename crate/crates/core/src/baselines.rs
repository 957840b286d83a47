//! Comparison algorithms: a PPO-clipped policy-gradient baseline with
//! configurable reward normalization, and offline reward-difference
//! training on a fixed dataset sampled once from the reference.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;

use crate::autodiff::{Bindings, Graph, GraphBuilder, NodeId, Tensor};
use crate::diffusion::{sample_batch, step_log_ratios, DenoisingPolicy, NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::rdp::{
    batch_loss, step_ratio_node, ClipConfig, LossEval, PairBatch, PromptGroup, Rollout,
};
use crate::rewards::RewardOracle;
use crate::rng::Rng;

/// Which statistics standardize rewards into advantages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormalizerMode {
    #[default]
    PerPrompt,
    Global,
    /// Advantages are the raw rewards.
    None,
}

impl std::str::FromStr for NormalizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-prompt" => Ok(Self::PerPrompt),
            "global" => Ok(Self::Global),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!(
                "unknown normalizer `{s}` (expected per-prompt, global, none)"
            ))),
        }
    }
}

impl std::fmt::Display for NormalizerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerPrompt => "per-prompt",
            Self::Global => "global",
            Self::None => "none",
        })
    }
}

/// Welford running mean and variance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    fn advantage(&self, reward: f64) -> f64 {
        if self.count < 2 {
            reward - self.mean
        } else {
            (reward - self.mean) / self.std().max(1e-6)
        }
    }
}

/// Running reward statistics turning rewards into advantages.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardNormalizer {
    mode: NormalizerMode,
    per_prompt: BTreeMap<usize, RunningStats>,
    global: RunningStats,
}

impl RewardNormalizer {
    pub fn new(mode: NormalizerMode) -> Self {
        Self {
            mode,
            ..Default::default()
        }
    }

    pub fn mode(&self) -> NormalizerMode {
        self.mode
    }

    pub fn prompt_stats(&self, prompt: usize) -> Option<&RunningStats> {
        self.per_prompt.get(&prompt)
    }

    pub fn global_stats(&self) -> &RunningStats {
        &self.global
    }

    fn observe(&mut self, prompt: usize, reward: f64) {
        self.per_prompt.entry(prompt).or_default().push(reward);
        self.global.push(reward);
    }

    fn advantage(&self, prompt: usize, reward: f64) -> f64 {
        match self.mode {
            NormalizerMode::PerPrompt => self.per_prompt[&prompt].advantage(reward),
            NormalizerMode::Global => self.global.advantage(reward),
            NormalizerMode::None => reward,
        }
    }

    /// Records `reward`, then returns `(reward − mean)/max(std, 1e-6)` under
    /// the configured statistics.
    pub fn normalize(&mut self, prompt: usize, reward: f64) -> f64 {
        self.observe(prompt, reward);
        self.advantage(prompt, reward)
    }

    /// Records a whole batch first, then normalizes every entry against the
    /// updated statistics.
    pub fn normalize_batch(&mut self, batch: &[(usize, f64)]) -> Vec<f64> {
        for &(c, r) in batch {
            self.observe(c, r);
        }
        batch.iter().map(|&(c, r)| self.advantage(c, r)).collect()
    }
}

fn snapshot_of(r: &Rollout) -> Result<&[f64]> {
    r.snapshot.as_deref().ok_or(Error::MissingSnapshot)
}

fn check_clip_range(clip_range: f64) -> Result<()> {
    if clip_range > 0.0 && clip_range < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "ddpo clip range must lie in (0, 1), got {clip_range}"
        )))
    }
}

/// PPO surrogate `mean_{k,t} −min(ρ_t A_k, clip(ρ_t, 1−c, 1+c) A_k)` with
/// `ρ_t = π_θ/π_{θ_old}` at step `t`. Each rollout's snapshot holds the
/// sampling policy's log ratios against `reference`, so
/// `log ρ_t = r̂_{θ,t} − r̂_{θ_old,t}`.
pub fn ddpo_loss<P, R>(
    policy: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    rollouts: &[Rollout],
    advantages: &[f64],
    clip_range: f64,
) -> Result<f64>
where
    P: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    check_clip_range(clip_range)?;
    if rollouts.is_empty() || rollouts.len() != advantages.len() {
        return Err(Error::InvalidArgument(
            "need one advantage per rollout and at least one rollout".into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &a) in rollouts.iter().zip(advantages) {
        let ratios = step_log_ratios(policy, reference, schedule, &r.trajectory)?;
        let snap = snapshot_of(r)?;
        if snap.len() != ratios.len() {
            return Err(Error::MissingSnapshot);
        }
        for (now, old) in ratios.iter().zip(snap) {
            let rho = (now - old).exp();
            if !rho.is_finite() {
                return Err(Error::NonFinite {
                    op: "probability ratio",
                    node: 0,
                });
            }
            let clipped = rho.clamp(1.0 - clip_range, 1.0 + clip_range);
            total += -(rho * a).min(clipped * a);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Differentiable [`ddpo_loss`] over a fixed set of rollouts.
#[derive(Clone, Debug)]
pub struct DdpoGraph {
    graph: Graph,
    step_ratios: NodeId,
    snapshots: Vec<f64>,
    clip_range: f64,
}

impl DdpoGraph {
    pub fn build<P, R>(
        policy: &P,
        reference: &R,
        schedule: &NoiseSchedule,
        rollouts: &[Rollout],
        advantages: &[f64],
        clip_range: f64,
    ) -> Result<Self>
    where
        P: DenoisingPolicy + ?Sized,
        R: DenoisingPolicy + ?Sized,
    {
        check_clip_range(clip_range)?;
        if rollouts.is_empty() || rollouts.len() != advantages.len() {
            return Err(Error::InvalidArgument(
                "need one advantage per rollout and at least one rollout".into(),
            ));
        }
        let trajs: Vec<&Trajectory> = rollouts.iter().map(|r| &r.trajectory).collect();
        let mut snapshots = Vec::new();
        let mut adv_rows = Vec::new();
        for (r, &a) in rollouts.iter().zip(advantages) {
            let s = snapshot_of(r)?;
            if s.len() != r.trajectory.steps() {
                return Err(Error::MissingSnapshot);
            }
            snapshots.extend_from_slice(s);
            adv_rows.extend(std::iter::repeat_n(a, s.len()));
        }
        let n = snapshots.len();
        let mut g = GraphBuilder::new();
        let step_ratios = step_ratio_node(&mut g, policy, reference, schedule, &trajs)?;
        let old = g.constant(Tensor::new(vec![n], snapshots.clone())?);
        let log_rho = g.sub(step_ratios, old);
        let rho = g.exp(log_rho);
        let adv = g.constant(Tensor::new(vec![n], adv_rows)?);
        let unclipped = g.mul(rho, adv);
        let window = g.clip_scalar(rho, 1.0 - clip_range, 1.0 + clip_range);
        let clipped = g.mul(window, adv);
        let surrogate = g.min(unclipped, clipped);
        let mean = g.mean(surrogate);
        let loss = g.scale(mean, -1.0);
        Ok(Self {
            graph: g.finish(loss)?,
            step_ratios,
            snapshots,
            clip_range,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self, params: &Bindings) -> Result<f64> {
        Ok(self.graph.forward(params)?.item().expect("scalar loss"))
    }

    /// Loss and gradients. `max_clipped_deviation` is `max |clip(ρ) − 1|`
    /// and `clipped_fraction` the share of steps whose ratio left the window.
    pub fn evaluate(&self, params: &Bindings) -> Result<LossEval> {
        let eval = self.graph.evaluate(params)?;
        let loss = eval.output()[0];
        let gradients = self.graph.backward_from(&eval);
        let ratios = eval.value(self.step_ratios);
        let (mut max_abs, mut max_dev, mut max_clipped, mut outside) =
            (0.0f64, 0.0f64, 0.0f64, 0usize);
        for (r, s) in ratios.iter().zip(&self.snapshots) {
            max_abs = max_abs.max(r.abs());
            max_dev = max_dev.max((r - s).abs());
            let rho = (r - s).exp();
            let c = self.clip_range;
            max_clipped = max_clipped.max((rho.clamp(1.0 - c, 1.0 + c) - 1.0).abs());
            if (rho - 1.0).abs() > c {
                outside += 1;
            }
        }
        Ok(LossEval {
            loss,
            gradients,
            max_abs_step_ratio: max_abs,
            max_step_deviation: max_dev,
            max_clipped_deviation: max_clipped,
            clipped_fraction: outside as f64 / ratios.len() as f64,
        })
    }
}

/// One stored rollout of the offline dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineEntry {
    pub trajectory: Trajectory,
    pub reward: f64,
}

/// Rollouts sampled once from the reference, with rewards evaluated once.
/// Entries cannot be modified after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    entries: Vec<OfflineEntry>,
    by_prompt: BTreeMap<usize, Vec<usize>>,
}

const DATASET_HEADER: [&str; 4] = ["prompt", "reward", "steps", "dim"];

impl OfflineDataset {
    pub fn new(entries: Vec<OfflineEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("offline dataset is empty".into()));
        }
        let (steps, dim) = (entries[0].trajectory.steps(), entries[0].trajectory.dim());
        let mut by_prompt: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.trajectory.steps() != steps || e.trajectory.dim() != dim {
                return Err(Error::ShapeMismatch {
                    op: "offline dataset",
                    detail: "entries differ in steps or dimension".into(),
                });
            }
            if !e.reward.is_finite() {
                return Err(Error::InvalidArgument(
                    "offline reward is not finite".into(),
                ));
            }
            by_prompt.entry(e.trajectory.prompt).or_default().push(i);
        }
        Ok(Self { entries, by_prompt })
    }

    pub fn entries(&self) -> &[OfflineEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry indices for `prompt`.
    pub fn prompt_entries(&self, prompt: usize) -> &[usize] {
        self.by_prompt.get(&prompt).map_or(&[], Vec::as_slice)
    }

    /// Prompts with at least two entries.
    pub fn pairable_prompts(&self) -> Vec<usize> {
        self.by_prompt
            .iter()
            .filter(|(_, v)| v.len() >= 2)
            .map(|(c, _)| *c)
            .collect()
    }

    /// Number of same-prompt pairs.
    pub fn pair_count(&self) -> usize {
        self.by_prompt
            .values()
            .map(|v| v.len() * (v.len().saturating_sub(1)) / 2)
            .sum()
    }

    /// Writes the dataset as CSV, one record per rollout:
    /// `prompt,reward,steps,dim,v_0,…` where the values are the states
    /// `x_T, …, x_0` concatenated, `(steps + 1)·dim` numbers in all.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
        w.write_record(DATASET_HEADER.iter().copied().chain(["states"]))?;
        for e in &self.entries {
            let t = &e.trajectory;
            let mut rec = vec![
                t.prompt.to_string(),
                e.reward.to_string(),
                t.steps().to_string(),
                t.dim().to_string(),
            ];
            rec.extend(t.states().iter().flatten().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
        let header = r.headers()?.clone();
        if header.iter().take(4).ne(DATASET_HEADER.iter().copied()) {
            return Err(bad("unexpected header".into()));
        }
        let mut entries = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| {
                rec.get(i)
                    .ok_or_else(|| bad(format!("record {line}: missing field {i}")))
            };
            let int = |i: usize| -> Result<usize> {
                field(i)?
                    .parse()
                    .map_err(|e| bad(format!("record {line}: {e}")))
            };
            let (prompt, steps, dim) = (int(0)?, int(2)?, int(3)?);
            let reward: f64 = field(1)?
                .parse()
                .map_err(|e| bad(format!("record {line}: {e}")))?;
            let values: Vec<f64> = rec
                .iter()
                .skip(4)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("record {line}: {e}")))?;
            if dim == 0 || values.len() != (steps + 1) * dim {
                return Err(bad(format!(
                    "record {line}: expected {} state values, found {}",
                    (steps + 1) * dim,
                    values.len()
                )));
            }
            let states = values.chunks(dim).map(<[f64]>::to_vec).collect();
            entries.push(OfflineEntry {
                trajectory: Trajectory::new(prompt, states)?,
                reward,
            });
        }
        Self::new(entries)
    }
}

/// Samples `per_prompt` reference rollouts for each prompt and queries the
/// reward once for each.
pub fn build_offline_dataset<R: DenoisingPolicy + ?Sized>(
    reference: &R,
    schedule: &NoiseSchedule,
    prompts: &[usize],
    per_prompt: usize,
    oracle: &RewardOracle,
    seed: u64,
) -> Result<OfflineDataset> {
    if per_prompt < 2 {
        return Err(Error::InvalidArgument(
            "offline dataset needs at least two rollouts per prompt".into(),
        ));
    }
    let ids: Vec<usize> = prompts
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, per_prompt))
        .collect();
    let trajs = sample_batch(reference, schedule, &ids, seed, &[])?;
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

/// Draws `prompts` prompt groups uniformly (prompts with replacement,
/// entries without replacement within a group) of `per_prompt` rollouts.
/// Snapshot statistics are the `snapshot` policy's log ratios against the
/// reference, computed on the drawn trajectories.
#[allow(clippy::too_many_arguments)]
pub fn offline_batch<S, R>(
    dataset: &OfflineDataset,
    snapshot: &S,
    reference: &R,
    schedule: &NoiseSchedule,
    prompts: usize,
    per_prompt: usize,
    rng: &mut Rng,
) -> Result<PairBatch>
where
    S: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    let pairable = dataset.pairable_prompts();
    if pairable.is_empty() {
        return Err(Error::NoPairs);
    }
    let mut groups = Vec::with_capacity(prompts);
    for _ in 0..prompts {
        let c = pairable[rng.random_range(0..pairable.len())];
        let pool = dataset.prompt_entries(c);
        let take = per_prompt.clamp(2, pool.len());
        let rollouts = sample_indices(rng, pool.len(), take)
            .into_iter()
            .map(|k| {
                let e = &dataset.entries[pool[k]];
                Ok(Rollout {
                    snapshot: Some(step_log_ratios(
                        snapshot,
                        reference,
                        schedule,
                        &e.trajectory,
                    )?),
                    trajectory: e.trajectory.clone(),
                    reward: e.reward,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(PromptGroup {
            prompt: c,
            rollouts,
        });
    }
    PairBatch::new(groups)
}

/// Loss of one offline draw: [`batch_loss`] on a batch from
/// [`offline_batch`].
#[allow(clippy::too_many_arguments)]
pub fn offline_rdp_step<P, S, R>(
    policy: &P,
    snapshot: &S,
    reference: &R,
    schedule: &NoiseSchedule,
    dataset: &OfflineDataset,
    prompts: usize,
    per_prompt: usize,
    beta: f64,
    clip: Option<&ClipConfig>,
    rng: &mut Rng,
) -> Result<f64>
where
    P: DenoisingPolicy + ?Sized,
    S: DenoisingPolicy + ?Sized,
    R: DenoisingPolicy + ?Sized,
{
    let batch = offline_batch(
        dataset, snapshot, reference, schedule, prompts, per_prompt, rng,
    )?;
    batch_loss(policy, reference, schedule, &batch, beta, clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::diffusion::{sample_trajectory, PolicyArch, PolicyNet, ShiftPolicy};
    use crate::rdp::LossGraph;
    use crate::rewards::RewardSpec;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn first_observation_has_zero_advantage() {
        for mode in [NormalizerMode::PerPrompt, NormalizerMode::Global] {
            let mut n = RewardNormalizer::new(mode);
            assert_eq!(n.normalize(3, 4.2), 0.0);
        }
        let mut raw = RewardNormalizer::new(NormalizerMode::None);
        assert_eq!(raw.normalize(0, 4.2), 4.2);
    }

    #[test]
    fn constant_stream_gives_zero_advantages() {
        let mut n = RewardNormalizer::new(NormalizerMode::PerPrompt);
        let adv: Vec<f64> = (0..50).map(|_| n.normalize(0, 1.5)).collect();
        assert!(adv.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn welford_matches_two_pass_statistics() {
        let xs = [1.0, 4.0, -2.0, 7.5, 0.25];
        let mut s = RunningStats::default();
        xs.iter().for_each(|x| s.push(*x));
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((s.mean() - mean).abs() < 1e-12 && (s.variance() - var).abs() < 1e-12);
    }

    #[test]
    fn global_mode_leaks_prompt_identity() {
        // prompt 0 rewards in [0, 1], prompt 1 rewards in [10, 11]
        let mut global = RewardNormalizer::new(NormalizerMode::Global);
        let mut per = RewardNormalizer::new(NormalizerMode::PerPrompt);
        let batch: Vec<(usize, f64)> = (0..40)
            .map(|i| (i % 2, (i % 2) as f64 * 10.0 + (i as f64 * 0.37).fract()))
            .collect();
        let g = global.normalize_batch(&batch);
        let p = per.normalize_batch(&batch);
        // merged mean ≈ 5.5 sits between the ranges: every advantage's sign
        // is its prompt's
        for ((c, _), a) in batch.iter().zip(&g) {
            assert_eq!(*a > 0.0, *c == 1);
        }
        let mean_p = |c: usize| {
            batch
                .iter()
                .zip(&p)
                .filter(|((k, _), _)| *k == c)
                .map(|(_, a)| a)
                .sum::<f64>()
                / 20.0
        };
        assert!(mean_p(0).abs() < 1e-12 && mean_p(1).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn per_prompt_advantages_ignore_prompt_offsets(
            rewards in prop::collection::vec(-3.0f64..3.0, 12..40),
            offsets in prop::collection::vec(-50.0f64..50.0, 3),
        ) {
            let batch: Vec<(usize, f64)> = rewards.iter().enumerate().map(|(i, r)| (i % 3, *r)).collect();
            let shifted: Vec<(usize, f64)> = batch.iter().map(|(c, r)| (*c, r + offsets[*c])).collect();
            let a = RewardNormalizer::new(NormalizerMode::PerPrompt).normalize_batch(&batch);
            let b = RewardNormalizer::new(NormalizerMode::PerPrompt).normalize_batch(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn global_advantages_move_with_prompt_offsets() {
        let batch: Vec<(usize, f64)> = (0..20)
            .map(|i| (i % 2, (i as f64 * 0.61).fract()))
            .collect();
        let shifted: Vec<(usize, f64)> = batch
            .iter()
            .map(|(c, r)| (*c, r + 5.0 * *c as f64))
            .collect();
        let a = RewardNormalizer::new(NormalizerMode::Global).normalize_batch(&batch);
        let b = RewardNormalizer::new(NormalizerMode::Global).normalize_batch(&shifted);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 0.5));
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

    fn rollouts(
        snapshot: &PolicyNet,
        reference: &PolicyNet,
        sched: &NoiseSchedule,
        n: usize,
    ) -> Vec<Rollout> {
        let mut rng = stream(9, &[]);
        (0..n)
            .map(|k| {
                let t = sample_trajectory(snapshot, sched, k % 2, &mut rng).unwrap();
                Rollout {
                    snapshot: Some(step_log_ratios(snapshot, reference, sched, &t).unwrap()),
                    trajectory: t,
                    reward: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn ddpo_at_snapshot() {
        let sched = NoiseSchedule::linear(3).unwrap();
        let (reference, snapshot) = (net(1, 0.2), net(2, 0.2));
        let rs = rollouts(&snapshot, &reference, &sched, 4);
        assert_eq!(
            ddpo_loss(&snapshot, &reference, &sched, &rs, &[0.0; 4], 0.2).unwrap(),
            0.0
        );
        let adv = [0.5, -1.0, 2.0, 0.1];
        let l = ddpo_loss(&snapshot, &reference, &sched, &rs, &adv, 0.2).unwrap();
        assert!((l + adv.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        assert!(ddpo_loss(&snapshot, &reference, &sched, &rs, &adv, 0.0).is_err());
    }

    #[test]
    fn ddpo_graph_matches_and_checks() {
        let sched = NoiseSchedule::linear(3).unwrap();
        let (reference, snapshot, policy) = (net(1, 0.2), net(2, 0.2), net(3, 0.2));
        let rs = rollouts(&snapshot, &reference, &sched, 6);
        let adv = [0.5, -1.0, 2.0, 0.1, -0.3, 1.2];
        for c in [0.2, 0.9] {
            let scalar = ddpo_loss(&policy, &reference, &sched, &rs, &adv, c).unwrap();
            let g = DdpoGraph::build(&policy, &reference, &sched, &rs, &adv, c).unwrap();
            let v = g.value(policy.params()).unwrap();
            assert!((scalar - v).abs() < 1e-10 * scalar.abs().max(1.0));
            let fd = finite_difference_check(g.graph(), policy.params(), 1e-6).unwrap();
            assert!(fd.max_rel_error < 1e-4, "{fd:?}");
        }
    }

    #[test]
    fn ddpo_clamp_blocks_gradient_above_window() {
        // T=1, d=1, σ=1, zero-mean snapshot; policy shift θ so that on the
        // rollout x0 = 1 the ratio is exp(θ − θ²/2) > 1 + c.
        let sched = NoiseSchedule::from_parts(vec![0.9], vec![1.0]).unwrap();
        let base = ShiftPolicy::new(0.0, 1, 1, 1);
        let policy = ShiftPolicy::with_shifts(0.0, vec![vec![0.5]], 1);
        let t = Trajectory::new(0, vec![vec![0.0], vec![1.0]]).unwrap();
        let rs = vec![Rollout {
            trajectory: t,
            reward: 0.0,
            snapshot: Some(vec![0.0]),
        }];
        let g = DdpoGraph::build(&policy, &base, &sched, &rs, &[1.0], 0.1).unwrap();
        let ev = g.evaluate(policy.params()).unwrap();
        assert!((ev.loss + 1.1).abs() < 1e-12);
        assert_eq!(ev.gradients["shift"].data(), &[0.0]);
        assert_eq!(ev.clipped_fraction, 1.0);
    }

    fn oracle() -> RewardOracle {
        RewardOracle::new(RewardSpec::TargetDistance {
            targets: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        })
    }

    #[test]
    fn offline_dataset_counts_and_round_trip() {
        let sched = NoiseSchedule::linear(3).unwrap();
        let reference = net(1, 0.2);
        let o = oracle();
        let one = build_offline_dataset(&reference, &sched, &[0], 2, &o, 1).unwrap();
        assert_eq!(one.pair_count(), 1);
        assert_eq!(o.queries(), 2);
        assert!(build_offline_dataset(&reference, &sched, &[0], 1, &o, 1).is_err());

        let ds = build_offline_dataset(&reference, &sched, &[0, 1], 5, &o, 2).unwrap();
        let dir = std::env::temp_dir().join(format!("prdp-offline-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.csv");
        ds.save(&path).unwrap();
        assert_eq!(OfflineDataset::load(&path).unwrap(), ds);
        std::fs::write(&path, "prompt,reward,steps,dim,states\n0,1.0,3,2,0.1\n").unwrap();
        assert!(OfflineDataset::load(&path).is_err());
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn offline_step_matches_batch_loss_and_never_queries() {
        let sched = NoiseSchedule::linear(3).unwrap();
        let reference = net(1, 0.2);
        let policy = net(4, 0.2);
        let o = oracle();
        let ds = build_offline_dataset(&reference, &sched, &[0, 1], 6, &o, 3).unwrap();
        let before = ds.clone();
        let queries = o.queries();
        let clip = ClipConfig::stepwise(1e-3).unwrap();
        let step = offline_rdp_step(
            &policy,
            &policy,
            &reference,
            &sched,
            &ds,
            2,
            3,
            0.5,
            Some(&clip),
            &mut stream(5, &[]),
        )
        .unwrap();
        let batch =
            offline_batch(&ds, &policy, &reference, &sched, 2, 3, &mut stream(5, &[])).unwrap();
        let direct = batch_loss(&policy, &reference, &sched, &batch, 0.5, Some(&clip)).unwrap();
        assert!((step - direct).abs() < 1e-12);
        assert_eq!(o.queries(), queries);
        assert_eq!(ds, before);
    }

    #[test]
    fn offline_reference_with_equal_rewards_has_zero_loss() {
        let sched = NoiseSchedule::linear(3).unwrap();
        let reference = net(1, 0.2);
        let o = RewardOracle::new(RewardSpec::ScalarField {
            direction: vec![0.0, 0.0],
        });
        let ds = build_offline_dataset(&reference, &sched, &[0, 1], 4, &o, 3).unwrap();
        let l = offline_rdp_step(
            &reference,
            &reference,
            &reference,
            &sched,
            &ds,
            3,
            4,
            0.5,
            None,
            &mut stream(0, &[]),
        )
        .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn repeated_descent_on_one_pair_is_monotone() {
        // one-parameter policy, one fixed pair: the loss is a convex
        // quadratic in the shift, so small gradient steps never increase it
        let sched = NoiseSchedule::from_parts(vec![0.9], vec![1.0]).unwrap();
        let reference = ShiftPolicy::new(0.0, 1, 1, 1);
        let mut policy = reference.clone();
        let entries = vec![
            OfflineEntry {
                trajectory: Trajectory::new(0, vec![vec![0.0], vec![1.0]]).unwrap(),
                reward: 1.0,
            },
            OfflineEntry {
                trajectory: Trajectory::new(0, vec![vec![0.0], vec![-0.5]]).unwrap(),
                reward: 0.0,
            },
        ];
        let ds = OfflineDataset::new(entries).unwrap();
        let mut rng = stream(0, &[]);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let batch = offline_batch(&ds, &reference, &reference, &sched, 1, 2, &mut rng).unwrap();
            let lg = LossGraph::build(&policy, &reference, &sched, &batch, 0.5, None).unwrap();
            let ev = lg.evaluate(policy.params()).unwrap();
            assert!(ev.loss <= last + 1e-15);
            last = ev.loss;
            let g = ev.gradients["shift"].data()[0];
            let s = policy.shift(1)[0];
            policy.set_shift(1, &[s - 0.05 * g]);
        }
        assert!(last < 1e-6);
    }
}
