//! Fixtures for the benchmarks: a toy-sized network and an epoch's batch.

use prdp::diffusion::{
    sample_batch, step_log_ratios, DenoisingPolicy, NoiseSchedule, PolicyArch, PolicyNet,
};
use prdp::rdp::{PairBatch, PromptGroup, Rollout};
use prdp::rng::stream;
use rand::Rng as _;

pub struct Fixture {
    pub schedule: NoiseSchedule,
    pub reference: PolicyNet,
    pub policy: PolicyNet,
    pub batch: PairBatch,
}

fn net(seed: u64, prompts: usize, hidden: &[usize], jitter: f64) -> PolicyNet {
    let mut rng = stream(seed, &[]);
    let mut n = PolicyNet::new(
        PolicyArch {
            state_dim: 2,
            prompt_count: prompts,
            hidden: hidden.to_vec(),
        },
        &mut rng,
    )
    .expect("valid arch");
    for t in n.params_mut().values_mut() {
        t.map_inplace(|_, v| v + rng.random_range(-jitter..jitter));
    }
    n
}

/// `n` prompt groups of `b` rollouts at T steps, with the toy network width.
pub fn fixture(steps: usize, n: usize, b: usize) -> Fixture {
    let schedule = NoiseSchedule::linear(steps).expect("steps ≥ 1");
    let reference = net(0, 4, &[64, 64], 0.1);
    let mut policy = reference.clone();
    let mut rng = stream(1, &[]);
    for t in policy.params_mut().values_mut() {
        t.map_inplace(|_, v| v + rng.random_range(-0.01..0.01));
    }
    let ids: Vec<usize> = (0..n).flat_map(|k| std::iter::repeat_n(k % 4, b)).collect();
    let trajs = sample_batch(&policy, &schedule, &ids, 2, &[]).expect("finite samples");
    let mut rollouts = trajs.into_iter().map(|t| {
        let snapshot = Some(step_log_ratios(&policy, &reference, &schedule, &t).expect("ratios"));
        Rollout {
            reward: rng.random_range(-1.0..1.0),
            trajectory: t,
            snapshot,
        }
    });
    let groups = (0..n)
        .map(|k| PromptGroup {
            prompt: k % 4,
            rollouts: rollouts.by_ref().take(b).collect(),
        })
        .collect();
    Fixture {
        schedule,
        reference,
        policy,
        batch: PairBatch::new(groups).expect("pairs"),
    }
}
