//! Gaussian denoising policies: schedule, ancestral sampling, exact
//! trajectory likelihoods, per-step log ratios, and reference pretraining.

mod checkpoint;
mod policy;
mod pretrain;
mod sampling;
mod schedule;
mod shift;
mod toy;

pub use checkpoint::Checkpoint;
pub use policy::{DenoisingPolicy, PolicyArch, PolicyNet, StepRows};
pub use pretrain::{pretrain_reference, PretrainConfig};
pub use sampling::{
    draw_noise, indexed_noise, log_prob_graph, sample_batch, sample_trajectory, sample_with_noise,
    step_log_ratios, step_rows, step_sq_errors, stepwise_log_ratio, trajectory_log_prob,
    Trajectory,
};
pub use schedule::NoiseSchedule;
pub use shift::{ShiftPolicy, SHIFT_PARAM};
pub use toy::ToyTask;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn unit_schedule(steps: usize) -> NoiseSchedule {
        let alpha_bar = (1..=steps).map(|t| 1.0 - 0.1 * t as f64).collect();
        NoiseSchedule::from_parts(alpha_bar, vec![1.0; steps]).unwrap()
    }

    #[test]
    fn zero_noise_path_stays_at_origin() {
        let sched = unit_schedule(1);
        let policy = ShiftPolicy::new(0.0, 1, 1, 1);
        let traj = sample_with_noise(&policy, &sched, &[0], &[vec![0.0, 0.0]])
            .unwrap()
            .remove(0);
        assert_eq!(traj.states(), &[vec![0.0], vec![0.0]]);
    }

    #[test]
    fn different_seeds_give_different_trajectories() {
        let sched = NoiseSchedule::linear(5).unwrap();
        let policy = ShiftPolicy::new(0.9, 5, 2, 1);
        let a = sample_trajectory(&policy, &sched, 0, &mut stream(1, &[])).unwrap();
        let b = sample_trajectory(&policy, &sched, 0, &mut stream(2, &[])).unwrap();
        let a2 = sample_trajectory(&policy, &sched, 0, &mut stream(1, &[])).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn zero_mean_policy_has_centred_samples() {
        let sched = NoiseSchedule::linear(4).unwrap();
        let policy = ShiftPolicy::new(0.0, 4, 2, 1);
        let n = 10_000;
        let trajs = sample_batch(&policy, &sched, &vec![0; n], 3, &[]).unwrap();
        for i in 0..2 {
            let xs: Vec<f64> = trajs.iter().map(|t| t.x0()[i]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!(mean.abs() < 3.0 * sd / 100.0, "coordinate {i}: mean {mean}");
        }
    }

    #[test]
    fn batch_sampling_matches_indexed_noise() {
        let sched = NoiseSchedule::linear(3).unwrap();
        let policy = ShiftPolicy::with_shifts(0.8, vec![vec![0.1, 0.0]; 3], 2);
        let prompts: Vec<usize> = (0..150).map(|i| i % 2).collect();
        let batch = sample_batch(&policy, &sched, &prompts, 9, &[4]).unwrap();
        for i in [0, 70, 149] {
            let noise = indexed_noise(9, &[4], i as u64, 3, 2);
            let single = sample_with_noise(&policy, &sched, &[prompts[i]], &[noise]).unwrap();
            assert_eq!(batch[i], single[0]);
        }
    }

    #[test]
    fn standard_normal_log_prob_at_origin() {
        let sched = unit_schedule(1);
        let policy = ShiftPolicy::new(0.0, 1, 1, 1);
        let traj = Trajectory::new(0, vec![vec![0.0], vec![0.0]]).unwrap();
        let lp = trajectory_log_prob(&policy, &sched, &traj).unwrap();
        assert!((lp - -(2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((lp + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn moving_x0_costs_quadratic_penalty() {
        let sched = NoiseSchedule::linear(3).unwrap();
        let policy = ShiftPolicy::with_shifts(0.7, vec![vec![0.2], vec![-0.1], vec![0.4]], 1);
        let base = Trajectory::new(0, vec![vec![0.3], vec![1.0], vec![0.5], vec![0.0]]).unwrap();
        let mu = policy.mean(&sched, base.state(1), 0, 1)[0];
        let at_mean = Trajectory::new(0, vec![vec![0.3], vec![1.0], vec![0.5], vec![mu]]).unwrap();
        let delta = 0.37;
        let moved =
            Trajectory::new(0, vec![vec![0.3], vec![1.0], vec![0.5], vec![mu + delta]]).unwrap();
        let s = sched.sigma(1);
        let diff = trajectory_log_prob(&policy, &sched, &moved).unwrap()
            - trajectory_log_prob(&policy, &sched, &at_mean).unwrap();
        assert!((diff + delta * delta / (2.0 * s * s)).abs() < 1e-10);
    }

    #[test]
    fn log_ratio_examples() {
        let sched = unit_schedule(1);
        let reference = ShiftPolicy::new(0.0, 1, 1, 1);
        let policy = ShiftPolicy::with_shifts(0.0, vec![vec![0.1]], 1);
        let traj = Trajectory::new(0, vec![vec![0.4], vec![0.0]]).unwrap();
        let r = stepwise_log_ratio(&policy, &reference, &sched, &traj, 1).unwrap();
        assert!((r + 0.005).abs() < 1e-15);
        assert_eq!(
            stepwise_log_ratio(&reference, &reference, &sched, &traj, 1).unwrap(),
            0.0
        );
        assert!(stepwise_log_ratio(&policy, &reference, &sched, &traj, 0).is_err());
        assert!(stepwise_log_ratio(&policy, &reference, &sched, &traj, 2).is_err());
    }

    fn random_net(seed: u64, jitter: f64) -> PolicyNet {
        let mut rng = stream(seed, &[]);
        let mut net = PolicyNet::new(
            PolicyArch {
                state_dim: 2,
                prompt_count: 3,
                hidden: vec![6],
            },
            &mut rng,
        )
        .unwrap();
        for t in net.params_mut().values_mut() {
            t.map_inplace(|_, v| v + rng.random_range(-jitter..jitter));
        }
        net
    }

    #[test]
    fn stepwise_ratios_telescope_to_log_prob_difference() {
        let sched = NoiseSchedule::linear(6).unwrap();
        let reference = random_net(1, 0.3);
        let policy = random_net(2, 0.3);
        for seed in 0..5 {
            let traj = sample_trajectory(
                &policy,
                &sched,
                (seed % 3) as usize,
                &mut stream(seed, &[7]),
            )
            .unwrap();
            let sum: f64 = step_log_ratios(&policy, &reference, &sched, &traj)
                .unwrap()
                .iter()
                .sum();
            let full = trajectory_log_prob(&policy, &sched, &traj).unwrap()
                - trajectory_log_prob(&reference, &sched, &traj).unwrap();
            assert!((sum - full).abs() < 1e-10, "{sum} vs {full}");
        }
    }

    #[test]
    fn log_prob_graph_matches_and_differentiates() {
        let sched = NoiseSchedule::linear(4).unwrap();
        let policy = random_net(3, 0.4);
        let trajs: Vec<Trajectory> = (0..3)
            .map(|k| sample_trajectory(&policy, &sched, k, &mut stream(k as u64, &[1])).unwrap())
            .collect();
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let graph = log_prob_graph(&policy, &sched, &refs).unwrap();
        let direct: f64 = trajs
            .iter()
            .map(|t| trajectory_log_prob(&policy, &sched, t).unwrap())
            .sum();
        let via_graph = graph.forward(policy.params()).unwrap().item().unwrap();
        assert!((direct - via_graph).abs() < 1e-9 * direct.abs().max(1.0));
        let report = finite_difference_check(&graph, policy.params(), 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn importance_weights_integrate_to_one() {
        let target_sched = NoiseSchedule::from_parts(vec![0.8, 0.5], vec![0.6, 0.8]).unwrap();
        let proposal_sched = NoiseSchedule::from_parts(vec![0.8, 0.5], vec![0.9, 1.2]).unwrap();
        let target = ShiftPolicy::with_shifts(0.5, vec![vec![0.3], vec![-0.2]], 1);
        let proposal = ShiftPolicy::new(0.5, 2, 1, 1);
        let n = 100_000;
        let trajs = sample_batch(&proposal, &proposal_sched, &vec![0; n], 11, &[]).unwrap();
        let total: f64 = trajs
            .iter()
            .map(|t| {
                (trajectory_log_prob(&target, &target_sched, t).unwrap()
                    - trajectory_log_prob(&proposal, &proposal_sched, t).unwrap())
                .exp()
            })
            .sum();
        let estimate = total / n as f64;
        assert!((estimate - 1.0).abs() < 0.05, "{estimate}");
    }

    #[test]
    fn untrained_net_samples_follow_linear_gaussian_recursion() {
        let sched = NoiseSchedule::linear(10).unwrap();
        let net = PolicyNet::new(
            PolicyArch {
                state_dim: 2,
                prompt_count: 1,
                hidden: vec![8],
            },
            &mut stream(0, &[]),
        )
        .unwrap();
        // zero output layer ⇒ x_{t−1} = a_t x_t + σ_t z
        let mut var = 1.0;
        for t in (1..=10).rev() {
            let (a, _) = sched.mean_coefficients(t);
            var = a * a * var + sched.sigma(t).powi(2);
        }
        let n = 20_000;
        let trajs = sample_batch(&net, &sched, &vec![0; n], 5, &[]).unwrap();
        let emp = trajs.iter().map(|t| t.x0()[0].powi(2)).sum::<f64>() / n as f64;
        // sd of the sample second moment is var·√(2/n)
        assert!(
            (emp - var).abs() < 5.0 * var * (2.0 / n as f64).sqrt(),
            "{emp} vs {var}"
        );
    }

    #[test]
    fn pretraining_on_a_point_concentrates_samples() {
        let sched = NoiseSchedule::linear(10).unwrap();
        let data = vec![(vec![0.0, 0.0], 0); 64];
        let cfg = PretrainConfig {
            steps: 600,
            batch_size: 64,
            hidden: vec![32, 32],
            ..Default::default()
        };
        let net = pretrain_reference(&data, &sched, 1, &cfg).unwrap();
        let trajs = sample_batch(&net, &sched, &vec![0; 500], 1, &[]).unwrap();
        let mut mean = [0.0; 2];
        for t in &trajs {
            mean[0] += t.x0()[0] / 500.0;
            mean[1] += t.x0()[1] / 500.0;
        }
        let norm = (mean[0].powi(2) + mean[1].powi(2)).sqrt();
        assert!(norm < 0.2, "mean norm {norm}");
    }

    #[test]
    fn pretraining_recovers_two_modes() {
        let sched = NoiseSchedule::linear(10).unwrap();
        let task = ToyTask {
            prompt_count: 2,
            ..Default::default()
        };
        let data = task.sample(1000, &mut stream(2, &[]));
        let cfg = PretrainConfig {
            steps: 2500,
            hidden: vec![48, 48],
            ..Default::default()
        };
        let net = pretrain_reference(&data, &sched, 2, &cfg).unwrap();
        for c in 0..2 {
            let centers = task.mode_centers(c);
            let trajs = sample_batch(&net, &sched, &vec![c; 2000], 3, &[c as u64]).unwrap();
            // mass within 0.5 of each mode must dwarf the mass around the
            // midpoint between them
            let near = |p: &[f64]| {
                trajs
                    .iter()
                    .filter(|t| {
                        t.x0()
                            .iter()
                            .zip(p)
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                            < 0.25
                    })
                    .count() as f64
                    / 2000.0
            };
            let mid: Vec<f64> = (0..2)
                .map(|i| 0.5 * (centers[0][i] + centers[1][i]))
                .collect();
            let valley = near(&mid);
            for m in &centers {
                let peak = near(m);
                assert!(
                    peak > 0.3 && peak > 3.0 * valley,
                    "prompt {c}: mode {m:?} {peak} vs valley {valley}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let sched = NoiseSchedule::linear(7).unwrap();
        let ckpt = Checkpoint {
            policy: random_net(4, 0.5),
            schedule: sched,
            seed: 77,
        };
        let dir = std::env::temp_dir().join(format!("prdp-ckpt-{}", std::process::id()));
        let path = dir.join("ref.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        std::fs::remove_dir_all(dir).ok();
        assert!(Checkpoint::parse("garbage").is_err());
        let truncated: String = ckpt
            .to_text()
            .lines()
            .take(8)
            .collect::<Vec<_>>()
            .join("\n");
        assert!(Checkpoint::parse(&truncated).is_err());
    }

    proptest! {
        #[test]
        fn moving_away_from_mean_lowers_log_prob(
            shifts in prop::collection::vec(-2.0f64..2.0, 3),
            states in prop::collection::vec(-3.0f64..3.0, 4),
            t in 1usize..=3,
            push in 0.01f64..2.0,
        ) {
            let sched = NoiseSchedule::linear(3).unwrap();
            let policy = ShiftPolicy::with_shifts(0.0, shifts.iter().map(|s| vec![*s]).collect(), 1);
            let mk = |s: &[f64]| Trajectory::new(0, s.iter().map(|v| vec![*v]).collect()).unwrap();
            let base = mk(&states);
            // index of x_{t−1} in the x_T-first layout
            let k = 3 - (t - 1);
            let mu = shifts[t - 1];
            let mut moved = states.clone();
            let dir = if states[k] >= mu { 1.0 } else { -1.0 };
            moved[k] += dir * push;
            let lp0 = trajectory_log_prob(&policy, &sched, &base).unwrap();
            let lp1 = trajectory_log_prob(&policy, &sched, &mk(&moved)).unwrap();
            prop_assert!(lp1 < lp0);
        }
    }
}
