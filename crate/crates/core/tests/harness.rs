use prdp::diffusion::{Checkpoint, DenoisingPolicy};
use prdp::harness::{
    build_reference, emit_metrics, emit_sweep_plots, emit_sweep_table, parse_metrics, run_training,
    summarize, sweep, Algorithm, TrainConfig,
};

fn tiny() -> TrainConfig {
    let mut c = TrainConfig::default();
    for o in [
        "hidden=8",
        "pretrain_steps=100",
        "pretrain_samples=200",
        "epochs=4",
        "eval_samples=16",
    ] {
        c.apply_override(o).unwrap();
    }
    c
}

fn reference(c: &TrainConfig) -> Checkpoint {
    build_reference(c).unwrap()
}

fn tempdir(tag: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("prdp-it-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn one_epoch_without_updates_returns_the_reference() {
    let mut c = tiny();
    c.epochs = 1;
    c.updates_per_epoch = 0;
    let r = reference(&c);
    for algo in [Algorithm::Prdp, Algorithm::PrdpOffline, Algorithm::Ddpo] {
        c.algorithm = algo;
        let run = run_training(&c, &r).unwrap();
        assert_eq!(run.policy.params(), r.policy.params(), "{algo}");
        assert_eq!(run.gradient_updates, 0);
        assert_eq!(run.stats.len(), 1);
        assert_eq!(run.stats[0].kl_estimate, 0.0);
    }
}

#[test]
fn every_algorithm_spends_the_same_budget() {
    let c = tiny();
    let r = reference(&c);
    let expected = (c.epochs * c.prompts_per_epoch * c.samples_per_prompt) as u64;
    let counts: Vec<(u64, u64)> = [Algorithm::Prdp, Algorithm::PrdpOffline, Algorithm::Ddpo]
        .into_iter()
        .map(|algorithm| {
            let run = run_training(
                &TrainConfig {
                    algorithm,
                    ..c.clone()
                },
                &r,
            )
            .unwrap();
            assert_eq!(run.stats.len(), c.epochs);
            assert!(run.stats.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
            (run.reward_queries, run.gradient_updates)
        })
        .collect();
    for q in &counts {
        assert_eq!(*q, (expected, (c.epochs * c.updates_per_epoch) as u64));
    }
}

#[test]
fn same_seed_gives_bit_identical_metrics_and_other_seeds_differ() {
    let c = tiny();
    let r = reference(&c);
    let dir = tempdir("det");
    let write = |c: &TrainConfig, name: &str| {
        let p = dir.join(name);
        emit_metrics(&run_training(c, &r).unwrap().stats, &p).unwrap();
        std::fs::read(p).unwrap()
    };
    let a = write(&c, "a.csv");
    assert_eq!(a, write(&c, "b.csv"));
    assert_ne!(
        a,
        write(
            &TrainConfig {
                seed: 1,
                ..c.clone()
            },
            "c.csv"
        )
    );
    assert_eq!(parse_metrics(&dir.join("a.csv")).unwrap().len(), c.epochs);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn single_value_sweep_matches_a_direct_run() {
    let c = tiny();
    let r = reference(&c);
    let runs = sweep(&c, "beta", &[c.beta.to_string()], &r).unwrap();
    let direct = run_training(&c, &r).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].stats.as_ref().unwrap(), &direct.stats);
    assert_eq!(
        runs[0].summary.as_ref().unwrap(),
        &summarize(&c, &r, &direct)
    );
    assert_eq!(
        runs[0].policy.as_ref().unwrap().params(),
        direct.policy.params()
    );
}

#[test]
fn beta_sweep_emits_one_series_per_value_and_a_table_row_each() {
    let c = tiny();
    let r = reference(&c);
    let values: Vec<String> = ["0.1", "1", "10"].iter().map(|s| s.to_string()).collect();
    let runs = sweep(&c, "beta", &values, &r).unwrap();
    let dir = tempdir("sweep");
    emit_sweep_plots("beta", &runs, &dir).unwrap();
    emit_sweep_table(&runs, &dir.join("sweep.csv")).unwrap();
    for f in ["sweep_reward.svg", "sweep_kl.svg"] {
        let svg = std::fs::read_to_string(dir.join(f)).unwrap();
        assert_eq!(svg.matches(r#"<g class="series""#).count(), 3);
        for v in &values {
            assert!(
                svg.contains(&format!(r#"data-label="beta = {v}""#)),
                "{f} lacks {v}"
            );
        }
    }
    let table = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn sweep_records_divergence_and_continues() {
    let mut c = tiny();
    for o in ["clip=none", "grad_clip_norm=0", "epochs=20"] {
        c.apply_override(o).unwrap();
    }
    let r = reference(&c);
    let runs = sweep(&c, "learning_rate", &["1e8".into(), "1e-3".into()], &r).unwrap();
    assert!(runs[0].summary.as_ref().unwrap().divergence.is_some());
    let last = runs[1].summary.as_ref().unwrap();
    assert!(last.divergence.is_none() && last.finite);
    assert_eq!(runs[1].stats.as_ref().unwrap().len(), 20);
}

#[test]
fn sweep_pretrains_for_new_shapes_and_rejects_bad_values_up_front() {
    let c = tiny();
    let r = reference(&c);
    let runs = sweep(&c, "ddpm_steps", &["10".into(), "5".into()], &r).unwrap();
    assert!(runs.iter().all(|run| run.error.is_none()));
    assert!(sweep(&c, "ddpm_steps", &["10".into(), "zero".into()], &r).is_err());
    assert!(sweep(&c, "no_such_axis", &["1".into()], &r).is_err());
}

#[test]
fn mismatched_reference_is_rejected() {
    let c = tiny();
    let r = reference(&c);
    let other = TrainConfig {
        ddpm_steps: 5,
        ..c.clone()
    };
    assert!(run_training(&other, &r).is_err());
}
