//! `prdp`: pretrain, train, evaluate, verify, and sweep toy diffusion
//! finetuning runs.
//!
//! Exit codes: 0 success, 1 run failure, 2 config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use prdp::diffusion::Checkpoint;
use prdp::harness::{
    build_reference, check_reference, compare, emit_metrics, emit_plots, emit_sweep_plots,
    emit_sweep_table, emit_updates, evaluate, kl_estimate, run_training, summarize, sweep,
    training_offline_dataset, Algorithm, TrainConfig,
};
use prdp::tabular::{run_lemma_suite, VerifyConfig};
use prdp::Error;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "prdp",
    version,
    about = "Reward-difference finetuning of toy diffusion policies"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` config file; unset keys keep toy defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// `key=value`, applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the reference policy and write `reference.ckpt`.
    Pretrain,
    /// Run one training config.
    Train {
        /// Reference checkpoint; defaults to the config's `reference`, else
        /// one is pretrained.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Paired evaluation of a policy against the reference.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run the tabular lemma suite.
    Verify {
        /// Fewer random instances, for smoke tests.
        #[arg(long)]
        quick: bool,
    },
    /// Run the config once per value of one key.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

/// A run that completed but failed its goal (divergence, lemma failure).
#[derive(Debug)]
struct RunFailure(String);

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for RunFailure {}

fn load_config(g: &Global) -> Result<TrainConfig> {
    let mut config = match &g.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in &g.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// The reference from `flag`, else the config's `reference`, else freshly
/// pretrained (and saved as `out/reference.ckpt`).
fn reference(config: &TrainConfig, flag: Option<&Path>, out: &Path) -> Result<Checkpoint> {
    let ckpt = match flag.or(config.reference.as_deref()) {
        Some(p) => {
            Checkpoint::load(p).with_context(|| format!("loading reference {}", p.display()))?
        }
        None => {
            eprintln!("pretraining reference ({} steps)", config.pretrain_steps);
            let ckpt = build_reference(config)?;
            ckpt.save(&out.join("reference.ckpt"))?;
            ckpt
        }
    };
    check_reference(config, &ckpt)?;
    Ok(ckpt)
}

fn pretrain(config: &TrainConfig, out: &Path) -> Result<()> {
    let ckpt = build_reference(config)?;
    let path = out.join("reference.ckpt");
    ckpt.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn train(config: &TrainConfig, flag: Option<&Path>, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let reference = reference(config, flag, out)?;
    std::fs::write(out.join("config.txt"), config.to_text())?;
    if config.algorithm == Algorithm::PrdpOffline {
        training_offline_dataset(config, &reference)?.save(&out.join("offline_dataset.csv"))?;
    }
    let run = run_training(config, &reference)?;
    emit_metrics(&run.stats, &out.join("metrics.csv"))?;
    if !run.updates.is_empty() {
        emit_updates(&run.updates, &out.join("updates.csv"))?;
    }
    emit_plots(&run.stats, &out.join("plots"))?;
    let summary = summarize(config, &reference, &run);
    write_json(&out.join("summary.json"), &serde_json::to_value(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    let save = |policy| {
        Checkpoint {
            policy,
            schedule: reference.schedule.clone(),
            seed: config.seed,
        }
        .save(&out.join("policy.ckpt"))
    };
    match run.divergence {
        Some(d) => {
            save(d.snapshot)?;
            Err(RunFailure(format!(
                "diverged at epoch {}, update {}: {}",
                d.epoch, d.update, d.detail
            ))
            .into())
        }
        None => Ok(save(run.policy)?),
    }
}

fn eval(config: &TrainConfig, policy: &Path, flag: Option<&Path>, out: &Path) -> Result<()> {
    let reference = match flag.or(config.reference.as_deref()) {
        Some(p) => {
            Checkpoint::load(p).with_context(|| format!("loading reference {}", p.display()))?
        }
        None => {
            return Err(
                Error::Config("eval needs --reference or a `reference` config key".into()).into(),
            )
        }
    };
    check_reference(config, &reference)?;
    let trained =
        Checkpoint::load(policy).with_context(|| format!("loading policy {}", policy.display()))?;
    check_reference(config, &trained)?;
    let spec = config.reward_spec()?;
    let prompts: Vec<usize> = (0..config.task.prompt_count).collect();
    let n = config.eval_samples;
    let sched = &reference.schedule;
    let a = evaluate(&trained.policy, sched, &prompts, &spec, n, config.seed)?;
    let b = evaluate(&reference.policy, sched, &prompts, &spec, n, config.seed)?;
    let kl = kl_estimate(
        &trained.policy,
        &reference.policy,
        sched,
        &prompts,
        n,
        config.seed,
    )?;
    let report = json!({
        "samples_per_prompt": n,
        "seed": config.seed,
        "policy": a,
        "reference": b,
        "comparison": compare(&a, &b)?,
        "kl": kl,
    });
    std::fs::create_dir_all(out)?;
    write_json(&out.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn verify(config: &TrainConfig, quick: bool, out: &Path) -> Result<()> {
    let mut vc = VerifyConfig {
        seed: config.seed,
        ..Default::default()
    };
    if quick {
        vc.lemma1_instances = 50;
        vc.lemma2_instances = 10;
        vc.lemma2_policies = 50;
    }
    let report = run_lemma_suite(&vc)?;
    let value = serde_json::to_value(&report)?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("verify.json"), &value)?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    if report.pass {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name.as_str())
            .collect();
        Err(RunFailure(format!("lemma checks failed: {}", failed.join(", "))).into())
    }
}

fn run_sweep(
    config: &TrainConfig,
    axis: &str,
    values: &[String],
    flag: Option<&Path>,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let reference = reference(config, flag, out)?;
    let runs = sweep(config, axis, values, &reference)?;
    for r in &runs {
        let dir = out.join(format!("{axis}={}", r.value));
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.txt"), r.config.to_text())?;
        if let Some(stats) = r.stats.as_deref().filter(|s| !s.is_empty()) {
            emit_metrics(stats, &dir.join("metrics.csv"))?;
        }
        if let Some(s) = &r.summary {
            write_json(&dir.join("summary.json"), &serde_json::to_value(s)?)?;
        }
    }
    emit_sweep_table(&runs, &out.join("sweep.csv"))?;
    emit_sweep_plots(axis, &runs, &out.join("plots"))?;
    print!("{}", std::fs::read_to_string(out.join("sweep.csv"))?);
    let failed: Vec<String> = runs
        .iter()
        .filter(|r| r.error.is_some() || r.summary.as_ref().is_some_and(|s| s.divergence.is_some()))
        .map(|r| r.value.clone())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(RunFailure(format!(
            "runs failed or diverged for {axis} = {}",
            failed.join(", ")
        ))
        .into())
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(&cli.global)?;
    let out = &cli.global.out;
    match &cli.command {
        Command::Pretrain => pretrain(&config, out),
        Command::Train { reference } => train(&config, reference.as_deref(), out),
        Command::Eval { policy, reference } => eval(&config, policy, reference.as_deref(), out),
        Command::Verify { quick } => verify(&config, *quick, out),
        Command::Sweep {
            axis,
            values,
            reference,
        } => run_sweep(&config, axis, values, reference.as_deref(), out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
