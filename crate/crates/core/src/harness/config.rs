//! Run configuration as flat `key = value` text with `#` comments.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::NormalizerMode;
use crate::diffusion::{PretrainConfig, ToyTask};
use crate::error::{Error, Result};
use crate::rdp::{ClipConfig, ClipMode};
use crate::rewards::RewardSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Algorithm {
    /// Online reward-difference prediction with proximal clipping.
    #[default]
    Prdp,
    /// The same loss on a fixed dataset of reference rollouts.
    PrdpOffline,
    /// PPO-clipped policy gradient on normalized rewards.
    Ddpo,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prdp" => Ok(Self::Prdp),
            "prdp-offline" => Ok(Self::PrdpOffline),
            "ddpo" => Ok(Self::Ddpo),
            _ => Err(Error::Config(format!(
                "unknown algorithm `{s}` (expected prdp, prdp-offline, ddpo)"
            ))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Prdp => "prdp",
            Self::PrdpOffline => "prdp-offline",
            Self::Ddpo => "ddpo",
        })
    }
}

/// Which reward kind a config names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    TargetDistance,
    Density,
    ScalarField,
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target-distance" => Ok(Self::TargetDistance),
            "density" => Ok(Self::Density),
            "scalar-field" => Ok(Self::ScalarField),
            _ => Err(Error::Config(format!(
                "unknown reward `{s}` (expected target-distance, density, scalar-field, or a weighted sum)"
            ))),
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TargetDistance => "target-distance",
            Self::Density => "density",
            Self::ScalarField => "scalar-field",
        })
    }
}

/// Reward declaration. `reward` is either one kind or a weighted sum such
/// as `10*target-distance + 2*density + 0.05*scalar-field`; every component
/// reads the shared `reward_*` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardConfig {
    pub components: Vec<(f64, RewardKind)>,
    /// Explicit per-prompt targets; when empty, targets sit at
    /// `reward_radius` along each prompt's base angle plus `reward_angle`.
    pub targets: Vec<Vec<f64>>,
    pub radius: f64,
    pub angle: f64,
    pub direction: Vec<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            components: vec![(1.0, RewardKind::TargetDistance)],
            targets: Vec::new(),
            radius: 1.5,
            angle: std::f64::consts::FRAC_PI_2,
            direction: vec![1.0, 0.0],
        }
    }
}

impl RewardConfig {
    fn parse_components(s: &str) -> Result<Vec<(f64, RewardKind)>> {
        s.split('+')
            .map(|term| {
                let term = term.trim();
                match term.split_once('*') {
                    Some((w, k)) => Ok((parse_f64("reward", w.trim())?, k.trim().parse()?)),
                    None => Ok((1.0, term.parse()?)),
                }
            })
            .collect()
    }

    fn components_text(&self) -> String {
        if let [(w, k)] = self.components.as_slice() {
            if *w == 1.0 {
                return k.to_string();
            }
        }
        self.components
            .iter()
            .map(|(w, k)| format!("{w}*{k}"))
            .collect::<Vec<_>>()
            .join(" + ")
    }

    fn kind_spec(&self, kind: RewardKind, task: &ToyTask) -> Result<RewardSpec> {
        Ok(match kind {
            RewardKind::TargetDistance if self.targets.is_empty() => {
                task.target_distance_reward(self.radius, self.angle)
            }
            RewardKind::TargetDistance => {
                if self.targets.len() != task.prompt_count
                    || self.targets.iter().any(|t| t.len() != 2)
                {
                    return Err(Error::Config(format!(
                        "reward_targets needs {} two-dimensional points",
                        task.prompt_count
                    )));
                }
                RewardSpec::TargetDistance {
                    targets: self.targets.clone(),
                }
            }
            RewardKind::Density => task.density_reward(),
            RewardKind::ScalarField => {
                if self.direction.len() != 2 {
                    return Err(Error::Config(
                        "reward_direction must have two entries".into(),
                    ));
                }
                RewardSpec::ScalarField {
                    direction: self.direction.clone(),
                }
            }
        })
    }

    pub fn build(&self, task: &ToyTask) -> Result<RewardSpec> {
        match self.components.as_slice() {
            [] => Err(Error::Config("reward needs at least one component".into())),
            [(w, k)] if *w == 1.0 => self.kind_spec(*k, task),
            parts => RewardSpec::weighted(
                parts
                    .iter()
                    .map(|(w, k)| Ok((*w, self.kind_spec(*k, task)?)))
                    .collect::<Result<_>>()?,
            ),
        }
    }
}

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// E
    pub epochs: usize,
    /// K
    pub updates_per_epoch: usize,
    /// N
    pub prompts_per_epoch: usize,
    /// B
    pub samples_per_prompt: usize,
    /// β
    pub beta: f64,
    /// `None` disables proximal clipping.
    pub clip_mode: Option<ClipMode>,
    /// ε
    pub clip_epsilon: f64,
    /// Trajectory-mode window; `None` means `T·ε`.
    pub clip_epsilon_trajectory: Option<f64>,
    /// T
    pub ddpm_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables.
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub normalizer: NormalizerMode,
    pub ddpo_clip_range: f64,
    pub reward: RewardConfig,
    pub task: ToyTask,
    pub hidden: Vec<usize>,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_learning_rate: f64,
    /// Toy data points per prompt for pretraining.
    pub pretrain_samples: usize,
    /// Reference checkpoint; pretrained in-process when unset.
    pub reference: Option<PathBuf>,
    /// Evaluation samples per prompt.
    pub eval_samples: usize,
    /// Whether `wall_ms` holds real timings; off keeps metrics files
    /// reproducible bit for bit.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    /// Toy scale: E=100, K=10, N=4, B=8, C=4, T=10.
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Prdp,
            epochs: 100,
            updates_per_epoch: 10,
            prompts_per_epoch: 4,
            samples_per_prompt: 8,
            beta: 0.1,
            clip_mode: Some(ClipMode::Stepwise),
            clip_epsilon: 0.05,
            clip_epsilon_trajectory: None,
            ddpm_steps: 10,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            grad_clip_norm: 1.0,
            seed: 0,
            normalizer: NormalizerMode::PerPrompt,
            ddpo_clip_range: 0.2,
            reward: RewardConfig::default(),
            task: ToyTask::default(),
            hidden: vec![64, 64],
            pretrain_steps: 4000,
            pretrain_batch: 128,
            pretrain_learning_rate: 3e-3,
            pretrain_samples: 1000,
            reference: None,
            eval_samples: 256,
            record_wall_time: false,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a non-negative integer, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}` expects true or false, got `{v}`"
        ))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|x| parse_f64(key, x.trim())).collect()
}

fn join<T: fmt::Display>(xs: &[T], sep: &str) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

impl TrainConfig {
    /// Image-model training constants: E=100, K=10, N=32, B=16,
    /// β=3e-5, ε=1e-6, T=50, lr=1e-5, weight decay 1e-4, gradient clip 1.
    /// Those constants were tuned for image models and are not expected to
    /// train the toy task.
    pub fn image_scale() -> Self {
        Self {
            epochs: 100,
            updates_per_epoch: 10,
            prompts_per_epoch: 32,
            samples_per_prompt: 16,
            beta: 3e-5,
            clip_epsilon: 1e-6,
            ddpm_steps: 50,
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            grad_clip_norm: 1.0,
            ..Self::default()
        }
    }

    /// Default config with `text` applied on top.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                ))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim())?;
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "algorithm" => self.algorithm = v.parse()?,
            "epochs" => self.epochs = parse_usize(key, v)?,
            "updates_per_epoch" => self.updates_per_epoch = parse_usize(key, v)?,
            "prompts_per_epoch" => self.prompts_per_epoch = parse_usize(key, v)?,
            "samples_per_prompt" => self.samples_per_prompt = parse_usize(key, v)?,
            "beta" => self.beta = parse_f64(key, v)?,
            "clip" => {
                self.clip_mode = match v {
                    "stepwise" => Some(ClipMode::Stepwise),
                    "trajectory" => Some(ClipMode::Trajectory),
                    "none" => None,
                    _ => {
                        return Err(Error::Config(format!(
                            "`clip` expects stepwise, trajectory, or none, got `{v}`"
                        )))
                    }
                }
            }
            "clip_epsilon" => self.clip_epsilon = parse_f64(key, v)?,
            "clip_epsilon_trajectory" => {
                self.clip_epsilon_trajectory = if v == "auto" {
                    None
                } else {
                    Some(parse_f64(key, v)?)
                }
            }
            "ddpm_steps" => self.ddpm_steps = parse_usize(key, v)?,
            "learning_rate" => self.learning_rate = parse_f64(key, v)?,
            "weight_decay" => self.weight_decay = parse_f64(key, v)?,
            "grad_clip_norm" => self.grad_clip_norm = parse_f64(key, v)?,
            "seed" => {
                self.seed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("`seed` expects a u64, got `{v}`")))?
            }
            "normalizer" => self.normalizer = v.parse()?,
            "ddpo_clip_range" => self.ddpo_clip_range = parse_f64(key, v)?,
            "reward" => self.reward.components = RewardConfig::parse_components(v)?,
            "reward_targets" => {
                self.reward.targets = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(';')
                        .map(|p| parse_list(key, p))
                        .collect::<Result<_>>()?
                }
            }
            "reward_radius" => self.reward.radius = parse_f64(key, v)?,
            "reward_angle" => self.reward.angle = parse_f64(key, v)?,
            "reward_direction" => self.reward.direction = parse_list(key, v)?,
            "prompt_count" => self.task.prompt_count = parse_usize(key, v)?,
            "modes_per_prompt" => self.task.modes_per_prompt = parse_usize(key, v)?,
            "mode_radius" => self.task.radius = parse_f64(key, v)?,
            "mode_std" => self.task.mode_std = parse_f64(key, v)?,
            "hidden" => {
                self.hidden = v
                    .split(',')
                    .map(|h| parse_usize(key, h.trim()))
                    .collect::<Result<_>>()?
            }
            "pretrain_steps" => self.pretrain_steps = parse_usize(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse_usize(key, v)?,
            "pretrain_learning_rate" => self.pretrain_learning_rate = parse_f64(key, v)?,
            "pretrain_samples" => self.pretrain_samples = parse_usize(key, v)?,
            "reference" => self.reference = (!v.is_empty()).then(|| PathBuf::from(v)),
            "eval_samples" => self.eval_samples = parse_usize(key, v)?,
            "record_wall_time" => self.record_wall_time = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.prompts_per_epoch == 0 {
            return fail("epochs and prompts_per_epoch must be at least 1");
        }
        if self.samples_per_prompt < 2 {
            return fail("samples_per_prompt must be at least 2");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail("beta must be positive");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon.is_finite()) {
            return fail("clip_epsilon must be positive");
        }
        self.clip().map(|c| c.validate()).transpose()?;
        if self.ddpm_steps == 0 {
            return fail("ddpm_steps must be at least 1");
        }
        if !(self.learning_rate >= 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.grad_clip_norm >= 0.0)
        {
            return fail("learning_rate, weight_decay, and grad_clip_norm must be non-negative");
        }
        if self.algorithm == Algorithm::Ddpo
            && !(self.ddpo_clip_range > 0.0 && self.ddpo_clip_range < 1.0)
        {
            return fail("ddpo_clip_range must lie in (0, 1)");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden needs at least one positive width");
        }
        if self.eval_samples == 0 || self.pretrain_samples == 0 {
            return fail("eval_samples and pretrain_samples must be positive");
        }
        self.task.validate()?;
        self.reward_spec()?;
        Ok(())
    }

    /// Effective proximal window, if clipping is on.
    pub fn clip(&self) -> Option<ClipConfig> {
        self.clip_mode.map(|mode| ClipConfig {
            epsilon_step: self.clip_epsilon,
            epsilon_traj: self.clip_epsilon_trajectory,
            mode,
        })
    }

    pub fn reward_spec(&self) -> Result<RewardSpec> {
        self.reward.build(&self.task)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            learning_rate: self.pretrain_learning_rate,
            hidden: self.hidden.clone(),
            seed: self.seed,
        }
    }

    /// Rollouts (and reward queries) per epoch, `N·B`.
    pub fn rollouts_per_epoch(&self) -> usize {
        self.prompts_per_epoch * self.samples_per_prompt
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let clip = match self.clip_mode {
            Some(ClipMode::Stepwise) => "stepwise",
            Some(ClipMode::Trajectory) => "trajectory",
            None => "none",
        };
        let targets = self
            .reward
            .targets
            .iter()
            .map(|t| join(t, ","))
            .collect::<Vec<_>>()
            .join("; ");
        let lines = [
            ("algorithm", self.algorithm.to_string()),
            ("epochs", self.epochs.to_string()),
            ("updates_per_epoch", self.updates_per_epoch.to_string()),
            ("prompts_per_epoch", self.prompts_per_epoch.to_string()),
            ("samples_per_prompt", self.samples_per_prompt.to_string()),
            ("beta", self.beta.to_string()),
            ("clip", clip.to_string()),
            ("clip_epsilon", self.clip_epsilon.to_string()),
            (
                "clip_epsilon_trajectory",
                self.clip_epsilon_trajectory
                    .map_or("auto".into(), |e| e.to_string()),
            ),
            ("ddpm_steps", self.ddpm_steps.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip_norm", self.grad_clip_norm.to_string()),
            ("seed", self.seed.to_string()),
            ("normalizer", self.normalizer.to_string()),
            ("ddpo_clip_range", self.ddpo_clip_range.to_string()),
            ("reward", self.reward.components_text()),
            ("reward_targets", targets),
            ("reward_radius", self.reward.radius.to_string()),
            ("reward_angle", self.reward.angle.to_string()),
            ("reward_direction", join(&self.reward.direction, ",")),
            ("prompt_count", self.task.prompt_count.to_string()),
            ("modes_per_prompt", self.task.modes_per_prompt.to_string()),
            ("mode_radius", self.task.radius.to_string()),
            ("mode_std", self.task.mode_std.to_string()),
            ("hidden", join(&self.hidden, ",")),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            (
                "pretrain_learning_rate",
                self.pretrain_learning_rate.to_string(),
            ),
            ("pretrain_samples", self.pretrain_samples.to_string()),
            (
                "reference",
                self.reference
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            ),
            ("eval_samples", self.eval_samples.to_string()),
            ("record_wall_time", self.record_wall_time.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
