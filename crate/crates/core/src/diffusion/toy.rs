use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rewards::{GaussianMixture, RewardSpec};
use crate::rng::Rng;

/// 2-D toy data: every prompt owns a mixture of equally weighted isotropic
/// Gaussians placed on a circle. Prompt `c` of `C` puts its modes at angles
/// `πc/C + 2πk/m`, so no two prompts share a mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub prompt_count: usize,
    pub modes_per_prompt: usize,
    pub radius: f64,
    pub mode_std: f64,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            prompt_count: 4,
            modes_per_prompt: 2,
            radius: 1.0,
            mode_std: 0.2,
        }
    }
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_count == 0 || self.modes_per_prompt == 0 {
            return Err(Error::Config("toy task needs prompts and modes".into()));
        }
        if !(self.radius >= 0.0) || !(self.mode_std > 0.0) {
            return Err(Error::Config("toy task radius/std out of range".into()));
        }
        Ok(())
    }

    pub fn base_angle(&self, prompt: usize) -> f64 {
        PI * prompt as f64 / self.prompt_count as f64
    }

    pub fn mode_centers(&self, prompt: usize) -> Vec<Vec<f64>> {
        let base = self.base_angle(prompt);
        (0..self.modes_per_prompt)
            .map(|k| {
                let a = base + 2.0 * PI * k as f64 / self.modes_per_prompt as f64;
                vec![self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }

    pub fn mixture(&self, prompt: usize) -> GaussianMixture {
        let m = self.modes_per_prompt;
        GaussianMixture::new(
            vec![1.0; m],
            self.mode_centers(prompt),
            vec![self.mode_std; m],
        )
        .expect("toy mixture parameters are valid")
    }

    /// `n_per_prompt` samples for every prompt, prompt-major.
    pub fn sample(&self, n_per_prompt: usize, rng: &mut Rng) -> Vec<(Vec<f64>, usize)> {
        let mut out = Vec::with_capacity(n_per_prompt * self.prompt_count);
        for c in 0..self.prompt_count {
            let mix = self.mixture(c);
            for _ in 0..n_per_prompt {
                out.push((mix.sample(rng), c));
            }
        }
        out
    }

    /// Per-prompt targets at `radius` along the prompt's base angle plus
    /// `angle_offset`.
    pub fn targets(&self, radius: f64, angle_offset: f64) -> Vec<Vec<f64>> {
        (0..self.prompt_count)
            .map(|c| {
                let a = self.base_angle(c) + angle_offset;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect()
    }

    pub fn target_distance_reward(&self, radius: f64, angle_offset: f64) -> RewardSpec {
        RewardSpec::TargetDistance {
            targets: self.targets(radius, angle_offset),
        }
    }

    pub fn density_reward(&self) -> RewardSpec {
        RewardSpec::Density {
            mixtures: (0..self.prompt_count).map(|c| self.mixture(c)).collect(),
        }
    }
}
