use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{GraphBuilder, Tensor};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::rng::stream;

use super::{DenoisingPolicy, NoiseSchedule, PolicyArch, PolicyNet, StepRows};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 128,
            learning_rate: 3e-3,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

/// Trains a reference policy with the standard noise-prediction objective
/// `E‖ε − ε̂(√ᾱ_t x₀ + √(1−ᾱ_t) ε, c, t)‖²` on `(x₀, prompt)` pairs. The
/// learning rate follows a cosine decay to a tenth of its initial value.
pub fn pretrain_reference(
    data: &[(Vec<f64>, usize)],
    schedule: &NoiseSchedule,
    prompt_count: usize,
    config: &PretrainConfig,
) -> Result<PolicyNet> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("pretraining data is empty".into()));
    }
    let d = data[0].0.len();
    if data.iter().any(|(x, c)| x.len() != d || *c >= prompt_count) {
        return Err(Error::InvalidArgument(
            "pretraining data has inconsistent dimensions or prompt ids".into(),
        ));
    }
    let arch = PolicyArch {
        state_dim: d,
        prompt_count,
        hidden: config.hidden.clone(),
    };
    let mut net = PolicyNet::new(arch, &mut stream(config.seed, &[0]))?;
    let mut rng = stream(config.seed, &[1]);
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: 0.0,
        ..Default::default()
    });
    let steps = schedule.steps();
    for step in 0..config.steps {
        let progress = step as f64 / config.steps.max(1) as f64;
        let lr = config.learning_rate
            * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        opt.set_learning_rate(lr);

        let mut rows = StepRows::new(d);
        let mut target = Vec::with_capacity(config.batch_size * d);
        for _ in 0..config.batch_size {
            let (x0, c) = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=steps);
            let ab = schedule.alpha_bar(t);
            let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let xt: Vec<f64> = x0
                .iter()
                .zip(&eps)
                .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
                .collect();
            rows.push(&xt, *c, t);
            target.extend(eps);
        }
        let mut g = GraphBuilder::new();
        let pred = net.noise_node(&mut g, schedule, &rows);
        let tgt = g.constant(Tensor::new(vec![config.batch_size, d], target)?);
        let diff = g.sub(pred, tgt);
        let sq = g.square(diff);
        let per_row = g.sum_rows(sq);
        let loss = g.mean(per_row);
        let graph = g.finish(loss)?;
        let (value, mut grads) =
            graph
                .backward(net.params())
                .map_err(|e| Error::TrainingDiverged {
                    epoch: 0,
                    update: step,
                    detail: e.to_string(),
                })?;
        if !value.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch: 0,
                update: step,
                detail: "pretraining loss is not finite".into(),
            });
        }
        clip_global_norm(&mut grads, 1.0);
        opt.step(net.params_mut(), &grads);
    }
    Ok(net)
}
