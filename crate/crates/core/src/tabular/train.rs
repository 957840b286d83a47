use crate::autodiff::{Gradients, Tensor};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};

use super::enumerate::scaled_rewards;
use super::model::{
    decode_trajectory, row_index, LogTables, TabularDiffusion, TabularPolicy, PRIOR_PARAM,
    STEP_PARAM,
};

/// Exact-expectation reward-difference training on a tabular chain.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Stepwise proximal window ε; the prior factor counts as one more step.
    pub clip: Option<f64>,
    /// Gradient steps per snapshot when clipping.
    pub updates_per_snapshot: usize,
    /// Stop early once the loss falls below this value.
    pub target_loss: f64,
}

impl Default for TabularTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            learning_rate: 0.05,
            clip: None,
            updates_per_snapshot: 10,
            target_loss: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TabularTrainResult {
    pub policy: TabularPolicy,
    /// Loss before each update, then after the last.
    pub losses: Vec<f64>,
}

/// Pair weights for each prompt come from the (detached) sampling policy:
/// the current policy, or the snapshot when clipping.
struct Enumerated {
    trajs: Vec<Vec<usize>>,
    ref_log: Vec<Vec<f64>>,
    scaled: Vec<Vec<f64>>,
}

impl Enumerated {
    fn new(model: &TabularDiffusion) -> Self {
        let (s, t) = (model.states(), model.steps());
        let reference = LogTables::of_reference(model);
        let trajs: Vec<Vec<usize>> = (0..model.trajectory_count())
            .map(|i| decode_trajectory(i, s, t))
            .collect();
        let ref_log = (0..model.prompts())
            .map(|c| trajs.iter().flat_map(|x| reference.factors(c, x)).collect())
            .collect();
        let scaled = (0..model.prompts())
            .map(|c| scaled_rewards(model, c))
            .collect();
        Self {
            trajs,
            ref_log,
            scaled,
        }
    }
}

/// Per-factor log ratios `log π_θ − log π_ref` of every trajectory,
/// `[n, T + 1]` (prior first).
fn factor_ratios(tables: &LogTables, e: &Enumerated, prompt: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(e.ref_log[prompt].len());
    for x in &e.trajs {
        out.extend(tables.factors(prompt, x));
    }
    for (o, r) in out.iter_mut().zip(&e.ref_log[prompt]) {
        *o -= r;
    }
    out
}

fn weights(tables: &LogTables, e: &Enumerated, prompt: usize) -> Vec<f64> {
    e.trajs
        .iter()
        .map(|x| tables.log_prob(prompt, x).exp())
        .collect()
}

/// `E_{a,b∼w}[(f_a − f_b)²] = 2 Var_w(f)` with `f = r̂ − r/β`, averaged over
/// prompts.
pub fn exact_rdp_loss(model: &TabularDiffusion, policy: &TabularPolicy) -> Result<f64> {
    policy.matches(model)?;
    let e = Enumerated::new(model);
    let tables = policy.log_tables();
    let k = model.steps() + 1;
    let mut total = 0.0;
    for c in 0..model.prompts() {
        let w = weights(&tables, &e, c);
        let f: Vec<f64> = factor_ratios(&tables, &e, c)
            .chunks(k)
            .zip(&e.scaled[c])
            .map(|(r, s)| r.iter().sum::<f64>() - s)
            .collect();
        let mean: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
        total += 2.0
            * w.iter()
                .zip(&f)
                .map(|(a, b)| a * (b - mean).powi(2))
                .sum::<f64>();
    }
    Ok(total / model.prompts() as f64)
}

/// Turns per-factor coefficients `∂L/∂ log π(factor)` into logit gradients
/// via `∂ log softmax_y / ∂ logit_z = 1[y = z] − p_z`.
fn accumulate(
    model: &TabularDiffusion,
    e: &Enumerated,
    prompt: usize,
    coef: &[f64],
    prior_acc: &mut [f64],
    step_acc: &mut [f64],
) {
    let (s, steps, prompts) = (model.states(), model.steps(), model.prompts());
    let k = steps + 1;
    for (i, x) in e.trajs.iter().enumerate() {
        let c = &coef[i * k..(i + 1) * k];
        prior_acc[prompt * s + x[0]] += c[0];
        for j in 0..steps {
            let t = steps - j;
            let r = row_index(s, prompts, t, prompt, x[j]);
            step_acc[r * s + x[j + 1]] += c[j + 1];
        }
    }
}

fn to_gradients(tables: &LogTables, prior_acc: Vec<f64>, step_acc: Vec<f64>) -> Result<Gradients> {
    let s = tables.states;
    let project = |acc: Vec<f64>, logp: &[f64]| -> Vec<f64> {
        acc.chunks(s)
            .zip(logp.chunks(s))
            .flat_map(|(a, lp)| {
                let total: f64 = a.iter().sum();
                a.iter()
                    .zip(lp)
                    .map(move |(ai, l)| ai - l.exp() * total)
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let prior = project(prior_acc, &tables.prior);
    let steps = project(step_acc, &tables.rows);
    let mut g = Gradients::new();
    g.insert(
        PRIOR_PARAM.into(),
        Tensor::new(vec![tables.prompts, s], prior)?,
    );
    g.insert(
        STEP_PARAM.into(),
        Tensor::new(vec![tables.rows.len() / s, s], steps)?,
    );
    Ok(g)
}

/// Loss and logit gradients. Without `snapshot`, weights come from the
/// current policy and the loss is `2 Var_w(f)`; with it, weights come from
/// the snapshot and each pair contributes `max(l, l_clip)` with every factor
/// ratio clamped to `snapshot ± ε`.
fn loss_and_gradients(
    model: &TabularDiffusion,
    e: &Enumerated,
    policy: &TabularPolicy,
    snapshot: Option<(&TabularPolicy, f64)>,
) -> Result<(f64, Gradients)> {
    let tables = policy.log_tables();
    let (s, steps, prompts) = (model.states(), model.steps(), model.prompts());
    let k = steps + 1;
    let n = e.trajs.len();
    let mut prior_acc = vec![0.0; prompts * s];
    let mut step_acc = vec![0.0; steps * prompts * s * s];
    let mut total = 0.0;
    let inv_c = 1.0 / prompts as f64;
    for c in 0..prompts {
        let ratios = factor_ratios(&tables, e, c);
        let f: Vec<f64> = ratios
            .chunks(k)
            .zip(&e.scaled[c])
            .map(|(r, sc)| r.iter().sum::<f64>() - sc)
            .collect();
        let mut coef = vec![0.0; n * k];
        match snapshot {
            None => {
                let w = weights(&tables, e, c);
                let mean: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    let d = f[i] - mean;
                    total += inv_c * 2.0 * w[i] * d * d;
                    let a = inv_c * 4.0 * w[i] * d;
                    coef[i * k..(i + 1) * k].iter_mut().for_each(|v| *v = a);
                }
            }
            Some((old, eps)) => {
                let old_tables = old.log_tables();
                let w = weights(&old_tables, e, c);
                let old_ratios = factor_ratios(&old_tables, e, c);
                let inside: Vec<bool> = ratios
                    .iter()
                    .zip(&old_ratios)
                    .map(|(r, o)| (r - o).abs() <= eps)
                    .collect();
                let fc: Vec<f64> = ratios
                    .chunks(k)
                    .zip(old_ratios.chunks(k))
                    .zip(&e.scaled[c])
                    .map(|((r, o), sc)| {
                        r.iter()
                            .zip(o)
                            .map(|(ri, oi)| ri.clamp(oi - eps, oi + eps))
                            .sum::<f64>()
                            - sc
                    })
                    .collect();
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let wij = inv_c * w[i] * w[j];
                        let (dp, dc) = (f[i] - f[j], fc[i] - fc[j]);
                        if dp * dp >= dc * dc {
                            total += wij * dp * dp;
                            let a = 2.0 * wij * dp;
                            for m in 0..k {
                                coef[i * k + m] += a;
                                coef[j * k + m] -= a;
                            }
                        } else {
                            total += wij * dc * dc;
                            let a = 2.0 * wij * dc;
                            for m in 0..k {
                                if inside[i * k + m] {
                                    coef[i * k + m] += a;
                                }
                                if inside[j * k + m] {
                                    coef[j * k + m] -= a;
                                }
                            }
                        }
                    }
                }
            }
        }
        accumulate(model, e, c, &coef, &mut prior_acc, &mut step_acc);
    }
    Ok((total, to_gradients(&tables, prior_acc, step_acc)?))
}

/// Minimizes the exact expected pair loss with Adam on the logits.
pub fn train_tabular_rdp(
    model: &TabularDiffusion,
    init: &TabularPolicy,
    config: &TabularTrainConfig,
) -> Result<TabularTrainResult> {
    init.matches(model)?;
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    if let Some(eps) = config.clip {
        if !(eps > 0.0) || config.updates_per_snapshot == 0 {
            return Err(Error::Config(
                "clip epsilon and updates per snapshot must be positive".into(),
            ));
        }
    }
    let e = Enumerated::new(model);
    let mut policy = init.clone();
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut losses = Vec::with_capacity(config.steps + 1);
    let mut snapshot = policy.clone();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    for step in 0..config.steps {
        if config.clip.is_some() && step % config.updates_per_snapshot == 0 {
            snapshot = policy.clone();
        }
        let (loss, grads) =
            loss_and_gradients(model, &e, &policy, config.clip.map(|eps| (&snapshot, eps)))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(loss);
        if loss < config.target_loss {
            return Ok(TabularTrainResult { policy, losses });
        }
        if loss < best {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > 2_000 && loss > 1e3 * best.max(1e-12) {
                return Err(Error::Diverged { step });
            }
        }
        // cosine decay to 1% keeps Adam from hovering at its step size
        let progress = step as f64 / config.steps as f64;
        opt.set_learning_rate(
            config.learning_rate
                * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())),
        );
        opt.step(policy.params_mut(), &grads);
    }
    losses.push(exact_rdp_loss(model, &policy)?);
    Ok(TabularTrainResult { policy, losses })
}
