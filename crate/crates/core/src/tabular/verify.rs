use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::rng::{stream, Rng};

use super::enumerate::{
    enumerate_distribution, kl_marginal, kl_trajectory, objective_of, optimal_distribution,
    optimal_policy, partition_function, reference_distribution, scaled_rewards,
};
use super::model::{RandomInstance, TabularDiffusion, TabularPolicy};
use super::train::{exact_rdp_loss, train_tabular_rdp, TabularTrainConfig};

/// `max_{a,b} |Δr̂(a, b) − Δr(a, b)/β|`, which equals `max f − min f` for
/// `f = r̂ − r/β`.
pub fn optimality_residual(
    model: &TabularDiffusion,
    policy: &TabularPolicy,
    prompt: usize,
) -> Result<f64> {
    let p = enumerate_distribution(model, policy, prompt)?;
    let reference = reference_distribution(model, prompt)?;
    let f = p
        .log_probs()
        .iter()
        .zip(reference.log_probs())
        .zip(scaled_rewards(model, prompt))
        .map(|((a, b), r)| a - b - r);
    let (lo, hi) = f.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    Ok(hi - lo)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimalityReport {
    pub prompt: usize,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn verify_optimality_condition(
    model: &TabularDiffusion,
    policy: &TabularPolicy,
    prompt: usize,
    tolerance: f64,
) -> Result<OptimalityReport> {
    let residual = optimality_residual(model, policy, prompt)?;
    Ok(OptimalityReport {
        prompt,
        residual,
        tolerance,
        pass: residual <= tolerance,
    })
}

/// `1 − e^{−δ}`: with `f = log(π/π*) − log Z` spread over an interval of
/// width δ and both distributions normalized, every `log(π/π*)` lies in
/// `[−δ, δ]`, so `TV = Σ π* (1 − π/π*)⁺ ≤ 1 − e^{−δ}`.
pub fn residual_tv_bound(residual: f64) -> f64 {
    1.0 - (-residual).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CalibrationPoint {
    pub residual: f64,
    pub tv: f64,
}

/// Empirical map from optimality residual to distance from `π*`, from
/// random perturbations of the optimal logits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReverseCalibration {
    /// Sorted by residual.
    pub points: Vec<CalibrationPoint>,
}

impl ReverseCalibration {
    /// Largest TV observed at residual ≤ `tol`; non-decreasing in `tol`.
    pub fn envelope(&self, tol: f64) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.residual <= tol)
            .fold(0.0, |m, p| m.max(p.tv))
    }

    /// Every point respects [`residual_tv_bound`].
    pub fn within_bound(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.tv <= residual_tv_bound(p.residual) + 1e-12)
    }
}

/// Perturbs every logit of the optimal policy by `N(0, scale²)`,
/// `per_scale` times for each scale.
pub fn calibrate_reverse(
    model: &TabularDiffusion,
    prompt: usize,
    scales: &[f64],
    per_scale: usize,
    rng: &mut Rng,
) -> Result<ReverseCalibration> {
    let star = optimal_policy(model);
    let target = optimal_distribution(model, prompt)?;
    let mut points = Vec::with_capacity(scales.len() * per_scale);
    for &scale in scales {
        for _ in 0..per_scale {
            let p = perturb(model, &star, scale, rng);
            let residual = optimality_residual(model, &p, prompt)?;
            let tv = enumerate_distribution(model, &p, prompt)?.total_variation(&target);
            points.push(CalibrationPoint { residual, tv });
        }
    }
    points.sort_by(|a, b| a.residual.total_cmp(&b.residual));
    Ok(ReverseCalibration { points })
}

fn perturb(
    model: &TabularDiffusion,
    base: &TabularPolicy,
    scale: f64,
    rng: &mut Rng,
) -> TabularPolicy {
    let mut noise = |v: &f64| {
        v + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng)
    };
    let prior = base.prior_logits().iter().map(&mut noise).collect();
    let steps = base.step_logits().iter().map(&mut noise).collect();
    TabularPolicy::from_logits(model, prior, steps).expect("finite logits")
}

/// Outcome of one numerical check of the suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LemmaCheck {
    pub name: String,
    pub pass: bool,
    pub instances: usize,
    /// The check's worst value (a margin or a residual, see `detail`).
    pub worst: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub checks: Vec<LemmaCheck>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    pub lemma1_instances: usize,
    pub lemma2_instances: usize,
    pub lemma2_policies: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lemma1_instances: 1000,
            lemma2_instances: 100,
            lemma2_policies: 1000,
        }
    }
}

/// Random instance with `S ∈ 2..=4`, `T ∈ 1..=3`, `C ∈ 1..=2`, β log-uniform
/// in `[0.1, 10]`.
fn random_small_instance(rng: &mut Rng) -> TabularDiffusion {
    let spec = RandomInstance {
        states: rng.random_range(2..=4),
        steps: rng.random_range(1..=3),
        prompts: rng.random_range(1..=2),
        beta: 10f64.powf(rng.random_range(-1.0..=1.0)),
        reward_scale: rng.random_range(0.5..=5.0),
        logit_scale: rng.random_range(0.2..=2.0),
    };
    TabularDiffusion::random(&spec, rng).expect("random instance within budget")
}

/// Trajectory KL dominates marginal KL on random policy pairs.
pub fn check_kl_lower_bound(instances: usize, seed: u64) -> Result<LemmaCheck> {
    let start = Instant::now();
    let margins: Vec<f64> = (0..instances)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut rng = stream(seed, &[1, i as u64]);
            let model = random_small_instance(&mut rng);
            let scale = rng.random_range(0.1..=3.0);
            let p = TabularPolicy::random(&model, scale, &mut rng);
            let q = if i % 2 == 0 {
                TabularPolicy::reference(&model)
            } else {
                TabularPolicy::random(&model, scale, &mut rng)
            };
            let mut worst = f64::INFINITY;
            for c in 0..model.prompts() {
                worst =
                    worst.min(kl_trajectory(&model, &p, &q, c)? - kl_marginal(&model, &p, &q, c)?);
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(LemmaCheck {
        name: "kl-lower-bound".into(),
        pass: worst >= -1e-12,
        instances,
        worst,
        detail:
            "min over instances and prompts of KL(trajectory) − KL(x0 marginal); must be ≥ −1e-12"
                .into(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// No random policy beats `π*` on `E[r] − β KL` over trajectories.
pub fn check_optimum_maximizes_objective(
    instances: usize,
    policies: usize,
    seed: u64,
) -> Result<LemmaCheck> {
    let start = Instant::now();
    let gaps: Vec<(f64, usize)> = (0..instances)
        .into_par_iter()
        .map(|i| -> Result<(f64, usize)> {
            let mut rng = stream(seed, &[2, i as u64]);
            let model = random_small_instance(&mut rng);
            let star = optimal_policy(&model);
            let refs: Vec<_> = (0..model.prompts())
                .map(|c| reference_distribution(&model, c))
                .collect::<Result<_>>()?;
            let best: Vec<f64> = (0..model.prompts())
                .map(|c| {
                    Ok(objective_of(
                        &model,
                        &enumerate_distribution(&model, &star, c)?,
                        &refs[c],
                        c,
                    ))
                })
                .collect::<Result<_>>()?;
            let (mut worst, mut counter) = (f64::INFINITY, 0usize);
            for k in 0..policies {
                // half global draws, half small perturbations of the optimum
                let p = if k % 2 == 0 {
                    TabularPolicy::random(&model, rng.random_range(0.1..=3.0), &mut rng)
                } else {
                    perturb(
                        &model,
                        &star,
                        10f64.powf(rng.random_range(-4.0..=0.0)),
                        &mut rng,
                    )
                };
                for c in 0..model.prompts() {
                    let j =
                        objective_of(&model, &enumerate_distribution(&model, &p, c)?, &refs[c], c);
                    let gap = best[c] - j;
                    worst = worst.min(gap);
                    if gap < -1e-12 {
                        counter += 1;
                    }
                }
            }
            Ok((worst, counter))
        })
        .collect::<Result<_>>()?;
    let worst = gaps.iter().map(|g| g.0).fold(f64::INFINITY, f64::min);
    let counterexamples: usize = gaps.iter().map(|g| g.1).sum();
    Ok(LemmaCheck {
        name: "optimum-maximizes-objective".into(),
        pass: counterexamples == 0,
        instances,
        worst,
        detail: format!(
            "min of J(π*) − J(π) over {policies} random policies per instance; {counterexamples} counterexamples (gap < −1e-12)"
        ),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Optimality condition at `π*`, zero loss there, training to the optimum
/// on the default instance, and the reverse-direction calibration.
pub fn check_optimality_condition(seed: u64) -> Result<LemmaCheck> {
    let start = Instant::now();
    let model = TabularDiffusion::default_instance();
    let star = optimal_policy(&model);
    let star_loss = exact_rdp_loss(&model, &star)?;
    let mut star_residual = 0.0f64;
    for c in 0..model.prompts() {
        star_residual = star_residual.max(optimality_residual(&model, &star, c)?);
    }
    let trained = train_tabular_rdp(
        &model,
        &TabularPolicy::reference(&model),
        &TabularTrainConfig::default(),
    )?;
    let final_loss = *trained.losses.last().expect("at least one loss");
    let mut tv = 0.0f64;
    for c in 0..model.prompts() {
        tv = tv.max(
            enumerate_distribution(&model, &trained.policy, c)?
                .total_variation(&optimal_distribution(&model, c)?),
        );
    }
    let calibration = calibrate_reverse(
        &model,
        0,
        &[1e-4, 1e-3, 1e-2, 1e-1, 0.5],
        40,
        &mut stream(seed, &[3]),
    )?;
    let grid = [1e-3, 1e-2, 1e-1, 1.0];
    let envelope: Vec<f64> = grid.iter().map(|t| calibration.envelope(*t)).collect();
    let monotone = envelope.windows(2).all(|w| w[0] <= w[1]);
    let pass = star_loss < 1e-12
        && star_residual < 1e-9
        && final_loss < 1e-6
        && tv < 1e-3
        && monotone
        && calibration.within_bound();
    Ok(LemmaCheck {
        name: "optimality-condition".into(),
        pass,
        instances: 1,
        worst: tv,
        detail: format!(
            "π*: loss {star_loss:.3e}, residual {star_residual:.3e}; trained: loss {final_loss:.3e} after {} updates, TV {tv:.3e}; \
             reverse envelope at residual {grid:?}: {envelope:?}, within 1 − e^(−δ): {}",
            trained.losses.len() - 1,
            calibration.within_bound()
        ),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Hand-enumerated partition function of the two-state example and the
/// reward-free case.
pub fn check_partition_function() -> Result<LemmaCheck> {
    let start = Instant::now();
    let model = TabularDiffusion::two_state_example();
    let z = partition_function(&model, 0)?;
    let flat = partition_function(&model.with_rewards(vec![0.0, 0.0])?, 0)?;
    let err = (z - 1.5).abs().max((flat - 1.0).abs());
    Ok(LemmaCheck {
        name: "partition-function".into(),
        pass: err < 1e-12,
        instances: 2,
        worst: err,
        detail: format!("Z = {z} (expected 1.5), Z(r ≡ 0) = {flat} (expected 1)"),
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_lemma_suite(config: &VerifyConfig) -> Result<VerifyReport> {
    let checks = vec![
        check_partition_function()?,
        check_kl_lower_bound(config.lemma1_instances, config.seed)?,
        check_optimum_maximizes_objective(
            config.lemma2_instances,
            config.lemma2_policies,
            config.seed,
        )?,
        check_optimality_condition(config.seed)?,
    ];
    Ok(VerifyReport {
        pass: checks.iter().all(|c| c.pass),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimum_has_zero_residual_and_reference_does_not() {
        let model = TabularDiffusion::default_instance();
        let star = optimal_policy(&model);
        let reference = TabularPolicy::reference(&model);
        for c in 0..model.prompts() {
            assert!(
                verify_optimality_condition(&model, &star, c, 1e-9)
                    .unwrap()
                    .pass
            );
            let r = optimality_residual(&model, &reference, c).unwrap();
            let rewards: Vec<f64> = (0..model.states()).map(|x| model.reward(x, c)).collect();
            let spread = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - rewards.iter().copied().fold(f64::INFINITY, f64::min);
            assert!((r - spread / model.beta()).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_calibration_is_monotone_and_bounded() {
        let model = TabularDiffusion::default_instance();
        let cal =
            calibrate_reverse(&model, 1, &[1e-3, 1e-2, 0.1, 1.0], 25, &mut stream(0, &[])).unwrap();
        assert!(cal.within_bound());
        let grid: Vec<f64> = (0..30).map(|k| 1e-4 * 1.5f64.powi(k)).collect();
        let env: Vec<f64> = grid.iter().map(|t| cal.envelope(*t)).collect();
        assert!(env.windows(2).all(|w| w[0] <= w[1]));
        assert!(cal.envelope(1e-2) < 1e-2);
    }

    #[test]
    fn small_suites_pass() {
        assert!(check_partition_function().unwrap().pass);
        assert!(check_kl_lower_bound(50, 1).unwrap().pass);
        assert!(check_optimum_maximizes_objective(5, 50, 1).unwrap().pass);
    }
}
