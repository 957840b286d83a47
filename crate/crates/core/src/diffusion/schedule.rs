use crate::error::{Error, Result};

/// Fixed variance schedule of a Gaussian DDPM.
///
/// Steps are indexed `t = 1..=T`; per-step vectors store step `t` at index
/// `t − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule whose total noise is independent of `steps`:
    /// β runs from `0.1/T` to `6/T`, giving `ᾱ_T ≈ 0.02–0.04` for any T ≥ 10.
    pub fn linear(steps: usize) -> Result<Self> {
        let t = steps as f64;
        Self::linear_between(steps, 0.1 / t, (6.0 / t).min(0.999))
    }

    pub fn linear_between(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_max
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        // Posterior std β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t). It vanishes at
        // t = 1, so step 1 borrows step 2's value.
        let posterior = |i: usize| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            betas[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
        };
        let sigma = (0..steps)
            .map(|i| {
                let var = match (i, steps) {
                    (0, 1) => betas[0],
                    (0, _) => posterior(1),
                    _ => posterior(i),
                };
                var.sqrt()
            })
            .collect();
        Ok(Self {
            betas,
            alpha_bar,
            sigma,
        })
    }

    /// Schedule from explicit cumulative signal coefficients and sampling
    /// standard deviations.
    pub fn from_parts(alpha_bar: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.len() != sigma.len() {
            return Err(Error::Config(
                "alpha_bar and sigma must be non-empty and equally long".into(),
            ));
        }
        if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("sigma must be positive and finite".into()));
        }
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(alpha_bar.len());
        for (i, &a) in alpha_bar.iter().enumerate() {
            let ok = a > 0.0 && a <= 1.0 && (if i == 0 { a <= prev } else { a < prev });
            if !ok {
                return Err(Error::Config(format!(
                    "alpha_bar must lie in (0, 1] and strictly decrease (index {i})"
                )));
            }
            betas.push(1.0 - a / prev);
            prev = a;
        }
        Ok(Self {
            betas,
            alpha_bar,
            sigma,
        })
    }

    /// Schedule from stored `β`, `ᾱ`, and σ, as written by a checkpoint.
    /// The three must agree to 1e-12; values are kept bit-for-bit.
    pub fn from_stored(betas: Vec<f64>, alpha_bar: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let derived = Self::from_parts(alpha_bar.clone(), sigma.clone())?;
        if betas.len() != derived.betas.len()
            || betas
                .iter()
                .zip(&derived.betas)
                .any(|(a, b)| (a - b).abs() > 1e-12)
        {
            return Err(Error::Config("beta does not match alpha_bar".into()));
        }
        Ok(Self {
            betas,
            alpha_bar,
            sigma,
        })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn steps(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(a, b)` with `μ = a·x_t − b·ε̂` for a noise-prediction network.
    pub fn mean_coefficients(&self, t: usize) -> (f64, f64) {
        let beta = self.beta(t);
        let alpha = 1.0 - beta;
        let one_minus_bar = 1.0 - self.alpha_bar(t);
        let a = 1.0 / alpha.sqrt();
        let b = if one_minus_bar > 0.0 {
            beta / (alpha.sqrt() * one_minus_bar.sqrt())
        } else {
            0.0
        };
        (a, b)
    }
}
