use rand::Rng as _;

use crate::autodiff::{matmul, Bindings, GraphBuilder, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::NoiseSchedule;

/// A batch of denoising-step queries `(x_t, c, t)`, one per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepRows {
    dim: usize,
    states: Vec<f64>,
    prompts: Vec<usize>,
    steps: Vec<usize>,
}

impl StepRows {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn push(&mut self, x: &[f64], prompt: usize, t: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.states.extend_from_slice(x);
        self.prompts.push(prompt);
        self.steps.push(t);
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, row: usize) -> &[f64] {
        &self.states[row * self.dim..(row + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn prompt(&self, row: usize) -> usize {
        self.prompts[row]
    }

    pub fn step(&self, row: usize) -> usize {
        self.steps[row]
    }
}

/// A Gaussian denoising policy `π(x_{t−1} | x_t, c) = N(μ(x_t, c, t), σ_t² I)`
/// with learnable mean and the schedule's fixed σ_t.
pub trait DenoisingPolicy: Send + Sync {
    fn state_dim(&self) -> usize;

    fn prompt_count(&self) -> usize;

    /// Means for every row, row-major `[rows, d]`.
    fn means(&self, schedule: &NoiseSchedule, rows: &StepRows) -> Vec<f64>;

    fn mean(&self, schedule: &NoiseSchedule, x: &[f64], prompt: usize, t: usize) -> Vec<f64> {
        let mut rows = StepRows::new(self.state_dim());
        rows.push(x, prompt, t);
        self.means(schedule, &rows)
    }

    /// Learnable parameters, bound by name to graph inputs.
    fn params(&self) -> &Bindings;

    fn params_mut(&mut self) -> &mut Bindings;

    /// Appends nodes computing the `[rows, d]` means, declaring every
    /// parameter as a graph input under its name.
    fn mean_node(&self, g: &mut GraphBuilder, schedule: &NoiseSchedule, rows: &StepRows) -> NodeId;
}

/// Shape of a [`PolicyNet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyArch {
    pub state_dim: usize,
    pub prompt_count: usize,
    pub hidden: Vec<usize>,
}

impl PolicyArch {
    /// State, one-hot prompt, and normalized timestep.
    pub fn input_dim(&self) -> usize {
        self.state_dim + self.prompt_count + 1
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.state_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Feed-forward noise-prediction network. Hidden layers use `tanh`; the
/// mean is `μ = a_t x_t − b_t ε̂(x_t, c, t)` with the schedule's DDPM
/// coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    arch: PolicyArch,
    params: Bindings,
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

impl PolicyNet {
    /// Xavier-uniform hidden weights, zero biases, zero output layer.
    pub fn new(arch: PolicyArch, rng: &mut Rng) -> Result<Self> {
        if arch.state_dim == 0 || arch.prompt_count == 0 || arch.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "invalid policy architecture {arch:?}"
            )));
        }
        let layers = arch.layer_dims();
        let mut params = Bindings::new();
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let last = l + 1 == layers.len();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| {
                    if last {
                        0.0
                    } else {
                        rng.random_range(-bound..bound)
                    }
                })
                .collect();
            params.insert(weight_name(l), Tensor::new(vec![fan_in, fan_out], w)?);
            params.insert(bias_name(l), Tensor::zeros(&[fan_out]));
        }
        Ok(Self { arch, params })
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_params(arch: PolicyArch, params: Bindings) -> Result<Self> {
        let layers = arch.layer_dims();
        if params.len() != 2 * layers.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                2 * layers.len(),
                params.len()
            )));
        }
        for (l, &(i, o)) in layers.iter().enumerate() {
            let w = params.get(&weight_name(l));
            let b = params.get(&bias_name(l));
            if w.map(|t| t.shape()) != Some(&[i, o][..]) || b.map(|t| t.shape()) != Some(&[o][..]) {
                return Err(Error::Config(format!(
                    "layer {l} parameters have wrong shapes"
                )));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.arch
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn features(&self, schedule: &NoiseSchedule, rows: &StepRows) -> Vec<f64> {
        let (d, c) = (self.arch.state_dim, self.arch.prompt_count);
        let width = self.arch.input_dim();
        let steps = schedule.steps() as f64;
        let mut f = vec![0.0; rows.len() * width];
        for r in 0..rows.len() {
            let row = &mut f[r * width..(r + 1) * width];
            row[..d].copy_from_slice(rows.state(r));
            row[d + rows.prompt(r)] = 1.0;
            row[d + c] = rows.step(r) as f64 / steps;
        }
        f
    }

    fn coefficient_rows(&self, schedule: &NoiseSchedule, rows: &StepRows) -> (Vec<f64>, Vec<f64>) {
        let d = self.arch.state_dim;
        let mut scaled_x = Vec::with_capacity(rows.len() * d);
        let mut eps_coef = Vec::with_capacity(rows.len() * d);
        for r in 0..rows.len() {
            let (a, b) = schedule.mean_coefficients(rows.step(r));
            scaled_x.extend(rows.state(r).iter().map(|x| a * x));
            eps_coef.extend(std::iter::repeat_n(b, d));
        }
        (scaled_x, eps_coef)
    }

    /// Raw network output `ε̂` for every row.
    pub fn predict_noise(&self, schedule: &NoiseSchedule, rows: &StepRows) -> Vec<f64> {
        let m = rows.len();
        let layers = self.arch.layer_dims();
        let mut h = self.features(schedule, rows);
        for (l, &(i, o)) in layers.iter().enumerate() {
            let w = self.params[&weight_name(l)].data();
            let b = self.params[&bias_name(l)].data();
            let mut z = matmul(&h, w, m, i, o);
            let last = l + 1 == layers.len();
            for (k, v) in z.iter_mut().enumerate() {
                *v += b[k % o];
                if !last {
                    *v = v.tanh();
                }
            }
            h = z;
        }
        h
    }

    /// Graph nodes for `ε̂`, `[rows, d]`.
    pub fn noise_node(
        &self,
        g: &mut GraphBuilder,
        schedule: &NoiseSchedule,
        rows: &StepRows,
    ) -> NodeId {
        let m = rows.len();
        let layers = self.arch.layer_dims();
        let feats = Tensor::from_parts_unchecked(
            vec![m, self.arch.input_dim()],
            self.features(schedule, rows),
        );
        let mut h = g.constant(feats);
        for (l, &(i, o)) in layers.iter().enumerate() {
            let w = g.input(&weight_name(l), &[i, o]);
            let b = g.input(&bias_name(l), &[o]);
            let z = g.matmul(h, w);
            let z = g.add_row(z, b);
            h = if l + 1 == layers.len() { z } else { g.tanh(z) };
        }
        h
    }
}

impl DenoisingPolicy for PolicyNet {
    fn state_dim(&self) -> usize {
        self.arch.state_dim
    }

    fn prompt_count(&self) -> usize {
        self.arch.prompt_count
    }

    fn means(&self, schedule: &NoiseSchedule, rows: &StepRows) -> Vec<f64> {
        let eps = self.predict_noise(schedule, rows);
        let (scaled_x, coef) = self.coefficient_rows(schedule, rows);
        scaled_x
            .iter()
            .zip(&coef)
            .zip(&eps)
            .map(|((x, b), e)| x - b * e)
            .collect()
    }

    fn params(&self) -> &Bindings {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Bindings {
        &mut self.params
    }

    fn mean_node(&self, g: &mut GraphBuilder, schedule: &NoiseSchedule, rows: &StepRows) -> NodeId {
        let m = rows.len();
        let d = self.arch.state_dim;
        let eps = self.noise_node(g, schedule, rows);
        let (scaled_x, coef) = self.coefficient_rows(schedule, rows);
        let x = g.constant(Tensor::from_parts_unchecked(vec![m, d], scaled_x));
        let b = g.constant(Tensor::from_parts_unchecked(vec![m, d], coef));
        let be = g.mul(b, eps);
        g.sub(x, be)
    }
}
