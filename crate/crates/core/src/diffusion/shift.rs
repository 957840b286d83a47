use crate::autodiff::{Bindings, GraphBuilder, NodeId, Tensor};

use super::{DenoisingPolicy, NoiseSchedule, StepRows};

/// Minimal policy family `μ(x_t, c, t) = s·x_t + θ_t`, with one learnable
/// shift vector per step shared by all prompts. With `s = 0` and `θ = 0` it
/// is the zero-mean policy. Useful where a hand-checkable model is needed.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftPolicy {
    scale: f64,
    prompt_count: usize,
    params: Bindings,
}

pub const SHIFT_PARAM: &str = "shift";

impl ShiftPolicy {
    pub fn new(scale: f64, steps: usize, dim: usize, prompt_count: usize) -> Self {
        let mut params = Bindings::new();
        params.insert(SHIFT_PARAM.to_string(), Tensor::zeros(&[steps, dim]));
        Self {
            scale,
            prompt_count,
            params,
        }
    }

    pub fn with_shifts(scale: f64, shifts: Vec<Vec<f64>>, prompt_count: usize) -> Self {
        let (steps, dim) = (shifts.len(), shifts[0].len());
        let mut p = Self::new(scale, steps, dim, prompt_count);
        let flat: Vec<f64> = shifts.into_iter().flatten().collect();
        p.params
            .insert(SHIFT_PARAM.to_string(), Tensor::matrix(steps, dim, flat));
        p
    }

    pub fn shift(&self, t: usize) -> &[f64] {
        let d = self.state_dim();
        &self.params[SHIFT_PARAM].data()[(t - 1) * d..t * d]
    }

    pub fn set_shift(&mut self, t: usize, value: &[f64]) {
        let d = self.state_dim();
        self.params
            .get_mut(SHIFT_PARAM)
            .expect("shift param")
            .map_inplace(|i, v| if i / d == t - 1 { value[i % d] } else { v });
    }
}

impl DenoisingPolicy for ShiftPolicy {
    fn state_dim(&self) -> usize {
        self.params[SHIFT_PARAM].shape()[1]
    }

    fn prompt_count(&self) -> usize {
        self.prompt_count
    }

    fn means(&self, _schedule: &NoiseSchedule, rows: &StepRows) -> Vec<f64> {
        let d = self.state_dim();
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in 0..rows.len() {
            let shift = self.shift(rows.step(r));
            out.extend(
                rows.state(r)
                    .iter()
                    .zip(shift)
                    .map(|(x, s)| self.scale * x + s),
            );
        }
        out
    }

    fn params(&self) -> &Bindings {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Bindings {
        &mut self.params
    }

    fn mean_node(
        &self,
        g: &mut GraphBuilder,
        _schedule: &NoiseSchedule,
        rows: &StepRows,
    ) -> NodeId {
        let d = self.state_dim();
        let shape = self.params[SHIFT_PARAM].shape().to_vec();
        let theta = g.input(SHIFT_PARAM, &shape);
        let flat = g.reshape(theta, &[shape[0] * shape[1]]);
        let idx: Vec<usize> = (0..rows.len())
            .flat_map(|r| {
                let t = rows.step(r);
                (0..d).map(move |i| (t - 1) * d + i)
            })
            .collect();
        let picked = g.gather(flat, idx);
        let picked = g.reshape(picked, &[rows.len(), d]);
        let sx: Vec<f64> = rows.states().iter().map(|x| self.scale * x).collect();
        let sx = g.constant(Tensor::new(vec![rows.len(), d], sx).expect("finite states"));
        g.add(sx, picked)
    }
}
