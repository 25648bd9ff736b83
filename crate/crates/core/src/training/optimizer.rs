use crate::numerics::{Gradients, ParamStore, Scalar, Tensor};

use super::TrainingConfig;

/// Adam moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub(crate) first_moment: Vec<Tensor<F>>,
    pub(crate) second_moment: Vec<Tensor<F>>,
    step_count: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        Self::at_step(params, 0)
    }

    pub fn at_step(params: &ParamStore<F>, step: u64) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: step,
        }
    }

    pub(crate) fn from_parts(first: Vec<Tensor<F>>, second: Vec<Tensor<F>>, step: u64) -> Self {
        Self {
            first_moment: first,
            second_moment: second,
            step_count: step,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor<F>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor<F>] {
        &self.second_moment
    }

    pub(crate) fn skip(&mut self) {
        self.step_count += 1;
    }

    /// Bias-corrected Adam step with learning rate `lr`.
    pub(crate) fn update(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64, cfg: &TrainingConfig) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let step_size = F::from_f64_lossy(lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t)));
        let eps = F::from_f64_lossy(cfg.adam_eps);
        let (b1f, b2f) = (F::from_f64_lossy(b1), F::from_f64_lossy(b2));
        let (c1, c2) = (F::from_f64_lossy(1.0 - b1), F::from_f64_lossy(1.0 - b2));

        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = params.get_mut(id).value.data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1f * m[j] + c1 * gj;
                v[j] = b2f * v[j] + c2 * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}
