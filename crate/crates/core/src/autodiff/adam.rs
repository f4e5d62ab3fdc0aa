use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment tensors per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig, params: &ParamStore<F>) -> Self {
        let zeros = |id| Tensor::zeros(params.get(id).dims());
        AdamState {
            config,
            step: 0,
            first: params.ids().map(zeros).collect(),
            second: params.ids().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor<F> {
        &self.first[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor<F> {
        &self.second[id.index()]
    }

    /// Applies one update. Parameters without a gradient entry are treated as
    /// having a zero gradient (their moments still decay).
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>) -> Result<()> {
        for (id, g) in grads.iter() {
            if g.dims() != params.get(id).dims() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: grad {:?} vs param {:?}", params.name(id), g.dims(), params.get(id).dims()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient for {}", params.name(id))));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bc1 = F::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = F::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = F::of(c.learning_rate);
        let eps = F::of(c.epsilon);
        for id in params.ids().collect::<Vec<_>>() {
            let grad = grads.param(id);
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            match grad {
                None => {
                    for j in 0..m.len() {
                        m[j] = b1 * m[j];
                        v[j] = b2 * v[j];
                    }
                }
                Some(g) => {
                    let p = params.get_mut(id).data_mut();
                    for (j, &gj) in g.data().iter().enumerate() {
                        m[j] = b1 * m[j] + (F::one() - b1) * gj;
                        v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
