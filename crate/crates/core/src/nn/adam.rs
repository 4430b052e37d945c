use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor4;
use crate::scalar::Scalar;

pub const DEFAULT_LEARNING_RATE: f64 = 0.0005;

/// Bias-corrected ADAM moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub(crate) first: Vec<Tensor4<T>>,
    pub(crate) second: Vec<Tensor4<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, learning_rate: f64) -> Self {
        let mut first = Vec::with_capacity(params.len());
        let mut second = Vec::with_capacity(params.len());
        // indexed by ParamId, not name order
        for i in 0..params.len() {
            let shape = params.get(crate::nn::params::ParamId(i)).value.shape();
            first.push(Tensor4::zeros(shape));
            second.push(Tensor4::zeros(shape));
        }
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first,
            second,
        }
    }

    pub fn first_moment(&self, id: crate::nn::params::ParamId) -> &Tensor4<T> {
        &self.first[id.0]
    }

    pub fn second_moment(&self, id: crate::nn::params::ParamId) -> &Tensor4<T> {
        &self.second[id.0]
    }

    pub(crate) fn moments_mut(
        &mut self,
        id: crate::nn::params::ParamId,
    ) -> (&mut Tensor4<T>, &mut Tensor4<T>) {
        (&mut self.first[id.0], &mut self.second[id.0])
    }
}

/// One ADAM update from the gradients currently held in `params`.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(state.beta1);
    let b2 = T::lit(state.beta2);
    let lr = T::lit(state.learning_rate);
    let eps = T::lit(state.epsilon);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let p = params.get_mut(id);
        let m = state.first[id.0].as_mut_slice();
        let v = state.second[id.0].as_mut_slice();
        for (((w, &g), m), v) in p
            .value
            .as_mut_slice()
            .iter_mut()
            .zip(p.grad.as_slice())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
