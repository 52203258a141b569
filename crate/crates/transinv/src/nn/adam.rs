//! Adam with bias correction. One `adam_step` call updates every parameter
//! tensor of the model and advances the shared step counter by exactly one.

use serde::{Deserialize, Serialize};

use super::NnError;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    pub step_count: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(hyper: AdamHyper, param_shapes: &[&[usize]]) -> Self {
        AdamState {
            hyper,
            step_count: 0,
            first_moment: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    learning_rate: f64,
) -> Result<(), NnError> {
    if grads.len() != params.len() {
        return Err(NnError::AdamArity {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if state.first_moment.len() != params.len() {
        return Err(NnError::AdamArity {
            expected: params.len(),
            got: state.first_moment.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(NnError::AdamShapeMismatch {
                index: i,
                param: p.shape().to_vec(),
                what: "gradient",
                other: g.shape().to_vec(),
            });
        }
        if p.shape() != state.first_moment[i].shape() {
            return Err(NnError::AdamShapeMismatch {
                index: i,
                param: p.shape().to_vec(),
                what: "moment",
                other: state.first_moment[i].shape().to_vec(),
            });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = T::from_f64(state.hyper.beta1);
    let b2 = T::from_f64(state.hyper.beta2);
    let one = T::one();
    // bias corrections in f64 so both precisions see the same scalars
    let bc1 = T::from_f64(1.0 - state.hyper.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - state.hyper.beta2.powi(t));
    let eps = T::from_f64(state.hyper.epsilon);
    let lr = T::from_f64(learning_rate);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(&mut state.second_moment))
    {
        let m = m.data_mut();
        let v = v.data_mut();
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = b1 * m[i] + (one - b1) * gv;
            v[i] = b2 * v[i] + (one - b2) * gv * gv;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
