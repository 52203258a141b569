//! Rectified linear activation.

use super::NnError;
use crate::tensor::{Scalar, ShapeError, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Masks the incoming gradient where the cached pre-activation was <= 0.
pub fn relu_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    if grad_out.shape() != cached_input.shape() {
        return Err(ShapeError::DimMismatch {
            context: "relu grad_out length",
            expected: cached_input.len(),
            got: grad_out.len(),
        }
        .into());
    }
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(cached_input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(out)
}
