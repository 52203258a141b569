//! Fully connected layer: y = x W^T + b with weights stored [out, in].

use super::NnError;
use crate::tensor::{Scalar, ShapeError, Tensor};

#[derive(Clone, Debug)]
pub struct DenseLayer<T> {
    /// [out_features, in_features]
    pub weights: Tensor<T>,
    /// [out_features]
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self, NnError> {
        let (out_f, _in_f) = weights.dims2()?;
        if bias.len() != out_f {
            return Err(ShapeError::DimMismatch {
                context: "dense bias length",
                expected: out_f,
                got: bias.len(),
            }
            .into());
        }
        Ok(DenseLayer { weights, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }
}

pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    layer: &DenseLayer<T>,
) -> Result<Tensor<T>, NnError> {
    let (n, in_f) = input.dims2()?;
    if in_f != layer.in_features() {
        return Err(ShapeError::DimMismatch {
            context: "dense input features",
            expected: layer.in_features(),
            got: in_f,
        }
        .into());
    }
    let out_f = layer.out_features();
    let mut out = Tensor::zeros(&[n, out_f]);
    for row in out.data_mut().chunks_mut(out_f) {
        row.copy_from_slice(layer.bias.data());
    }
    // Y [n,out] += X [n,in] * W^T [in,out]
    T::gemm(
        n,
        in_f,
        out_f,
        T::one(),
        input.data(),
        in_f,
        1,
        layer.weights.data(),
        1,
        in_f,
        T::one(),
        out.data_mut(),
        out_f,
        1,
    );
    Ok(out)
}

/// Returns (grad_input, grad_weights, grad_bias).
pub fn dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    layer: &DenseLayer<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NnError> {
    let (n, in_f) = cached_input.dims2()?;
    let (gn, out_f) = grad_out.dims2()?;
    if gn != n {
        return Err(ShapeError::DimMismatch {
            context: "dense grad_out batch",
            expected: n,
            got: gn,
        }
        .into());
    }
    if out_f != layer.out_features() || in_f != layer.in_features() {
        return Err(ShapeError::DimMismatch {
            context: "dense grad_out features",
            expected: layer.out_features(),
            got: out_f,
        }
        .into());
    }

    // dX [n,in] = dY [n,out] * W [out,in]
    let mut grad_input = Tensor::zeros(&[n, in_f]);
    T::gemm(
        n,
        out_f,
        in_f,
        T::one(),
        grad_out.data(),
        out_f,
        1,
        layer.weights.data(),
        in_f,
        1,
        T::zero(),
        grad_input.data_mut(),
        in_f,
        1,
    );

    // dW [out,in] = dY^T [out,n] * X [n,in]
    let mut grad_weights = Tensor::zeros(&[out_f, in_f]);
    T::gemm(
        out_f,
        n,
        in_f,
        T::one(),
        grad_out.data(),
        1,
        out_f,
        cached_input.data(),
        in_f,
        1,
        T::zero(),
        grad_weights.data_mut(),
        in_f,
        1,
    );

    let mut grad_bias = Tensor::zeros(&[out_f]);
    {
        let gb = grad_bias.data_mut();
        for row in grad_out.data().chunks(out_f) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
    }

    Ok((grad_input, grad_weights, grad_bias))
}
