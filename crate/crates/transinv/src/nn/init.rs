//! He (Kaiming) initialization: zero-mean Gaussian with variance 2/fan_in.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::NnError;
use crate::tensor::{Scalar, Tensor};

pub fn he_init<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor<T>, NnError> {
    if fan_in == 0 {
        return Err(NnError::ZeroFanIn);
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).map_err(Into::into)
}
