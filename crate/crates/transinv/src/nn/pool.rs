//! Max pooling. Output size uses floor division, so an odd trailing
//! row/column is dropped (11 -> 5 with the 2/2 pool). Ties go to the first
//! (row-major lowest) index, which fixes gradient routing.

use rayon::prelude::*;

use super::NnError;
use crate::tensor::{Scalar, ShapeError, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct MaxPoolLayer {
    pub kernel: usize,
    pub stride: usize,
}

/// Winning positions of a pooling forward pass, consumed by the backward.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    pub input_shape: [usize; 4],
    pub output_shape: [usize; 4],
    /// Flat index into the H*W plane of the winning element, one per output cell.
    pub argmax: Vec<u32>,
}

pub fn maxpool2d_forward<T: Scalar>(
    input: &Tensor<T>,
    layer: &MaxPoolLayer,
) -> Result<(Tensor<T>, PoolIndices), NnError> {
    let (n, c, h, w) = input.dims4()?;
    let k = layer.kernel;
    let s = layer.stride;
    if h < k || w < k {
        return Err(NnError::InputTooSmall {
            axis: "height/width",
            size: h.min(w),
            kernel: k,
            pad_lo: 0,
            pad_hi: 0,
        });
    }
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];

    let in_plane = h * w;
    let out_plane = oh * ow;
    out.data_mut()
        .par_chunks_mut(out_plane)
        .zip(argmax.par_chunks_mut(out_plane))
        .zip(input.data().par_chunks(in_plane))
        .for_each(|((dst, idx), src)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = src[oy * s * w + ox * s];
                    let mut best_at = oy * s * w + ox * s;
                    for ki in 0..k {
                        for kj in 0..k {
                            let at = (oy * s + ki) * w + ox * s + kj;
                            if src[at] > best {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    idx[oy * ow + ox] = best_at as u32;
                }
            }
        });

    Ok((
        out,
        PoolIndices {
            input_shape: [n, c, h, w],
            output_shape: [n, c, oh, ow],
            argmax,
        },
    ))
}

pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    indices: &PoolIndices,
    input_shape: &[usize],
) -> Result<Tensor<T>, NnError> {
    if input_shape != indices.input_shape {
        return Err(NnError::StalePoolIndices {
            reason: format!(
                "indices were built for input {:?}, not {:?}",
                indices.input_shape, input_shape
            ),
        });
    }
    if grad_out.shape() != indices.output_shape {
        return Err(NnError::StalePoolIndices {
            reason: format!(
                "grad_out shape {:?} does not match pooled shape {:?}",
                grad_out.shape(),
                indices.output_shape
            ),
        });
    }
    let [_, _, h, w] = indices.input_shape;
    let [_, _, oh, ow] = indices.output_shape;
    let in_plane = h * w;
    let out_plane = oh * ow;
    let mut grad_input = Tensor::zeros(input_shape);
    let planes = grad_input.data_mut().par_chunks_mut(in_plane);
    let mut bad = false;
    // validate indices up front so the scatter below cannot misroute
    for &at in &indices.argmax {
        if at as usize >= in_plane {
            bad = true;
            break;
        }
    }
    if bad {
        return Err(NnError::StalePoolIndices {
            reason: "argmax entry outside the input plane".into(),
        });
    }
    planes
        .zip(grad_out.data().par_chunks(out_plane))
        .zip(indices.argmax.par_chunks(out_plane))
        .for_each(|((dst, gout), idx)| {
            for (&g, &at) in gout.iter().zip(idx) {
                dst[at as usize] += g;
            }
        });
    Ok(grad_input)
}

impl MaxPoolLayer {
    pub fn out_spatial(&self, size: usize) -> Result<usize, ShapeError> {
        if size < self.kernel {
            return Err(ShapeError::DimMismatch {
                context: "pool input smaller than kernel",
                expected: self.kernel,
                got: size,
            });
        }
        Ok((size - self.kernel) / self.stride + 1)
    }
}
