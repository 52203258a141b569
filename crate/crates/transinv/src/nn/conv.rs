//! 2-D cross-correlation via patch matrices (im2col) and GEMM.
//!
//! Padding is stored as a (lo, hi) pair applied to both spatial axes; the
//! symmetric case lo == hi == p matches the usual floor((H - K + 2P)/S) + 1
//! output-size law. Uneven pairs cover even kernel sizes where a framework
//! "same" convolution pads one side more than the other.

use rayon::prelude::*;

use super::{NnError, REDUCE_CHUNK};
use crate::tensor::{Scalar, ShapeError, Tensor};

#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    /// [out_channels, in_channels, k, k]
    pub kernels: Tensor<T>,
    /// [out_channels]
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(
        kernels: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self, NnError> {
        Self::with_pads(kernels, bias, stride, padding, padding)
    }

    pub fn with_pads(
        kernels: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        pad_lo: usize,
        pad_hi: usize,
    ) -> Result<Self, NnError> {
        let (oc, _ic, kh, kw) = kernels.dims4()?;
        if kh != kw {
            return Err(NnError::NonSquareKernel {
                shape: kernels.shape().to_vec(),
            });
        }
        if bias.len() != oc {
            return Err(ShapeError::DimMismatch {
                context: "conv bias length",
                expected: oc,
                got: bias.len(),
            }
            .into());
        }
        assert!(stride >= 1, "stride must be >= 1");
        Ok(ConvLayer {
            kernels,
            bias,
            stride,
            pad_lo,
            pad_hi,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    fn out_spatial(&self, size: usize, axis: &'static str) -> Result<usize, NnError> {
        let k = self.kernel_size();
        let padded = size + self.pad_lo + self.pad_hi;
        if padded < k {
            return Err(NnError::InputTooSmall {
                axis,
                size,
                kernel: k,
                pad_lo: self.pad_lo,
                pad_hi: self.pad_hi,
            });
        }
        Ok((padded - k) / self.stride + 1)
    }
}

/// Gather the receptive-field patches of one [C,H,W] plane into a
/// [C*K*K, OH*OW] row-major matrix. Out-of-image positions become zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad_lo: usize,
    oh: usize,
    ow: usize,
    patches: &mut [T],
) {
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(patches.len(), c * k * k * oh * ow);
    let plane = h * w;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad_lo as isize;
                    let dst = &mut patches[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = ci * plane + iy as usize * w;
                    if stride == 1 {
                        let ix0 = kj as isize - pad_lo as isize;
                        // valid ox range: 0 <= ox + ix0 < w
                        let start = (-ix0).max(0) as usize;
                        let end = ((w as isize - ix0).max(0) as usize).min(ow);
                        dst[..start.min(ow)].fill(T::zero());
                        if start < end {
                            dst[start..end].copy_from_slice(
                                &input[src_row + (ix0 + start as isize) as usize
                                    ..src_row + (ix0 + end as isize) as usize],
                            );
                        }
                        if end < ow {
                            dst[end..].fill(T::zero());
                        }
                    } else {
                        for (ox, slot) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad_lo as isize;
                            *slot = if ix >= 0 && ix < w as isize {
                                input[src_row + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto one [C,H,W] plane.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    patches: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad_lo: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let plane = h * w;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad_lo as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * plane + iy as usize * w;
                    let src = &patches[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad_lo as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst_row + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation: [N,C,H,W] -> [N,OC,OH,OW].
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
) -> Result<Tensor<T>, NnError> {
    let (n, c, h, w) = input.dims4()?;
    if c != layer.in_channels() {
        return Err(NnError::ChannelMismatch {
            expected: layer.in_channels(),
            got: c,
        });
    }
    let oh = layer.out_spatial(h, "height")?;
    let ow = layer.out_spatial(w, "width")?;
    let oc = layer.out_channels();
    let k = layer.kernel_size();
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[n, oc, oh, ow]);

    let in_plane = c * h * w;
    let out_plane = oc * oh * ow;
    let weights = layer.kernels.data();
    let bias = layer.bias.data();
    out.data_mut()
        .par_chunks_mut(out_plane)
        .zip(input.data().par_chunks(in_plane))
        .for_each(|(dst, src)| {
            let mut patches = vec![T::zero(); ckk * oh * ow];
            im2col(
                src,
                c,
                h,
                w,
                k,
                layer.stride,
                layer.pad_lo,
                oh,
                ow,
                &mut patches,
            );
            // dst[ocx, :] = bias[ocx], then += W [oc,ckk] * P [ckk,ohw]
            for (ocx, row) in dst.chunks_mut(oh * ow).enumerate() {
                row.fill(bias[ocx]);
            }
            T::gemm(
                oc,
                ckk,
                oh * ow,
                T::one(),
                weights,
                ckk,
                1,
                &patches,
                oh * ow,
                1,
                T::one(),
                dst,
                oh * ow,
                1,
            );
        });
    Ok(out)
}

/// Gradients of the forward pass: returns (grad_input, grad_kernels, grad_bias).
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    layer: &ConvLayer<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NnError> {
    let (n, c, h, w) = cached_input.dims4()?;
    if c != layer.in_channels() {
        return Err(NnError::ChannelMismatch {
            expected: layer.in_channels(),
            got: c,
        });
    }
    let oh = layer.out_spatial(h, "height")?;
    let ow = layer.out_spatial(w, "width")?;
    let oc = layer.out_channels();
    let expected = [n, oc, oh, ow];
    if grad_out.shape() != expected {
        return Err(ShapeError::DimMismatch {
            context: "conv grad_out shape",
            expected: expected.iter().product(),
            got: grad_out.len(),
        }
        .into());
    }
    let k = layer.kernel_size();
    let ckk = c * k * k;
    let in_plane = c * h * w;
    let out_plane = oc * oh * ow;
    let weights = layer.kernels.data();

    // Bias gradient: plain ordered sums.
    let mut grad_bias = Tensor::zeros(&[oc]);
    {
        let gb = grad_bias.data_mut();
        for sample in grad_out.data().chunks(out_plane) {
            for (ocx, row) in sample.chunks(oh * ow).enumerate() {
                let mut acc = T::zero();
                for &g in row {
                    acc += g;
                }
                gb[ocx] += acc;
            }
        }
    }

    // Kernel gradient: per-chunk partials, combined in chunk order.
    let partials: Vec<Vec<T>> = grad_out
        .data()
        .par_chunks(out_plane * REDUCE_CHUNK)
        .zip(cached_input.data().par_chunks(in_plane * REDUCE_CHUNK))
        .map(|(gouts, inputs)| {
            let mut partial = vec![T::zero(); oc * ckk];
            let mut patches = vec![T::zero(); ckk * oh * ow];
            for (gout, src) in gouts.chunks(out_plane).zip(inputs.chunks(in_plane)) {
                im2col(
                    src,
                    c,
                    h,
                    w,
                    k,
                    layer.stride,
                    layer.pad_lo,
                    oh,
                    ow,
                    &mut patches,
                );
                // partial [oc,ckk] += gout [oc,ohw] * P^T [ohw,ckk]
                T::gemm(
                    oc,
                    oh * ow,
                    ckk,
                    T::one(),
                    gout,
                    oh * ow,
                    1,
                    &patches,
                    1,
                    oh * ow,
                    T::one(),
                    &mut partial,
                    ckk,
                    1,
                );
            }
            partial
        })
        .collect();
    let mut grad_kernels = Tensor::zeros(layer.kernels.shape());
    {
        let gk = grad_kernels.data_mut();
        for partial in &partials {
            for (dst, &p) in gk.iter_mut().zip(partial) {
                *dst += p;
            }
        }
    }

    // Input gradient: per-sample, disjoint output planes.
    let mut grad_input = Tensor::zeros(&[n, c, h, w]);
    grad_input
        .data_mut()
        .par_chunks_mut(in_plane)
        .zip(grad_out.data().par_chunks(out_plane))
        .for_each(|(dst, gout)| {
            let mut dpatches = vec![T::zero(); ckk * oh * ow];
            // dP [ckk,ohw] = W^T [ckk,oc] * gout [oc,ohw]
            T::gemm(
                ckk,
                oc,
                oh * ow,
                T::one(),
                weights,
                1,
                ckk,
                gout,
                oh * ow,
                1,
                T::zero(),
                &mut dpatches,
                oh * ow,
                1,
            );
            col2im_add(
                &dpatches,
                c,
                h,
                w,
                k,
                layer.stride,
                layer.pad_lo,
                oh,
                ow,
                dst,
            );
        });

    Ok((grad_input, grad_kernels, grad_bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer_f64(
        oc: usize,
        ic: usize,
        k: usize,
        pad: usize,
        data: Vec<f64>,
        bias: Vec<f64>,
    ) -> ConvLayer<f64> {
        ConvLayer::new(
            Tensor::from_vec(&[oc, ic, k, k], data).unwrap(),
            Tensor::from_vec(&[oc], bias).unwrap(),
            1,
            pad,
        )
        .unwrap()
    }

    /// Seven-loop reference used as the oracle for the GEMM path.
    fn conv_naive(input: &Tensor<f64>, layer: &ConvLayer<f64>) -> Tensor<f64> {
        let (n, c, h, w) = input.dims4().unwrap();
        let k = layer.kernel_size();
        let oc = layer.out_channels();
        let oh = (h + layer.pad_lo + layer.pad_hi - k) / layer.stride + 1;
        let ow = (w + layer.pad_lo + layer.pad_hi - k) / layer.stride + 1;
        let mut out = Tensor::zeros(&[n, oc, oh, ow]);
        for ni in 0..n {
            for ocx in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = layer.bias.data()[ocx];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * layer.stride + ki) as isize
                                        - layer.pad_lo as isize;
                                    let ix = (ox * layer.stride + kj) as isize
                                        - layer.pad_lo as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        let iv = input.data()
                                            [((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                        let kv = layer.kernels.data()
                                            [((ocx * c + ci) * k + ki) * k + kj];
                                        acc += iv * kv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * oc + ocx) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn table_shape_law_same_padding() {
        // 40x40, K=5, P=2, S=1 keeps 40; no padding gives 36.
        let l = layer_f64(1, 1, 5, 2, vec![0.0; 25], vec![0.0]);
        let out = conv2d_forward(&Tensor::<f64>::zeros(&[1, 1, 40, 40]), &l).unwrap();
        assert_eq!(out.shape(), &[1, 1, 40, 40]);
        let l0 = layer_f64(1, 1, 5, 0, vec![0.0; 25], vec![0.0]);
        let out0 = conv2d_forward(&Tensor::<f64>::zeros(&[1, 1, 40, 40]), &l0).unwrap();
        assert_eq!(out0.shape(), &[1, 1, 36, 36]);
    }

    #[test]
    fn uneven_padding_keeps_even_kernel_size_same() {
        // K=4 with pads (1,2) reproduces the "same" geometry: 40 -> 40.
        let l = ConvLayer::with_pads(
            Tensor::<f64>::zeros(&[1, 1, 4, 4]),
            Tensor::zeros(&[1]),
            1,
            1,
            2,
        )
        .unwrap();
        let out = conv2d_forward(&Tensor::zeros(&[1, 1, 40, 40]), &l).unwrap();
        assert_eq!(out.shape(), &[1, 1, 40, 40]);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let l = layer_f64(1, 1, 1, 0, vec![1.0], vec![0.0]);
        let input =
            Tensor::from_vec(&[1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.0, 0.5, -0.25]).unwrap();
        let out = conv2d_forward(&input, &l).unwrap();
        assert_eq!(out.data(), input.data());
        // Identity Jacobian: grad_input == grad_out.
        let gout = Tensor::from_vec(&[1, 1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let (gin, _, _) = conv2d_backward(&gout, &input, &l).unwrap();
        assert_eq!(gin.data(), gout.data());
    }

    #[test]
    fn hand_enumerated_two_by_two_windows() {
        let input = Tensor::from_vec(
            &[1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let l = layer_f64(1, 1, 2, 0, vec![1.0; 4], vec![0.0]);
        let out = conv2d_forward(&input, &l).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let l = layer_f64(1, 2, 3, 0, vec![0.0; 18], vec![0.0]);
        let err = conv2d_forward(&Tensor::<f64>::zeros(&[1, 3, 8, 8]), &l).unwrap_err();
        assert!(matches!(
            err,
            NnError::ChannelMismatch {
                expected: 2,
                got: 3
            }
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = Tensor::from_vec(
            &[2, 2, 5, 5],
            (0..100).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let l = layer_f64(
            3,
            2,
            3,
            1,
            (0..54).map(|_| rng.random::<f64>()).collect(),
            vec![0.1, 0.2, 0.3],
        );
        let gout = Tensor::zeros(&[2, 3, 5, 5]);
        let (gi, gk, gb) = conv2d_backward(&gout, &input, &l).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gk.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        // random 1x2x6x6 input, K=3, f64, h = 1e-5, rel err 1e-4
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let input = Tensor::from_vec(
            &[1, 2, 6, 6],
            (0..72).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let l = layer_f64(
            2,
            2,
            3,
            1,
            (0..36).map(|_| rng.random::<f64>() - 0.5).collect(),
            vec![0.05, -0.1],
        );
        let functional: Vec<f64> = (0..72).map(|_| rng.random::<f64>() - 0.5).collect();
        let loss = |inp: &Tensor<f64>, layer: &ConvLayer<f64>| -> f64 {
            let out = conv2d_forward(inp, layer).unwrap();
            out.data()
                .iter()
                .zip(&functional)
                .map(|(o, f)| o * f)
                .sum()
        };
        let gout = Tensor::from_vec(&[1, 2, 6, 6], functional.clone()).unwrap();
        let (gi, gk, gb) = conv2d_backward(&gout, &input, &l).unwrap();

        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let fd = (loss(&plus, &l) - loss(&minus, &l)) / (2.0 * h);
            assert!(rel(gi.data()[i], fd) < 1e-4, "input grad {i}");
        }
        for i in 0..l.kernels.len() {
            let mut lp = l.clone();
            lp.kernels.data_mut()[i] += h;
            let mut lm = l.clone();
            lm.kernels.data_mut()[i] -= h;
            let fd = (loss(&input, &lp) - loss(&input, &lm)) / (2.0 * h);
            assert!(rel(gk.data()[i], fd) < 1e-4, "kernel grad {i}");
        }
        for i in 0..2 {
            let mut lp = l.clone();
            lp.bias.data_mut()[i] += h;
            let mut lm = l.clone();
            lm.bias.data_mut()[i] -= h;
            let fd = (loss(&input, &lp) - loss(&input, &lm)) / (2.0 * h);
            assert!(rel(gb.data()[i], fd) < 1e-4, "bias grad {i}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn gemm_path_matches_naive_reference(
            n in 1usize..=2, c in 1usize..=3, oc in 1usize..=3,
            hw in 4usize..=12, k in 1usize..=4, pad in 0usize..=2,
            seed in 0u64..1000,
        ) {
            prop_assume!(hw + 2 * pad >= k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = Tensor::from_vec(
                &[n, c, hw, hw],
                (0..n * c * hw * hw).map(|_| rng.random::<f64>() - 0.5).collect(),
            ).unwrap();
            let layer = layer_f64(
                oc, c, k, pad,
                (0..oc * c * k * k).map(|_| rng.random::<f64>() - 0.5).collect(),
                (0..oc).map(|_| rng.random::<f64>() - 0.5).collect(),
            );
            let fast = conv2d_forward(&input, &layer).unwrap();
            let slow = conv_naive(&input, &layer);
            prop_assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
