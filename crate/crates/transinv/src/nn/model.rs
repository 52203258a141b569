//! The full network: conv -> relu -> pool, three times, then a hidden dense
//! layer and the 10-way output. Two tap points are exposed for probing:
//! `conv_final` (the flattened post-pool-3 activation the dense stage
//! consumes) and `fc_out` (the pre-softmax output vector).

use std::str::FromStr;

use rand::Rng;

use super::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, he_init, maxpool2d_backward,
    maxpool2d_forward, relu, relu_backward, ConvLayer, DenseLayer, MaxPoolLayer, NnError,
    PoolIndices,
};
use crate::arch::{pad_pair, ArchSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    ConvFinal,
    FcOut,
}

impl Tap {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tap::ConvFinal => "conv_final",
            Tap::FcOut => "fc_out",
        }
    }
}

impl FromStr for Tap {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self, NnError> {
        match s {
            "conv_final" => Ok(Tap::ConvFinal),
            "fc_out" => Ok(Tap::FcOut),
            other => Err(NnError::UnknownTap(other.to_string())),
        }
    }
}

const POOL: MaxPoolLayer = MaxPoolLayer {
    kernel: 2,
    stride: 2,
};

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: ArchSpec,
    pub conv: Vec<ConvLayer<T>>,
    pub fc1: DenseLayer<T>,
    pub fc2: DenseLayer<T>,
}

/// Activations a backward pass needs, cached by `forward_cached`.
pub struct ForwardTrace<T> {
    batch: usize,
    conv_inputs: Vec<Tensor<T>>,   // input to each conv layer
    conv_preact: Vec<Tensor<T>>,   // conv output before relu
    pool_indices: Vec<PoolIndices>,
    flat: Tensor<T>,               // [N, conv_output_dim]
    fc1_preact: Tensor<T>,
    fc1_act: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Per-parameter gradients in canonical parameter order.
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// He-initialized parameters, zero biases. The RNG is consumed in
    /// canonical parameter order, so a seed pins every weight.
    pub fn init<R: Rng>(arch: &ArchSpec, rng: &mut R) -> Result<Self, NnError> {
        arch.validate().expect("validated arch");
        let mut conv = Vec::with_capacity(3);
        let mut in_c = arch.input[0];
        for block in &arch.conv_blocks {
            let fan_in = in_c * block.kernel * block.kernel;
            let kernels = he_init(
                &[block.channels, in_c, block.kernel, block.kernel],
                fan_in,
                rng,
            )?;
            let (lo, hi) = pad_pair(block.kernel, block.padding);
            conv.push(ConvLayer::with_pads(
                kernels,
                Tensor::zeros(&[block.channels]),
                block.stride,
                lo,
                hi,
            )?);
            in_c = block.channels;
        }
        let flat_dim = arch.conv_output_dim().expect("validated arch");
        let fc1 = DenseLayer::new(
            he_init(&[arch.hidden_units, flat_dim], flat_dim, rng)?,
            Tensor::zeros(&[arch.hidden_units]),
        )?;
        let fc2 = DenseLayer::new(
            he_init(&[arch.output_units, arch.hidden_units], arch.hidden_units, rng)?,
            Tensor::zeros(&[arch.output_units]),
        )?;
        Ok(Model {
            arch: arch.clone(),
            conv,
            fc1,
            fc2,
        })
    }

    pub fn from_parts(
        arch: ArchSpec,
        conv: Vec<ConvLayer<T>>,
        fc1: DenseLayer<T>,
        fc2: DenseLayer<T>,
    ) -> Self {
        Model {
            arch,
            conv,
            fc1,
            fc2,
        }
    }

    /// Parameter tensors in canonical (checkpoint) order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::with_capacity(10);
        for c in &self.conv {
            v.push(&c.kernels);
            v.push(&c.bias);
        }
        v.push(&self.fc1.weights);
        v.push(&self.fc1.bias);
        v.push(&self.fc2.weights);
        v.push(&self.fc2.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::with_capacity(10);
        for c in &mut self.conv {
            v.push(&mut c.kernels);
            v.push(&mut c.bias);
        }
        v.push(&mut self.fc1.weights);
        v.push(&mut self.fc1.bias);
        v.push(&mut self.fc2.weights);
        v.push(&mut self.fc2.bias);
        v
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }

    fn conv_stack(
        &self,
        batch: &Tensor<T>,
        mut observe: impl FnMut(usize, &Tensor<T>, &Tensor<T>, &PoolIndices),
    ) -> Result<Tensor<T>, NnError> {
        let mut x = batch.clone();
        for (i, layer) in self.conv.iter().enumerate() {
            let pre = conv2d_forward(&x, layer)?;
            let act = relu(&pre);
            let (pooled, idx) = maxpool2d_forward(&act, &POOL)?;
            observe(i, &x, &pre, &idx);
            x = pooled;
        }
        Ok(x)
    }

    fn flatten(pooled: Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (n, c, h, w) = pooled.dims4()?;
        Ok(pooled.reshape(&[n, c * h * w])?)
    }

    /// Forward pass retaining everything `backward` needs.
    pub fn forward_cached(&self, batch: &Tensor<T>) -> Result<ForwardTrace<T>, NnError> {
        let n = batch.dims4()?.0;
        let mut conv_inputs = Vec::with_capacity(3);
        let mut conv_preact = Vec::with_capacity(3);
        let mut pool_indices = Vec::with_capacity(3);
        let pooled = self.conv_stack(batch, |_, x, pre, idx| {
            conv_inputs.push(x.clone());
            conv_preact.push(pre.clone());
            pool_indices.push(idx.clone());
        })?;
        let flat = Self::flatten(pooled)?;
        let fc1_preact = dense_forward(&flat, &self.fc1)?;
        let fc1_act = relu(&fc1_preact);
        let logits = dense_forward(&fc1_act, &self.fc2)?;
        Ok(ForwardTrace {
            batch: n,
            conv_inputs,
            conv_preact,
            pool_indices,
            flat,
            fc1_preact,
            fc1_act,
            logits,
        })
    }

    /// Inference-only pass; optionally also returns the flattened
    /// post-pool-3 activation (the `conv_final` tap).
    pub fn forward_infer(
        &self,
        batch: &Tensor<T>,
        want_conv_final: bool,
    ) -> Result<(Option<Tensor<T>>, Tensor<T>), NnError> {
        let pooled = self.conv_stack(batch, |_, _, _, _| {})?;
        let flat = Self::flatten(pooled)?;
        let fc1_act = relu(&dense_forward(&flat, &self.fc1)?);
        let logits = dense_forward(&fc1_act, &self.fc2)?;
        Ok((want_conv_final.then_some(flat), logits))
    }

    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        Ok(self.forward_infer(batch, false)?.1)
    }

    /// Post-ReLU output of the last conv layer (before its pool), as
    /// [N, C3, H3, W3]. This is what the feature-map dumps visualize.
    pub fn final_conv_activation(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut captured = None;
        self.conv_stack(batch, |i, _, pre, _| {
            if i == 2 {
                captured = Some(relu(pre));
            }
        })?;
        Ok(captured.expect("three conv blocks"))
    }

    /// Tap vectors per sample plus the logits, as a single pass.
    pub fn forward_with_tap(
        &self,
        batch: &Tensor<T>,
        tap: Tap,
    ) -> Result<(Vec<Vec<T>>, Tensor<T>), NnError> {
        let (flat, logits) = self.forward_infer(batch, tap == Tap::ConvFinal)?;
        let source = match tap {
            Tap::ConvFinal => flat.as_ref().unwrap(),
            Tap::FcOut => &logits,
        };
        let dim = source.shape()[1];
        let vectors = source.data().chunks(dim).map(|c| c.to_vec()).collect();
        Ok((vectors, logits))
    }

    /// Backpropagate `grad_logits` through the cached activations.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<Gradients<T>, NnError> {
        let (d_fc1_act, d_w2, d_b2) = dense_backward(grad_logits, &trace.fc1_act, &self.fc2)?;
        let d_fc1_pre = relu_backward(&d_fc1_act, &trace.fc1_preact)?;
        let (d_flat, d_w1, d_b1) = dense_backward(&d_fc1_pre, &trace.flat, &self.fc1)?;

        let [_, c3, h3, w3] = trace.pool_indices[2].output_shape;
        let mut d_pooled = d_flat.reshape(&[trace.batch, c3, h3, w3])?;
        let mut conv_grads = Vec::with_capacity(3);
        for i in (0..3).rev() {
            let d_act = maxpool2d_backward(
                &d_pooled,
                &trace.pool_indices[i],
                trace.conv_preact[i].shape(),
            )?;
            let d_pre = relu_backward(&d_act, &trace.conv_preact[i])?;
            let (d_input, d_k, d_b) = conv2d_backward(&d_pre, &trace.conv_inputs[i], &self.conv[i])?;
            conv_grads.push((d_k, d_b));
            d_pooled = d_input;
        }
        conv_grads.reverse();

        let mut tensors = Vec::with_capacity(10);
        for (d_k, d_b) in conv_grads {
            tensors.push(d_k);
            tensors.push(d_b);
        }
        tensors.push(d_w1);
        tensors.push(d_b1);
        tensors.push(d_w2);
        tensors.push(d_b2);
        Ok(Gradients { tensors })
    }
}
