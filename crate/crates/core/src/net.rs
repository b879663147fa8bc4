//! Sequential layer stacks: parameter containers, initialization, and the
//! forward/backward plumbing shared by the segmenter and the quality nets.

use crate::error::{Error, Result};
use crate::ops::{self, DropoutMode, Padding};
use crate::rng;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d {
        weights: Tensor, // OUT×IN×3×3
        bias: Tensor,    // OUT
        padding: Padding,
    },
    Relu,
    Dropout {
        p: f64,
    },
    MaxPool2x2,
    Upsample2xNearest,
    SoftmaxChannels,
    Flatten,
    Dense {
        weights: Tensor, // OUT×IN
        bias: Tensor,    // OUT
    },
}

impl Layer {
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias } => {
                vec![weights, bias]
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias } => {
                vec![weights, bias]
            }
            _ => Vec::new(),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Dense { .. })
    }
}

/// He-uniform fan-in initialization: U(−√(6/fan_in), √(6/fan_in)).
fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng::uniform_in(rng, -limit, limit))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

pub fn conv_layer(out_ch: usize, in_ch: usize, padding: Padding, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Conv2d {
        weights: he_uniform(&[out_ch, in_ch, 3, 3], in_ch * 9, rng),
        bias: Tensor::zeros(&[out_ch]),
        padding,
    }
}

pub fn dense_layer(n_out: usize, n_in: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Dense {
        weights: he_uniform(&[n_out, n_in], n_in, rng),
        bias: Tensor::zeros(&[n_out]),
    }
}

/// Per-layer state captured during the forward pass, consumed by backward.
pub enum LayerCache {
    Conv2d { input: Tensor },
    Relu { input: Tensor },
    Dropout { mask: Tensor },
    MaxPool2x2 { argmax: Vec<usize>, in_shape: Vec<usize> },
    Upsample2xNearest,
    SoftmaxChannels { probs: Tensor },
    Flatten { in_shape: Vec<usize> },
    Dense { input: Tensor },
}

/// Run `layers` on `input`. `mode` controls dropout; the rng is consumed only
/// by dropout layers in `Train` mode, one draw per element in layer order.
pub fn forward_stack(
    layers: &[Layer],
    input: &Tensor,
    mode: DropoutMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<LayerCache>)> {
    let mut x = input.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        x = match layer {
            Layer::Conv2d { weights, bias, padding } => {
                let out = ops::conv2d_forward(&x, weights, bias, *padding)?;
                caches.push(LayerCache::Conv2d { input: x });
                out
            }
            Layer::Relu => {
                let out = ops::relu(&x);
                caches.push(LayerCache::Relu { input: x });
                out
            }
            Layer::Dropout { p } => {
                let (out, mask) = ops::dropout_forward(&x, *p, mode, rng)?;
                caches.push(LayerCache::Dropout { mask });
                out
            }
            Layer::MaxPool2x2 => {
                let pooled = ops::maxpool2x2(&x);
                caches.push(LayerCache::MaxPool2x2 {
                    argmax: pooled.argmax,
                    in_shape: x.shape().to_vec(),
                });
                pooled.output
            }
            Layer::Upsample2xNearest => {
                let out = ops::upsample2x_nearest(&x);
                caches.push(LayerCache::Upsample2xNearest);
                out
            }
            Layer::SoftmaxChannels => {
                let probs = ops::softmax_channels(&x)?;
                caches.push(LayerCache::SoftmaxChannels { probs: probs.clone() });
                probs
            }
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let n = x.len();
                let out = x.clone().reshape(&[n])?;
                caches.push(LayerCache::Flatten { in_shape: shape });
                out
            }
            Layer::Dense { weights, bias } => {
                let out = ops::dense_forward(&x, weights, bias)?;
                caches.push(LayerCache::Dense { input: x });
                out
            }
        };
    }
    Ok((x, caches))
}

/// Parameter gradients per layer, `None` for parameterless layers.
pub struct StackGrads(pub Vec<Option<(Tensor, Tensor)>>);

impl StackGrads {
    pub fn zeros_like(layers: &[Layer]) -> Self {
        StackGrads(
            layers
                .iter()
                .map(|l| match l {
                    Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias } => {
                        Some((Tensor::zeros(weights.shape()), Tensor::zeros(bias.shape())))
                    }
                    _ => None,
                })
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &StackGrads) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b.as_ref()) {
                aw.add_assign(bw);
                ab.add_assign(bb);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.iter_mut().flatten() {
            g.0.scale(factor);
            g.1.scale(factor);
        }
    }

    /// Gradients flattened in the same order as [`stack_params_mut`].
    pub fn flat(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for g in self.0.iter().flatten() {
            out.push(&g.0);
            out.push(&g.1);
        }
        out
    }
}

/// Backpropagate `d_out` through `layers` given the forward caches. Returns
/// the gradient w.r.t. the stack input and all parameter gradients.
pub fn backward_stack(
    layers: &[Layer],
    caches: &[LayerCache],
    d_out: &Tensor,
) -> Result<(Tensor, StackGrads)> {
    if layers.len() != caches.len() {
        return Err(Error::InvalidArgument(
            "backward_stack called without a matching forward cache".into(),
        ));
    }
    let mut grad = d_out.clone();
    let mut grads: Vec<Option<(Tensor, Tensor)>> = vec![None; layers.len()];
    for (idx, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        grad = match (layer, cache) {
            (Layer::Conv2d { weights, padding, .. }, LayerCache::Conv2d { input }) => {
                let g = ops::conv2d_backward(&grad, input, weights, *padding)?;
                grads[idx] = Some((g.d_weights, g.d_bias));
                g.d_input
            }
            (Layer::Relu, LayerCache::Relu { input }) => ops::relu_backward(&grad, input),
            (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => {
                ops::dropout_backward(&grad, mask)
            }
            (Layer::MaxPool2x2, LayerCache::MaxPool2x2 { argmax, in_shape }) => {
                ops::maxpool2x2_backward(&grad, argmax, in_shape)
            }
            (Layer::Upsample2xNearest, LayerCache::Upsample2xNearest) => {
                ops::upsample2x_nearest_backward(&grad)
            }
            (Layer::SoftmaxChannels, LayerCache::SoftmaxChannels { probs }) => {
                ops::softmax_channels_backward(&grad, probs)
            }
            (Layer::Flatten, LayerCache::Flatten { in_shape }) => grad.reshape(in_shape)?,
            (Layer::Dense { weights, .. }, LayerCache::Dense { input }) => {
                let g = ops::dense_backward(&grad, input, weights)?;
                grads[idx] = Some((g.d_weights, g.d_bias));
                g.d_input
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "forward cache does not match layer stack".into(),
                ))
            }
        };
    }
    Ok((grad, StackGrads(grads)))
}

pub fn stack_params(layers: &[Layer]) -> Vec<&Tensor> {
    layers.iter().flat_map(|l| l.params()).collect()
}

pub fn stack_params_mut(layers: &mut [Layer]) -> Vec<&mut Tensor> {
    layers.iter_mut().flat_map(|l| l.params_mut()).collect()
}

/// FNV-1a over the little-endian bytes of every parameter, used to verify
/// that downstream stages leave a trained net untouched.
pub fn param_checksum(layers: &[Layer]) -> u64 {
    let mut bytes = Vec::new();
    for p in stack_params(layers) {
        for v in p.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    rng::fnv1a(&bytes)
}
