//! Dropout-capable encoder-decoder segmentation backbone producing per-pixel
//! 2-class probability maps. Trained once, then kept frozen while the
//! uncertainty models and quality nets run on top of it.

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::exec;
use crate::net::{self, Layer, StackGrads};
use crate::ops::{DropoutMode, Padding};
use crate::rng;
use crate::synth::SyntheticSample;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

const TAG_INIT: u64 = 0x01;
const TAG_SHUFFLE: u64 = 0x02;
const TAG_DROPOUT: u64 = 0x03;

#[derive(Clone, Debug)]
pub struct SegNet {
    pub layers: Vec<Layer>,
    pub dropout_p: f64,
    /// Training resolution; inference rejects other sizes.
    pub side: usize,
}

#[derive(Clone, Debug)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub dropout_p: f64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            seed: 42,
            dropout_p: 0.2,
        }
    }
}

impl SegNet {
    /// conv16-relu-drop / conv32-relu-pool / conv32-relu-drop / up /
    /// conv16-relu / conv2-softmax, all 3×3 same-padding.
    pub fn new(side: usize, dropout_p: f64, init_seed: u64) -> Self {
        let mut r = rng::stream(init_seed, &[TAG_INIT]);
        let layers = vec![
            net::conv_layer(16, 1, Padding::Same, &mut r),
            Layer::Relu,
            Layer::Dropout { p: dropout_p },
            net::conv_layer(32, 16, Padding::Same, &mut r),
            Layer::Relu,
            Layer::MaxPool2x2,
            net::conv_layer(32, 32, Padding::Same, &mut r),
            Layer::Relu,
            Layer::Dropout { p: dropout_p },
            Layer::Upsample2xNearest,
            net::conv_layer(16, 32, Padding::Same, &mut r),
            Layer::Relu,
            net::conv_layer(2, 16, Padding::Same, &mut r),
            Layer::SoftmaxChannels,
        ];
        SegNet {
            layers,
            dropout_p,
            side,
        }
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Dropout { .. }))
    }

    pub fn checksum(&self) -> u64 {
        net::param_checksum(&self.layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    /// Deterministic inference, dropout disabled.
    Off,
    /// Monte Carlo inference: dropout stays active, masks drawn from the rng.
    Mcd,
}

/// Forward pass producing a 2×H×W per-pixel probability map.
pub fn predict_probs(
    net: &SegNet,
    image: &Tensor,
    mode: PredictMode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if image.shape() != [1, net.side, net.side] {
        return Err(Error::ShapeMismatch {
            context: "predict_probs image resolution",
            expected: vec![1, net.side, net.side],
            got: image.shape().to_vec(),
        });
    }
    let mode = match mode {
        PredictMode::Off => DropoutMode::Eval,
        PredictMode::Mcd => DropoutMode::Train,
    };
    let (probs, _) = net::forward_stack(&net.layers, image, mode, rng)?;
    Ok(probs)
}

/// Threshold the foreground channel of a 2×H×W probability map into an H×W
/// binary mask; a probability exactly at the threshold counts as foreground.
pub fn hard_mask(probs: &Tensor, threshold: f64) -> Tensor {
    let (h, w) = (probs.shape()[1], probs.shape()[2]);
    let fg = &probs.data()[h * w..2 * h * w];
    let data = fg
        .iter()
        .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(&[h, w], data).expect("mask shape")
}

/// Per-pixel cross-entropy gradient at the logits: (probs − onehot)/HW.
/// Returns (mean loss, gradient).
fn ce_loss_grad(probs: &Tensor, gt_mask: &Tensor) -> (f64, Tensor) {
    let (h, w) = (probs.shape()[1], probs.shape()[2]);
    let plane = h * w;
    let p = probs.data();
    let mut grad = p.to_vec();
    let mut loss = 0.0;
    for px in 0..plane {
        let cls = (gt_mask.data()[px] != 0.0) as usize;
        loss -= (p[cls * plane + px] + 1e-12).ln();
        grad[cls * plane + px] -= 1.0;
    }
    let scale = 1.0 / plane as f64;
    for g in &mut grad {
        *g *= scale;
    }
    (
        loss * scale,
        Tensor::from_vec(probs.shape(), grad).expect("grad shape"),
    )
}

/// One example's loss and parameter gradients. The cross-entropy gradient is
/// injected at the logits, so backward skips the parameterless softmax layer.
fn example_grads(net: &SegNet, sample: &SyntheticSample, rng: &mut ChaCha8Rng) -> Result<(f64, StackGrads)> {
    let (probs, caches) = net::forward_stack(&net.layers, &sample.image, DropoutMode::Train, rng)?;
    let (loss, d_logits) = ce_loss_grad(&probs, &sample.gt_mask);
    let n = net.layers.len() - 1;
    let (_, grads) = net::backward_stack(&net.layers[..n], &caches[..n], &d_logits)?;
    Ok((loss, grads))
}

/// Train the backbone with per-pixel cross-entropy. Deterministic in
/// `config.seed`: initialization, epoch shuffles, and per-example dropout
/// streams are all derived from it, and batch gradients are reduced in a
/// fixed order regardless of how the batch was parallelized.
pub fn train_segmenter(train: &[&SyntheticSample], config: &SegTrainConfig) -> Result<SegNet> {
    if train.is_empty() {
        return Err(Error::InsufficientData(
            "train_segmenter needs a non-empty train split".into(),
        ));
    }
    let side = train[0].image.shape()[1];
    let mut net = SegNet::new(side, config.dropout_p, config.seed);

    let snapshot = net::stack_params(&net.layers)
        .into_iter()
        .cloned()
        .collect::<Vec<_>>();
    let mut adam = AdamState::new(
        AdamConfig::with_lr(config.lr),
        &snapshot.iter().collect::<Vec<_>>(),
    );

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = rng::stream(config.seed, &[TAG_SHUFFLE, epoch as u64]);
        rng::shuffle(&mut shuffle_rng, &mut order);

        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let per_example = exec::map_indexed(batch.len(), |k| {
                let mut r = rng::stream(
                    config.seed,
                    &[TAG_DROPOUT, epoch as u64, step as u64, k as u64],
                );
                example_grads(&net, train[batch[k]], &mut r)
            });
            let mut total = StackGrads::zeros_like(&net.layers[..net.layers.len() - 1]);
            for res in per_example {
                let (_, g) = res?;
                total.add_assign(&g);
            }
            total.scale(1.0 / batch.len() as f64);
            let flat = total.flat();
            let mut params = net::stack_params_mut(&mut net.layers);
            adam.step(&mut params, &flat)?;
        }
    }
    for p in net::stack_params(&net.layers) {
        p.assert_finite("train_segmenter parameters")?;
    }
    Ok(net)
}
