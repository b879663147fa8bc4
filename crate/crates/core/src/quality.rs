//! Segmentation-quality regressors: two- or three-branch CNNs mapping
//! uncertainty maps, predicted segmentations, and/or raw images to a Dice
//! score, plus Grad-CAM over the branch feature maps.

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::exec;
use crate::net::{self, Layer, LayerCache, StackGrads};
use crate::ops::{DropoutMode, Padding};
use crate::rng;
use crate::sampler::{self, UmConfig};
use crate::segmenter::{self, SegNet};
use crate::synth::SyntheticSample;
use crate::tensor::Tensor;
use crate::uncertainty::{self, EntropySource, UeKind};
use crate::metrics;

const TAG_QP_INIT: u64 = 0x20;
const TAG_QP_SHUFFLE: u64 = 0x21;

/// Branch filter widths, fixed at five conv+pool stages.
const BRANCH_FILTERS: [usize; 5] = [64, 64, 32, 32, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QNetArch {
    /// Uncertainty map + predicted segmentation map.
    TwoWaySeg,
    /// Uncertainty map + original image.
    TwoWayImg,
    /// Original image + uncertainty map + predicted segmentation map.
    ThreeWay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputRole {
    Image,
    UeMap,
    SegMap,
}

impl QNetArch {
    pub fn roles(self) -> &'static [InputRole] {
        match self {
            QNetArch::TwoWaySeg => &[InputRole::UeMap, InputRole::SegMap],
            QNetArch::TwoWayImg => &[InputRole::UeMap, InputRole::Image],
            QNetArch::ThreeWay => &[InputRole::Image, InputRole::UeMap, InputRole::SegMap],
        }
    }

    pub fn branch_count(self) -> usize {
        self.roles().len()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QNetArch::TwoWaySeg => "two_way_seg",
            QNetArch::TwoWayImg => "two_way_img",
            QNetArch::ThreeWay => "three_way",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two_way_seg" => Ok(QNetArch::TwoWaySeg),
            "two_way_img" => Ok(QNetArch::TwoWayImg),
            "three_way" => Ok(QNetArch::ThreeWay),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture '{other}' (expected two_way_seg|two_way_img|three_way)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct QualityNet {
    pub arch: QNetArch,
    /// One conv stack per input role, independent weights.
    pub branches: Vec<Vec<Layer>>,
    /// Dense head applied to the concatenated flattened branch outputs.
    pub head: Vec<Layer>,
    pub side: usize,
}

/// Spatial size of a branch output for a given input side: five 2× pools.
pub fn branch_output_side(side: usize) -> usize {
    side / 32
}

fn branch_stack(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut in_ch = 1;
    for out_ch in BRANCH_FILTERS {
        layers.push(net::conv_layer(out_ch, in_ch, Padding::Same, rng));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2x2);
        in_ch = out_ch;
    }
    layers
}

impl QualityNet {
    pub fn new(arch: QNetArch, side: usize, init_seed: u64) -> Result<Self> {
        if side % 32 != 0 || side == 0 {
            return Err(Error::InvalidArgument(format!(
                "quality net input side must be a positive multiple of 32, got {side}"
            )));
        }
        let mut r = rng::stream(init_seed, &[TAG_QP_INIT]);
        let branches: Vec<Vec<Layer>> = (0..arch.branch_count())
            .map(|_| branch_stack(&mut r))
            .collect();
        let s = branch_output_side(side);
        let feat = arch.branch_count() * BRANCH_FILTERS[4] * s * s;
        let mut head = vec![
            net::dense_layer(128, feat, &mut r),
            Layer::Relu,
            net::dense_layer(128, 128, &mut r),
            Layer::Relu,
            net::dense_layer(1, 128, &mut r),
        ];
        // start the regression output at the midpoint of the Dice range so
        // training spends its steps on structure rather than recentering
        if let Some(Layer::Dense { bias, .. }) = head.last_mut() {
            bias.data_mut()[0] = 0.5;
        }
        Ok(QualityNet {
            arch,
            branches,
            head,
            side,
        })
    }

    pub fn checksum(&self) -> u64 {
        let mut all: Vec<Layer> = Vec::new();
        for b in &self.branches {
            all.extend(b.iter().cloned());
        }
        all.extend(self.head.iter().cloned());
        net::param_checksum(&all)
    }
}

/// Deterministic prediction: the raw linear output and a copy clamped to
/// [0,1] for ranking and display.
#[derive(Clone, Copy, Debug)]
pub struct QPrediction {
    pub raw: f64,
    pub clamped: f64,
}

struct ForwardState {
    branch_caches: Vec<Vec<LayerCache>>,
    /// Branch outputs before flattening, FILTERS[4]×s×s each.
    branch_outputs: Vec<Tensor>,
    head_cache: Vec<LayerCache>,
    raw: f64,
}

fn check_inputs(qnet: &QualityNet, inputs: &[&Tensor]) -> Result<()> {
    if inputs.len() != qnet.branches.len() {
        return Err(Error::ShapeMismatch {
            context: "quality net input count",
            expected: vec![qnet.branches.len()],
            got: vec![inputs.len()],
        });
    }
    for t in inputs {
        if t.shape() != [1, qnet.side, qnet.side] {
            return Err(Error::ShapeMismatch {
                context: "quality net input",
                expected: vec![1, qnet.side, qnet.side],
                got: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn forward_full(qnet: &QualityNet, inputs: &[&Tensor]) -> Result<ForwardState> {
    check_inputs(qnet, inputs)?;
    let mut dummy = rng::from_seed(0); // no dropout layers in this net
    let mut branch_caches = Vec::with_capacity(qnet.branches.len());
    let mut branch_outputs = Vec::with_capacity(qnet.branches.len());
    let mut concat = Vec::new();
    for (branch, input) in qnet.branches.iter().zip(inputs) {
        let (out, caches) = net::forward_stack(branch, input, DropoutMode::Eval, &mut dummy)?;
        concat.extend_from_slice(out.data());
        branch_caches.push(caches);
        branch_outputs.push(out);
    }
    let concat = Tensor::from_vec(&[concat.len()], concat)?;
    let (y, head_cache) = net::forward_stack(&qnet.head, &concat, DropoutMode::Eval, &mut dummy)?;
    Ok(ForwardState {
        branch_caches,
        branch_outputs,
        head_cache,
        raw: y.data()[0],
    })
}

/// Predict a quality score for one set of branch inputs (role order fixed by
/// the architecture).
pub fn forward(qnet: &QualityNet, inputs: &[&Tensor]) -> Result<QPrediction> {
    let state = forward_full(qnet, inputs)?;
    Ok(QPrediction {
        raw: state.raw,
        clamped: state.raw.clamp(0.0, 1.0),
    })
}

struct QGrads {
    branches: Vec<StackGrads>,
    head: StackGrads,
}

impl QGrads {
    fn zeros_like(qnet: &QualityNet) -> Self {
        QGrads {
            branches: qnet.branches.iter().map(|b| StackGrads::zeros_like(b)).collect(),
            head: StackGrads::zeros_like(&qnet.head),
        }
    }

    fn add_assign(&mut self, other: &QGrads) {
        for (a, b) in self.branches.iter_mut().zip(&other.branches) {
            a.add_assign(b);
        }
        self.head.add_assign(&other.head);
    }

    fn scale(&mut self, factor: f64) {
        for b in &mut self.branches {
            b.scale(factor);
        }
        self.head.scale(factor);
    }

    fn flat(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.branches {
            out.extend(b.flat());
        }
        out.extend(self.head.flat());
        out
    }
}

/// All parameter tensors in a fixed order: branches first, then the head.
pub fn qnet_params_mut(qnet: &mut QualityNet) -> Vec<&mut Tensor> {
    let mut params = Vec::new();
    for b in &mut qnet.branches {
        params.extend(net::stack_params_mut(b));
    }
    params.extend(net::stack_params_mut(&mut qnet.head));
    params
}

/// See [`qnet_params_mut`].
pub fn qnet_params(qnet: &QualityNet) -> Vec<&Tensor> {
    let mut params = Vec::new();
    for b in &qnet.branches {
        params.extend(net::stack_params(b));
    }
    params.extend(net::stack_params(&qnet.head));
    params
}

/// d(raw output)/dθ for every parameter, in [`qnet_params`] order. Exists so
/// the gradient-checking suites can probe the assembled net.
pub fn output_param_gradients(qnet: &QualityNet, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
    let state = forward_full(qnet, inputs)?;
    let (grads, _) = backward_full(qnet, &state, 1.0)?;
    Ok(grads.flat().into_iter().cloned().collect())
}

/// Per branch: the final activations and d(raw output)/d(activation) — the
/// two ingredients of Grad-CAM, exposed for independent verification.
pub fn branch_activations_and_gradients(
    qnet: &QualityNet,
    inputs: &[&Tensor],
) -> Result<Vec<(Tensor, Tensor)>> {
    let state = forward_full(qnet, inputs)?;
    let (_, d_outputs) = backward_full(qnet, &state, 1.0)?;
    Ok(state.branch_outputs.into_iter().zip(d_outputs).collect())
}

/// Backward from dL/draw through head and branches.
fn backward_full(
    qnet: &QualityNet,
    state: &ForwardState,
    d_raw: f64,
) -> Result<(QGrads, Vec<Tensor>)> {
    let d_y = Tensor::from_vec(&[1], vec![d_raw])?;
    let (d_concat, head_grads) = net::backward_stack(&qnet.head, &state.head_cache, &d_y)?;
    let mut branch_grads = Vec::with_capacity(qnet.branches.len());
    let mut d_branch_outputs = Vec::with_capacity(qnet.branches.len());
    let mut offset = 0;
    for (branch, (caches, out)) in qnet
        .branches
        .iter()
        .zip(state.branch_caches.iter().zip(&state.branch_outputs))
    {
        let n = out.len();
        let slice = d_concat.data()[offset..offset + n].to_vec();
        offset += n;
        let d_out = Tensor::from_vec(out.shape(), slice)?;
        let (_, grads) = net::backward_stack(branch, caches, &d_out)?;
        branch_grads.push(grads);
        d_branch_outputs.push(d_out);
    }
    Ok((
        QGrads {
            branches: branch_grads,
            head: head_grads,
        },
        d_branch_outputs,
    ))
}

/// Precomputed branch inputs and regression target for one image.
#[derive(Clone, Debug)]
pub struct QualityPair {
    pub id: String,
    pub image: Tensor,
    pub ue_map: Tensor,
    pub seg_map: Tensor,
    pub true_dice: f64,
}

impl QualityPair {
    pub fn inputs_for(&self, arch: QNetArch) -> Vec<&Tensor> {
        arch.roles()
            .iter()
            .map(|role| match role {
                InputRole::Image => &self.image,
                InputRole::UeMap => &self.ue_map,
                InputRole::SegMap => &self.seg_map,
            })
            .collect()
    }
}

/// All four uncertainty maps plus the shared branch inputs for one image, so
/// the comparison grid can reuse one sampling run across the four estimates.
#[derive(Clone, Debug)]
pub struct PairBundle {
    pub id: String,
    pub image: Tensor,
    pub seg_map: Tensor,
    pub maps: uncertainty::UncertaintyMaps,
    pub true_dice: f64,
}

impl PairBundle {
    pub fn select(&self, ue: UeKind) -> QualityPair {
        let (h, w) = (self.seg_map.shape()[1], self.seg_map.shape()[2]);
        QualityPair {
            id: self.id.clone(),
            image: self.image.clone(),
            ue_map: self
                .maps
                .get(ue)
                .clone()
                .reshape(&[1, h, w])
                .expect("map volume"),
            seg_map: self.seg_map.clone(),
            true_dice: self.true_dice,
        }
    }
}

/// Run the uncertainty model on each image and package the candidate branch
/// inputs with the Dice target: the uncertainty maps, the foreground channel
/// of the mean prediction as the predicted segmentation, and the raw image.
/// The target compares the thresholded mean prediction against the sample's
/// ground truth.
pub fn make_pair_bundles(
    samples: &[&SyntheticSample],
    nets: &[SegNet],
    um: &UmConfig,
    entropy_source: EntropySource,
) -> Result<Vec<PairBundle>> {
    um.validate()?;
    exec::map_indexed(samples.len(), |i| -> Result<PairBundle> {
        let sample = samples[i];
        let tag = rng::fnv1a(sample.id.as_bytes());
        let stack = sampler::sample_stack(nets, &sample.image, um, tag)?;
        let maps = uncertainty::compute_maps(&stack, entropy_source)?;
        let mean = sampler::mean_prediction(&stack);
        let (h, w) = (stack.height(), stack.width());
        let seg_fg = mean.data()[h * w..2 * h * w].to_vec();
        let pred_mask = segmenter::hard_mask(&mean, 0.5);
        let true_dice = metrics::dice(&pred_mask, &sample.gt_mask)?;
        Ok(PairBundle {
            id: sample.id.clone(),
            image: sample.image.clone(),
            seg_map: Tensor::from_vec(&[1, h, w], seg_fg)?,
            maps,
            true_dice,
        })
    })
    .into_iter()
    .collect()
}

/// [`make_pair_bundles`] narrowed to one selected uncertainty estimate.
pub fn make_training_pairs(
    samples: &[&SyntheticSample],
    nets: &[SegNet],
    um: &UmConfig,
    ue: UeKind,
    entropy_source: EntropySource,
) -> Result<Vec<QualityPair>> {
    Ok(make_pair_bundles(samples, nets, um, entropy_source)?
        .iter()
        .map(|b| b.select(ue))
        .collect())
}

#[derive(Clone, Debug)]
pub struct QpTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for QpTrainConfig {
    fn default() -> Self {
        QpTrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            seed: 42,
        }
    }
}

/// MSE-regress the raw output against the Dice targets. Deterministic in
/// `config.seed`; batch gradients are reduced in a fixed order. Returns the
/// trained net and the final-epoch mean train MSE.
pub fn train_quality_net(
    pairs: &[QualityPair],
    config: &QpTrainConfig,
    arch: QNetArch,
) -> Result<(QualityNet, f64)> {
    if pairs.len() < config.batch_size {
        return Err(Error::InsufficientData(format!(
            "quality net training needs at least one full batch ({} pairs), got {}",
            config.batch_size,
            pairs.len()
        )));
    }
    let side = pairs[0].image.shape()[1];
    let mut qnet = QualityNet::new(arch, side, config.seed)?;
    let snapshot: Vec<Tensor> = qnet_params(&qnet).into_iter().cloned().collect();
    let mut adam = AdamState::new(
        AdamConfig::with_lr(config.lr),
        &snapshot.iter().collect::<Vec<_>>(),
    );

    let mut epoch_mse = 0.0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut shuffle_rng = rng::stream(config.seed, &[TAG_QP_SHUFFLE, epoch as u64]);
        rng::shuffle(&mut shuffle_rng, &mut order);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let per_example = exec::map_indexed(batch.len(), |k| -> Result<(f64, QGrads)> {
                let pair = &pairs[batch[k]];
                let inputs = pair.inputs_for(arch);
                let state = forward_full(&qnet, &inputs)?;
                let (loss, d_raw) = crate::ops::mse_loss(state.raw, pair.true_dice);
                let (grads, _) = backward_full(&qnet, &state, d_raw)?;
                Ok((loss, grads))
            });
            let mut total = QGrads::zeros_like(&qnet);
            for res in per_example {
                let (loss, g) = res?;
                loss_sum += loss;
                seen += 1;
                total.add_assign(&g);
            }
            total.scale(1.0 / batch.len() as f64);
            let flat = total.flat();
            let mut params = qnet_params_mut(&mut qnet);
            adam.step(&mut params, &flat)?;
        }
        if epoch + 1 == config.epochs {
            epoch_mse = loss_sum / seen as f64;
        }
    }
    for p in qnet_params(&qnet) {
        p.assert_finite("train_quality_net parameters")?;
    }
    Ok((qnet, epoch_mse))
}

/// Grad-CAM over the final activations of one branch: channel importance
/// weights are the spatial mean of d(raw)/d(activation); the weighted
/// activation sum is (optionally) ReLU'd and min-max normalized to [0,1].
/// A constant raw map (e.g. under all-zero head weights) normalizes to zeros.
pub fn grad_cam(
    qnet: &QualityNet,
    inputs: &[&Tensor],
    branch_index: usize,
    apply_relu: bool,
) -> Result<Tensor> {
    if branch_index >= qnet.branches.len() {
        return Err(Error::InvalidArgument(format!(
            "branch index {branch_index} out of range for a {}-branch net",
            qnet.branches.len()
        )));
    }
    let state = forward_full(qnet, inputs)?;
    let (_, d_branch_outputs) = backward_full(qnet, &state, 1.0)?;
    let act = &state.branch_outputs[branch_index];
    let grad = &d_branch_outputs[branch_index];
    let (c, h, w) = (act.shape()[0], act.shape()[1], act.shape()[2]);
    let plane = h * w;

    let mut map = vec![0.0; plane];
    for ci in 0..c {
        let g = &grad.data()[ci * plane..(ci + 1) * plane];
        let a = &act.data()[ci * plane..(ci + 1) * plane];
        let weight = g.iter().sum::<f64>() / plane as f64;
        for (m, &v) in map.iter_mut().zip(a) {
            *m += weight * v;
        }
    }
    if apply_relu {
        for m in &mut map {
            *m = m.max(0.0);
        }
    }
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for m in &mut map {
            *m = (*m - lo) / (hi - lo);
        }
    } else {
        map.iter_mut().for_each(|m| *m = 0.0);
    }
    Tensor::from_vec(&[h, w], map)
}
