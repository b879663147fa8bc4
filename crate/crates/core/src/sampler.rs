//! Uncertainty models: each turns one image into a stack of T candidate
//! per-pixel probability maps by MC dropout passes, ensemble members, or
//! test-time rotations.

use crate::error::{Error, Result};
use crate::rng;
use crate::segmenter::{self, PredictMode, SegNet};
use crate::tensor::Tensor;

const TAG_MCD_PASS: u64 = 0x10;
const TAG_TTA_ANGLE: u64 = 0x11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UmKind {
    Mcd,
    Ensemble,
    Tta,
}

impl UmKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UmKind::Mcd => "mcd",
            UmKind::Ensemble => "ensemble",
            UmKind::Tta => "tta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mcd" => Ok(UmKind::Mcd),
            "ensemble" => Ok(UmKind::Ensemble),
            "tta" => Ok(UmKind::Tta),
            other => Err(Error::InvalidArgument(format!(
                "unknown uncertainty model '{other}' (expected mcd|ensemble|tta)"
            ))),
        }
    }
}

/// Provenance of one stack member.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberMeta {
    pub member: usize,
    pub seed: Option<u64>,
    pub angle_deg: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum AnglePolicy {
    UniformRandom,
    /// Fixed list of degrees, cycled when shorter than the sample count.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct UmConfig {
    pub kind: UmKind,
    pub t_mcd: usize,
    pub ensemble_size: usize,
    pub tta_count: usize,
    pub angle_policy: AnglePolicy,
    pub seed: u64,
}

impl Default for UmConfig {
    fn default() -> Self {
        UmConfig {
            kind: UmKind::Mcd,
            t_mcd: 10,
            ensemble_size: 3,
            tta_count: 10,
            angle_policy: AnglePolicy::UniformRandom,
            seed: 42,
        }
    }
}

impl UmConfig {
    pub fn validate(&self) -> Result<()> {
        let n = match self.kind {
            UmKind::Mcd => self.t_mcd,
            UmKind::Ensemble => self.ensemble_size,
            UmKind::Tta => self.tta_count,
        };
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "uncertainty model {} needs at least 2 samples, got {n}",
                self.kind.as_str()
            )));
        }
        Ok(())
    }
}

/// T candidate probability maps for one image, stored T×C×H×W.
#[derive(Clone, Debug)]
pub struct SampleStack {
    probs: Tensor,
    pub um_kind: UmKind,
    pub member_meta: Vec<MemberMeta>,
}

impl SampleStack {
    pub fn new(members: Vec<Tensor>, um_kind: UmKind, member_meta: Vec<MemberMeta>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a sample stack needs T >= 2 members, got {}",
                members.len()
            )));
        }
        if members.len() != member_meta.len() {
            return Err(Error::InvalidArgument(
                "member metadata count does not match stack size".into(),
            ));
        }
        let shape = members[0].shape().to_vec();
        let mut data = Vec::with_capacity(members.len() * members[0].len());
        for m in &members {
            if m.shape() != shape {
                return Err(Error::ShapeMismatch {
                    context: "sample stack members",
                    expected: shape,
                    got: m.shape().to_vec(),
                });
            }
            data.extend_from_slice(m.data());
        }
        let full_shape = [&[members.len()], shape.as_slice()].concat();
        let stack = SampleStack {
            probs: Tensor::from_vec(&full_shape, data)?,
            um_kind,
            member_meta,
        };
        stack.validate_simplex(1e-6)?;
        Ok(stack)
    }

    /// Reassemble from a T×C×H×W tensor (the on-disk layout). Storage is
    /// f32, so pixels may sum to 1 only within the 1e-6 admission tolerance;
    /// after validation each pixel is renormalized to an exact simplex so the
    /// uncertainty estimates keep their analytic bounds.
    pub fn from_tensor(probs: Tensor, um_kind: UmKind, member_meta: Vec<MemberMeta>) -> Result<Self> {
        if probs.rank() != 4 {
            return Err(Error::ShapeMismatch {
                context: "sample stack tensor must be T×C×H×W",
                expected: vec![4],
                got: vec![probs.rank()],
            });
        }
        if probs.shape()[0] < 2 {
            return Err(Error::InvalidArgument(
                "a sample stack needs T >= 2 members".into(),
            ));
        }
        if probs.shape()[0] != member_meta.len() {
            return Err(Error::InvalidArgument(
                "member metadata count does not match stack size".into(),
            ));
        }
        let mut stack = SampleStack {
            probs,
            um_kind,
            member_meta,
        };
        stack.validate_simplex(1e-6)?;
        stack.renormalize();
        Ok(stack)
    }

    /// Snap every pixel of every member onto an exact simplex.
    fn renormalize(&mut self) {
        let (t, c, h, w) = (self.t(), self.channels(), self.height(), self.width());
        let plane = h * w;
        let block = c * plane;
        let data = self.probs.data_mut();
        for ti in 0..t {
            let member = &mut data[ti * block..(ti + 1) * block];
            for px in 0..plane {
                let mut sum = 0.0;
                for ci in 0..c {
                    let v = member[ci * plane + px].max(0.0);
                    member[ci * plane + px] = v;
                    sum += v;
                }
                for ci in 0..c {
                    member[ci * plane + px] /= sum;
                }
            }
        }
    }

    pub fn t(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    /// Contiguous C×H×W block of member `t`.
    pub fn member(&self, t: usize) -> &[f64] {
        let block = self.channels() * self.height() * self.width();
        &self.probs.data()[t * block..(t + 1) * block]
    }

    fn validate_simplex(&self, tol: f64) -> Result<()> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let plane = h * w;
        for t in 0..self.t() {
            let m = self.member(t);
            for px in 0..plane {
                let mut sum = 0.0;
                for ci in 0..c {
                    sum += m[ci * plane + px];
                }
                if (sum - 1.0).abs() > tol {
                    return Err(Error::NotSimplex {
                        row: px / w,
                        col: px % w,
                        sum,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Arithmetic mean over the stack, summed in member order.
pub fn mean_prediction(stack: &SampleStack) -> Tensor {
    let block = stack.channels() * stack.height() * stack.width();
    let mut acc = vec![0.0; block];
    for t in 0..stack.t() {
        for (a, &v) in acc.iter_mut().zip(stack.member(t)) {
            *a += v;
        }
    }
    let inv = 1.0 / stack.t() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Tensor::from_vec(&[stack.channels(), stack.height(), stack.width()], acc).expect("mean shape")
}

/// T stochastic forward passes with independent dropout masks; the stack is
/// ordered by pass index, each pass on its own derived stream.
pub fn mcd_sample(net: &SegNet, image: &Tensor, t: usize, seed: u64) -> Result<SampleStack> {
    if !net.has_dropout() {
        return Err(Error::InvalidArgument(
            "MC dropout is undefined for a net without dropout layers".into(),
        ));
    }
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "mcd_sample needs T >= 2 passes, got {t}"
        )));
    }
    let mut members = Vec::with_capacity(t);
    let mut meta = Vec::with_capacity(t);
    for pass in 0..t {
        let pass_seed = rng::derive_seed(seed, &[TAG_MCD_PASS, pass as u64]);
        let mut r = rng::from_seed(pass_seed);
        members.push(segmenter::predict_probs(net, image, PredictMode::Mcd, &mut r)?);
        meta.push(MemberMeta {
            member: pass,
            seed: Some(pass_seed),
            angle_deg: None,
        });
    }
    SampleStack::new(members, UmKind::Mcd, meta)
}

/// One deterministic pass per ensemble member, dropout off.
pub fn ensemble_sample(nets: &[SegNet], image: &Tensor) -> Result<SampleStack> {
    if nets.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ensemble_sample needs at least 2 members, got {}",
            nets.len()
        )));
    }
    let mut members = Vec::with_capacity(nets.len());
    let mut meta = Vec::with_capacity(nets.len());
    for (m, net) in nets.iter().enumerate() {
        let mut r = rng::from_seed(0); // unused with dropout off
        members.push(segmenter::predict_probs(net, image, PredictMode::Off, &mut r)?);
        meta.push(MemberMeta {
            member: m,
            seed: None,
            angle_deg: None,
        });
    }
    SampleStack::new(members, UmKind::Ensemble, meta)
}

/// Reflect an index into [0, n).
fn reflect(idx: i64, n: usize) -> usize {
    let n = n as i64;
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Rotate every channel of a C×H×W tensor by `angle_rad` about the image
/// center, bilinear with reflect padding.
pub fn rotate_bilinear(input: &Tensor, angle_rad: f64) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_rad.sin_cos();
    let src = input.data();
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            // inverse mapping: rotate the target coordinate by -angle
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cx + dx * cos + dy * sin;
            let sy = cy - dx * sin + dy * cos;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let x0i = x0 as i64;
            let y0i = y0 as i64;
            let xs = [reflect(x0i, w), reflect(x0i + 1, w)];
            let ys = [reflect(y0i, h), reflect(y0i + 1, h)];
            let wts = [
                (1.0 - fy) * (1.0 - fx),
                (1.0 - fy) * fx,
                fy * (1.0 - fx),
                fy * fx,
            ];
            for ci in 0..c {
                let base = ci * h * w;
                let v = wts[0] * src[base + ys[0] * w + xs[0]]
                    + wts[1] * src[base + ys[0] * w + xs[1]]
                    + wts[2] * src[base + ys[1] * w + xs[0]]
                    + wts[3] * src[base + ys[1] * w + xs[1]];
                out[(ci * h + y) * w + x] = v;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out).expect("rotation shape")
}

/// Clamp to [0,1] and renormalize each pixel to a simplex; a pixel whose
/// clamped mass vanishes becomes uniform.
fn renormalize_pixels(probs: &mut Tensor) {
    let (c, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let plane = h * w;
    let data = probs.data_mut();
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    for px in 0..plane {
        let mut sum = 0.0;
        for ci in 0..c {
            sum += data[ci * plane + px];
        }
        if sum < 1e-6 {
            for ci in 0..c {
                data[ci * plane + px] = 1.0 / c as f64;
            }
        } else {
            for ci in 0..c {
                data[ci * plane + px] /= sum;
            }
        }
    }
}

/// Test-time augmentation: per sample, rotate the image by a drawn angle,
/// predict with dropout off, rotate the probability map back, then clamp and
/// renormalize. All geometry lands in the member metadata.
pub fn tta_sample(
    net: &SegNet,
    image: &Tensor,
    k: usize,
    policy: &AnglePolicy,
    seed: u64,
) -> Result<SampleStack> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "tta_sample needs K >= 2 augmentations, got {k}"
        )));
    }
    let mut members = Vec::with_capacity(k);
    let mut meta = Vec::with_capacity(k);
    for i in 0..k {
        let angle_deg = match policy {
            AnglePolicy::UniformRandom => {
                let mut r = rng::stream(seed, &[TAG_TTA_ANGLE, i as u64]);
                rng::uniform_in(&mut r, 0.0, 360.0)
            }
            AnglePolicy::Fixed(angles) => angles[i % angles.len()],
        };
        let angle_rad = angle_deg.to_radians();
        let rotated = rotate_bilinear(image, angle_rad);
        let mut dummy = rng::from_seed(0);
        let probs = segmenter::predict_probs(net, &rotated, PredictMode::Off, &mut dummy)?;
        let mut unrotated = rotate_bilinear(&probs, -angle_rad);
        renormalize_pixels(&mut unrotated);
        members.push(unrotated);
        meta.push(MemberMeta {
            member: i,
            seed: None,
            angle_deg: Some(angle_deg),
        });
    }
    SampleStack::new(members, UmKind::Tta, meta)
}

/// Run the configured uncertainty model on one image. `nets` holds the single
/// backbone for MCD/TTA or all members for an ensemble; `image_tag` keeps
/// per-image rng streams apart.
pub fn sample_stack(
    nets: &[SegNet],
    image: &Tensor,
    config: &UmConfig,
    image_tag: u64,
) -> Result<SampleStack> {
    config.validate()?;
    let seed = rng::derive_seed(config.seed, &[image_tag]);
    match config.kind {
        UmKind::Mcd => mcd_sample(&nets[0], image, config.t_mcd, seed),
        UmKind::Ensemble => {
            if nets.len() != config.ensemble_size {
                return Err(Error::InvalidArgument(format!(
                    "ensemble of {} members requested but {} nets supplied",
                    config.ensemble_size,
                    nets.len()
                )));
            }
            ensemble_sample(nets, image)
        }
        UmKind::Tta => tta_sample(&nets[0], image, config.tta_count, &config.angle_policy, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::SegTrainConfig;
    use crate::synth::{self, CorpusSpec};

    fn small_net(p: f64) -> SegNet {
        SegNet::new(16, p, 3)
    }

    fn small_image(seed: u64) -> Tensor {
        let mut r = rng::from_seed(seed);
        Tensor::from_vec(&[1, 16, 16], (0..256).map(|_| rng::uniform(&mut r)).collect()).unwrap()
    }

    #[test]
    fn mcd_stack_is_deterministic_and_varies_with_dropout() {
        let net = small_net(0.3);
        let img = small_image(1);
        let a = mcd_sample(&net, &img, 4, 99).unwrap();
        let b = mcd_sample(&net, &img, 4, 99).unwrap();
        assert_eq!(a.tensor(), b.tensor());
        assert_ne!(a.member(0), a.member(1));
    }

    #[test]
    fn mcd_with_zero_rate_gives_identical_members() {
        let net = small_net(0.0);
        let img = small_image(2);
        let stack = mcd_sample(&net, &img, 3, 7).unwrap();
        assert_eq!(stack.member(0), stack.member(1));
        assert_eq!(stack.member(0), stack.member(2));
    }

    #[test]
    fn mcd_requires_dropout_layer() {
        let mut net = small_net(0.2);
        net.layers.retain(|l| !matches!(l, crate::net::Layer::Dropout { .. }));
        let img = small_image(3);
        assert!(mcd_sample(&net, &img, 4, 0).is_err());
    }

    #[test]
    fn ensemble_of_identical_nets_has_zero_variance() {
        let net = small_net(0.2);
        let img = small_image(4);
        let stack = ensemble_sample(&[net.clone(), net.clone(), net], &img).unwrap();
        assert_eq!(stack.member(0), stack.member(1));
        assert_eq!(stack.member(1), stack.member(2));
        assert!(ensemble_sample(&[small_net(0.2)], &img).is_err());
    }

    #[test]
    fn tta_identity_angle_reproduces_plain_prediction() {
        let spec = CorpusSpec {
            n_images: 6,
            side: 16,
            contrast: 0.9,
            noise_sigma: 0.02,
            ambiguous_fraction: 0.0,
            seed: 9,
        };
        let corpus = synth::generate_corpus(&spec).unwrap();
        let refs: Vec<_> = corpus.iter().collect();
        let cfg = SegTrainConfig {
            epochs: 1,
            batch_size: 4,
            ..SegTrainConfig::default()
        };
        let net = crate::segmenter::train_segmenter(&refs, &cfg).unwrap();
        let img = &corpus[0].image;
        let stack = tta_sample(&net, img, 2, &AnglePolicy::Fixed(vec![0.0]), 5).unwrap();
        let plain =
            segmenter::predict_probs(&net, img, PredictMode::Off, &mut rng::from_seed(0)).unwrap();
        for t in 0..2 {
            for (a, b) in stack.member(t).iter().zip(plain.data()) {
                assert!((a - b).abs() < 1e-12, "tta 0° differs: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tta_members_form_simplices() {
        let net = small_net(0.2);
        let img = small_image(6);
        let stack = tta_sample(&net, &img, 5, &AnglePolicy::UniformRandom, 11).unwrap();
        // construction validates the 1e-6 simplex bound; spot-check tighter
        let plane = 16 * 16;
        for t in 0..stack.t() {
            let m = stack.member(t);
            for px in 0..plane {
                let sum = m[px] + m[plane + px];
                assert!((sum - 1.0).abs() < 1e-9);
            }
            assert!(stack.member_meta[t].angle_deg.is_some());
        }
    }

    #[test]
    fn mean_prediction_examples() {
        let net = small_net(0.0);
        let img = small_image(7);
        let stack = mcd_sample(&net, &img, 3, 0).unwrap();
        let mean = mean_prediction(&stack);
        for (a, b) in mean.data().iter().zip(stack.member(0)) {
            assert!((a - b).abs() < 1e-15);
        }

        // two opposite one-hot members average to (0.5, 0.5)
        let hot = Tensor::from_vec(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        let cold = Tensor::from_vec(&[2, 1, 1], vec![0.0, 1.0]).unwrap();
        let meta = (0..2)
            .map(|m| MemberMeta {
                member: m,
                seed: None,
                angle_deg: None,
            })
            .collect();
        let stack = SampleStack::new(vec![hot, cold], UmKind::Ensemble, meta).unwrap();
        let mean = mean_prediction(&stack);
        assert_eq!(mean.data(), &[0.5, 0.5]);
    }

    #[test]
    fn mean_matches_naive_loop_and_is_simplex() {
        let net = small_net(0.4);
        let img = small_image(8);
        let stack = mcd_sample(&net, &img, 6, 13).unwrap();
        let mean = mean_prediction(&stack);
        let block = 2 * 16 * 16;
        for i in 0..block {
            let mut s = 0.0;
            for t in 0..6 {
                s += stack.member(t)[i];
            }
            assert!((mean.data()[i] - s / 6.0).abs() < 1e-12);
        }
        let plane = 256;
        for px in 0..plane {
            assert!((mean.data()[px] + mean.data()[plane + px] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_by_zero_is_exact_identity() {
        let img = small_image(9);
        let out = rotate_bilinear(&img, 0.0);
        assert_eq!(out, img);
    }

    #[test]
    fn mean_prediction_commutes_with_member_permutation() {
        let net = small_net(0.5);
        let img = small_image(12);
        let stack = mcd_sample(&net, &img, 5, 31).unwrap();
        let base = mean_prediction(&stack);

        // permute the members (with their metadata), then rebuild in
        // member-sorted order: the fixed summation order makes the mean
        // bit-identical
        let order = [3usize, 0, 4, 1, 2];
        let permuted: Vec<(Tensor, MemberMeta)> = order
            .iter()
            .map(|&t| {
                (
                    Tensor::from_vec(&[2, 16, 16], stack.member(t).to_vec()).unwrap(),
                    stack.member_meta[t].clone(),
                )
            })
            .collect();
        let mut sorted = permuted;
        sorted.sort_by_key(|(_, m)| m.member);
        let (tensors, meta): (Vec<_>, Vec<_>) = sorted.into_iter().unzip();
        let rebuilt = SampleStack::new(tensors, UmKind::Mcd, meta).unwrap();
        assert_eq!(mean_prediction(&rebuilt), base);
    }

    #[test]
    fn config_rejects_single_sample_counts() {
        let mut cfg = UmConfig {
            kind: UmKind::Mcd,
            t_mcd: 1,
            ..UmConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.t_mcd = 2;
        assert!(cfg.validate().is_ok());
        cfg.kind = UmKind::Tta;
        cfg.tta_count = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stack_rejects_non_simplex_members() {
        let bad = Tensor::from_vec(&[2, 1, 1], vec![0.9, 0.9]).unwrap();
        let ok = Tensor::from_vec(&[2, 1, 1], vec![0.5, 0.5]).unwrap();
        let meta: Vec<MemberMeta> = (0..2)
            .map(|m| MemberMeta {
                member: m,
                seed: None,
                angle_deg: None,
            })
            .collect();
        assert!(SampleStack::new(vec![bad, ok], UmKind::Mcd, meta).is_err());
    }
}
