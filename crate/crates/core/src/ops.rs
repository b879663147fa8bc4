//! Layer operations with manual forward and backward passes.
//!
//! All kernels are 3×3, all math is f64, and every backward here is checked
//! against central finite differences in the test suites. Layouts are
//! row-major: images C×H×W, conv weights OUT×IN×3×3, dense weights OUT×IN.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

pub struct Conv2dGrads {
    pub d_input: Tensor,
    pub d_weights: Tensor,
    pub d_bias: Tensor,
}

fn check_conv_shapes(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if input.rank() != 3 {
        return Err(Error::ShapeMismatch {
            context: "conv2d input must be C×H×W",
            expected: vec![3],
            got: vec![input.rank()],
        });
    }
    if weights.rank() != 4 || weights.shape()[2] != 3 || weights.shape()[3] != 3 {
        return Err(Error::ShapeMismatch {
            context: "conv2d weights must be OUT×IN×3×3",
            expected: vec![0, 0, 3, 3],
            got: weights.shape().to_vec(),
        });
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, c_in_w) = (weights.shape()[0], weights.shape()[1]);
    if c_in != c_in_w {
        return Err(Error::ShapeMismatch {
            context: "conv2d input channels vs weights",
            expected: vec![c_in_w],
            got: vec![c_in],
        });
    }
    if bias.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            context: "conv2d bias",
            expected: vec![c_out],
            got: bias.shape().to_vec(),
        });
    }
    Ok((c_in, c_out, h, w))
}

/// Copy a C×H×W buffer into a zero-padded C×(H+2p)×(W+2p) buffer, written in
/// one pass.
fn zero_pad(src: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = Vec::with_capacity(c * ph * pw);
    for ci in 0..c {
        padded.resize(padded.len() + pad * pw, 0.0);
        for y in 0..h {
            let s = (ci * h + y) * w;
            padded.resize(padded.len() + pad, 0.0);
            padded.extend_from_slice(&src[s..s + w]);
            padded.resize(padded.len() + pad, 0.0);
        }
        padded.resize(padded.len() + pad * pw, 0.0);
    }
    padded
}

/// Shared 3×3 correlation core: `out[d][y][x] (+)= Σ_s Σ_k wt[d][s][k] ·
/// src[s][y+ky][x+kx]`, with `src` already padded to rows of `sw` =
/// `w_out + 2`. `out` arrives pre-filled (bias or zeros).
fn correlate3x3(
    src: &[f64],
    wt: &[f64],
    c_src: usize,
    c_dst: usize,
    h_out: usize,
    w_out: usize,
    out: &mut [f64],
) {
    let sw = w_out + 2;
    let plane_src = (h_out + 2) * sw;
    for d in 0..c_dst {
        let out_ch = &mut out[d * h_out * w_out..(d + 1) * h_out * w_out];
        for s in 0..c_src {
            let k = &wt[(d * c_src + s) * 9..(d * c_src + s) * 9 + 9];
            let (w00, w01, w02) = (k[0], k[1], k[2]);
            let (w10, w11, w12) = (k[3], k[4], k[5]);
            let (w20, w21, w22) = (k[6], k[7], k[8]);
            let ch = &src[s * plane_src..(s + 1) * plane_src];
            for y in 0..h_out {
                let r0 = &ch[y * sw..y * sw + w_out + 2];
                let r1 = &ch[(y + 1) * sw..(y + 1) * sw + w_out + 2];
                let r2 = &ch[(y + 2) * sw..(y + 2) * sw + w_out + 2];
                let out_row = &mut out_ch[y * w_out..(y + 1) * w_out];
                for x in 0..w_out {
                    out_row[x] += w00 * r0[x] + w01 * r0[x + 1] + w02 * r0[x + 2]
                        + w10 * r1[x] + w11 * r1[x + 1] + w12 * r1[x + 2]
                        + w20 * r2[x] + w21 * r2[x + 1] + w22 * r2[x + 2];
                }
            }
        }
    }
}

/// 3×3 convolution (cross-correlation) with per-output-channel bias.
///
/// `Same` zero-pads by one pixel and preserves H×W; `Valid` shrinks to
/// (H−2)×(W−2).
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
    let (c_in, c_out, h, w) = check_conv_shapes(input, weights, bias)?;
    let padded;
    let (src, h_out, w_out): (&[f64], usize, usize) = match padding {
        Padding::Same => {
            padded = zero_pad(input.data(), c_in, h, w, 1);
            (&padded, h, w)
        }
        Padding::Valid => {
            if h < 3 || w < 3 {
                return Err(Error::InvalidArgument(format!(
                    "valid conv needs H,W >= 3, got {h}x{w}"
                )));
            }
            (input.data(), h - 2, w - 2)
        }
    };
    let plane = h_out * w_out;
    let mut out = Vec::with_capacity(c_out * plane);
    for o in 0..c_out {
        out.resize(out.len() + plane, bias.data()[o]);
    }
    correlate3x3(&src, weights.data(), c_in, c_out, h_out, w_out, &mut out);
    Tensor::from_vec(&[c_out, h_out, w_out], out)
}

/// Gradients of a 3×3 convolution given the upstream gradient and the cached
/// forward input.
pub fn conv2d_backward(d_out: &Tensor, input: &Tensor, weights: &Tensor, padding: Padding) -> Result<Conv2dGrads> {
    let c_in = input.shape()[0];
    let c_out = weights.shape()[0];
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (h_out, w_out) = match padding {
        Padding::Same => (h, w),
        Padding::Valid => (h - 2, w - 2),
    };
    if d_out.shape() != [c_out, h_out, w_out] {
        return Err(Error::ShapeMismatch {
            context: "conv2d_backward upstream gradient",
            expected: vec![c_out, h_out, w_out],
            got: d_out.shape().to_vec(),
        });
    }
    let padded;
    let (src, pw): (&[f64], usize) = match padding {
        Padding::Same => {
            padded = zero_pad(input.data(), c_in, h, w, 1);
            (&padded, w + 2)
        }
        Padding::Valid => (input.data(), w),
    };
    let ph_rows = h_out + 2;
    let g = d_out.data();
    let wt = weights.data();

    let mut d_bias = vec![0.0; c_out];
    let mut d_weights = vec![0.0; c_out * c_in * 9];

    for o in 0..c_out {
        let g_ch = &g[o * h_out * w_out..(o + 1) * h_out * w_out];
        d_bias[o] = g_ch.iter().sum();
        for i in 0..c_in {
            let ch = &src[i * ph_rows * pw..(i + 1) * ph_rows * pw];
            let dw = &mut d_weights[(o * c_in + i) * 9..(o * c_in + i) * 9 + 9];
            // Each tap is a long dot product; four partial sums per tap keep
            // the reduction chains independent enough to vectorize. The
            // summation order is fixed, so results stay deterministic.
            let mut acc = [[0.0f64; 4]; 9];
            let n4 = w_out & !3;
            for y in 0..h_out {
                let g_row = &g_ch[y * w_out..(y + 1) * w_out];
                let r0 = &ch[y * pw..y * pw + w_out + 2];
                let r1 = &ch[(y + 1) * pw..(y + 1) * pw + w_out + 2];
                let r2 = &ch[(y + 2) * pw..(y + 2) * pw + w_out + 2];
                let mut x = 0;
                while x + 4 <= n4 {
                    for l in 0..4 {
                        let g = g_row[x + l];
                        acc[0][l] += g * r0[x + l];
                        acc[1][l] += g * r0[x + l + 1];
                        acc[2][l] += g * r0[x + l + 2];
                        acc[3][l] += g * r1[x + l];
                        acc[4][l] += g * r1[x + l + 1];
                        acc[5][l] += g * r1[x + l + 2];
                        acc[6][l] += g * r2[x + l];
                        acc[7][l] += g * r2[x + l + 1];
                        acc[8][l] += g * r2[x + l + 2];
                    }
                    x += 4;
                }
                while x < w_out {
                    let g = g_row[x];
                    acc[0][0] += g * r0[x];
                    acc[1][0] += g * r0[x + 1];
                    acc[2][0] += g * r0[x + 2];
                    acc[3][0] += g * r1[x];
                    acc[4][0] += g * r1[x + 1];
                    acc[5][0] += g * r1[x + 2];
                    acc[6][0] += g * r2[x];
                    acc[7][0] += g * r2[x + 1];
                    acc[8][0] += g * r2[x + 2];
                    x += 1;
                }
            }
            for (d, a) in dw.iter_mut().zip(acc.iter()) {
                *d += (a[0] + a[1]) + (a[2] + a[3]);
            }
        }
    }

    // d_input is itself a correlation: gather the upstream gradient with the
    // kernels rotated 180° and the channel axes swapped. Same padding pads
    // the gradient by 1, valid by 2 (full correlation).
    let mut w_flip = vec![0.0; c_in * c_out * 9];
    for o in 0..c_out {
        for i in 0..c_in {
            for t in 0..9 {
                w_flip[(i * c_out + o) * 9 + t] = wt[(o * c_in + i) * 9 + 8 - t];
            }
        }
    }
    let g_pad = match padding {
        Padding::Same => zero_pad(g, c_out, h_out, w_out, 1),
        Padding::Valid => zero_pad(g, c_out, h_out, w_out, 2),
    };
    let mut d_input = vec![0.0; c_in * h * w];
    correlate3x3(&g_pad, &w_flip, c_out, c_in, h, w, &mut d_input);

    Ok(Conv2dGrads {
        d_input: Tensor::from_vec(&[c_in, h, w], d_input)?,
        d_weights: Tensor::from_vec(weights.shape(), d_weights)?,
        d_bias: Tensor::from_vec(&[c_out], d_bias)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Masks the upstream gradient where the cached input was <= 0; the
/// subgradient at exactly 0 is 0.
pub fn relu_backward(d_out: &Tensor, input: &Tensor) -> Tensor {
    let data = d_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

pub struct MaxPoolOut {
    pub output: Tensor,
    /// Flat input index of the winning element per output cell.
    pub argmax: Vec<usize>,
}

/// 2×2 max pooling with stride 2. Odd trailing rows/columns are treated as
/// padded with −∞, so the window maximum is always a real element; ties break
/// to the first element in row-major scan order.
pub fn maxpool2x2(input: &Tensor) -> MaxPoolOut {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (h_out, w_out) = (h.div_ceil(2), w.div_ceil(2));
    let src = input.data();
    let mut out = vec![0.0; c * h_out * w_out];
    let mut argmax = vec![0usize; c * h_out * w_out];
    for ci in 0..c {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    let y = oy * 2 + dy;
                    if y >= h {
                        continue;
                    }
                    for dx in 0..2 {
                        let x = ox * 2 + dx;
                        if x >= w {
                            continue;
                        }
                        let idx = (ci * h + y) * w + x;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ci * h_out + oy) * w_out + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    MaxPoolOut {
        output: Tensor::from_vec(&[c, h_out, w_out], out).expect("pool shape"),
        argmax,
    }
}

/// Routes the upstream gradient to the stored argmax positions.
pub fn maxpool2x2_backward(d_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Tensor {
    let mut d_in = Tensor::zeros(input_shape);
    let data = d_in.data_mut();
    for (g, &idx) in d_out.data().iter().zip(argmax) {
        data[idx] += g;
    }
    d_in
}

pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = (weights.shape()[0], weights.shape()[1]);
    if input.len() != n_in {
        return Err(Error::ShapeMismatch {
            context: "dense input",
            expected: vec![n_in],
            got: vec![input.len()],
        });
    }
    let x = input.data();
    let mut y = bias.data().to_vec();
    for o in 0..n_out {
        let row = &weights.data()[o * n_in..(o + 1) * n_in];
        let mut acc = 0.0;
        for i in 0..n_in {
            acc += row[i] * x[i];
        }
        y[o] += acc;
    }
    Tensor::from_vec(&[n_out], y)
}

pub struct DenseGrads {
    pub d_input: Tensor,
    pub d_weights: Tensor,
    pub d_bias: Tensor,
}

pub fn dense_backward(d_out: &Tensor, input: &Tensor, weights: &Tensor) -> Result<DenseGrads> {
    let (n_out, n_in) = (weights.shape()[0], weights.shape()[1]);
    if d_out.len() != n_out || input.len() != n_in {
        return Err(Error::ShapeMismatch {
            context: "dense_backward",
            expected: vec![n_out, n_in],
            got: vec![d_out.len(), input.len()],
        });
    }
    let g = d_out.data();
    let x = input.data();
    let mut d_w = vec![0.0; n_out * n_in];
    let mut d_x = vec![0.0; n_in];
    for o in 0..n_out {
        let go = g[o];
        let w_row = &weights.data()[o * n_in..(o + 1) * n_in];
        let dw_row = &mut d_w[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dw_row[i] = go * x[i];
            d_x[i] += go * w_row[i];
        }
    }
    Ok(DenseGrads {
        d_input: Tensor::from_vec(&[n_in], d_x)?,
        d_weights: Tensor::from_vec(&[n_out, n_in], d_w)?,
        d_bias: Tensor::from_vec(&[n_out], g.to_vec())?,
    })
}

/// Inverted dropout: in `Train` mode each unit is zeroed with probability `p`
/// and survivors are scaled by 1/(1−p), so `Eval` mode is the identity. MC
/// dropout inference reuses `Train` mode. Returns the output and the mask.
pub fn dropout_forward(
    input: &Tensor,
    p: f64,
    mode: DropoutMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0,1), got {p}"
        )));
    }
    match mode {
        DropoutMode::Eval => Ok((input.clone(), Tensor::filled(input.shape(), 1.0))),
        DropoutMode::Train => {
            let keep_scale = 1.0 / (1.0 - p);
            let mut mask = Tensor::zeros(input.shape());
            for m in mask.data_mut() {
                *m = if rng::uniform(rng) < p { 0.0 } else { keep_scale };
            }
            let data = input
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&v, &m)| v * m)
                .collect();
            Ok((Tensor::from_vec(input.shape(), data)?, mask))
        }
    }
}

pub fn dropout_backward(d_out: &Tensor, mask: &Tensor) -> Tensor {
    let data = d_out
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&g, &m)| g * m)
        .collect();
    Tensor::from_vec(d_out.shape(), data).expect("same shape")
}

/// Per-pixel softmax across the channel axis of a C×H×W tensor, stabilized by
/// max subtraction.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::ShapeMismatch {
            context: "softmax_channels input must be C×H×W",
            expected: vec![3],
            got: vec![input.rank()],
        });
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let plane = h * w;
    let src = input.data();
    let mut out = vec![0.0; c * plane];
    for px in 0..plane {
        let mut m = f64::NEG_INFINITY;
        for ci in 0..c {
            m = m.max(src[ci * plane + px]);
        }
        let mut sum = 0.0;
        for ci in 0..c {
            let e = (src[ci * plane + px] - m).exp();
            out[ci * plane + px] = e;
            sum += e;
        }
        for ci in 0..c {
            out[ci * plane + px] /= sum;
        }
    }
    Tensor::from_vec(input.shape(), out)
}

/// Jacobian-vector product of the per-pixel softmax:
/// dx_c = p_c (dp_c − Σ_k dp_k p_k).
pub fn softmax_channels_backward(d_out: &Tensor, probs: &Tensor) -> Tensor {
    let (c, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let plane = h * w;
    let p = probs.data();
    let g = d_out.data();
    let mut d_in = vec![0.0; c * plane];
    for px in 0..plane {
        let mut dot = 0.0;
        for ci in 0..c {
            dot += g[ci * plane + px] * p[ci * plane + px];
        }
        for ci in 0..c {
            d_in[ci * plane + px] = p[ci * plane + px] * (g[ci * plane + px] - dot);
        }
    }
    Tensor::from_vec(probs.shape(), d_in).expect("same shape")
}

/// Nearest-neighbour 2× upsampling of a C×H×W tensor.
pub fn upsample2x_nearest(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let src = input.data();
    let mut out = vec![0.0; c * 4 * h * w];
    let (h2, w2) = (2 * h, 2 * w);
    for ci in 0..c {
        for y in 0..h2 {
            let s_row = &src[(ci * h + y / 2) * w..(ci * h + y / 2 + 1) * w];
            let d_row = &mut out[(ci * h2 + y) * w2..(ci * h2 + y + 1) * w2];
            for x in 0..w2 {
                d_row[x] = s_row[x / 2];
            }
        }
    }
    Tensor::from_vec(&[c, h2, w2], out).expect("upsample shape")
}

/// Backward of nearest-neighbour 2× upsampling: each input cell collects the
/// gradient of the 2×2 block it was copied to.
pub fn upsample2x_nearest_backward(d_out: &Tensor) -> Tensor {
    let (c, h2, w2) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let g = d_out.data();
    let mut d_in = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h2 {
            let g_row = &g[(ci * h2 + y) * w2..(ci * h2 + y + 1) * w2];
            let d_row = &mut d_in[(ci * h + y / 2) * w..(ci * h + y / 2 + 1) * w];
            for x in 0..w2 {
                d_row[x / 2] += g_row[x];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], d_in).expect("downsample shape")
}

/// Squared-error loss on a scalar prediction: (loss, dL/dpred).
pub fn mse_loss(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    (d * d, 2.0 * d)
}
