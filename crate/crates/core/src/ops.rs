//! Forward and backward kernels for every layer in the network.
//!
//! All kernels are pure functions: no internal state, no hidden buffers.
//! Convolution lowers to an explicit im2col matrix followed by a GEMM, which
//! is where essentially all training time is spent. Backward passes return
//! gradients shaped exactly like their primals; `maxpool2` additionally
//! returns the argmax routing needed by its backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, idx3, Scalar, Tensor, Trans};

/// Whether a pass is part of training (dropout active, activations cached)
/// or inference (deterministic).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// `(c_in, h, w, c_out, kh, kw, oh, ow)` as resolved by [`conv_check`].
type ConvDims = (usize, usize, usize, usize, usize, usize, usize, usize);

fn conv_check<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    pad: usize,
) -> Result<ConvDims> {
    let ishape = input.shape();
    let wshape = weights.shape();
    if ishape.len() != 3 {
        return Err(Error::Shape(format!(
            "conv2d input must be [C,H,W], got {ishape:?}"
        )));
    }
    if wshape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d weights must be [C_out,C_in,kH,kW], got {wshape:?}"
        )));
    }
    let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (c_out, wc_in, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if wc_in != c_in {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {c_in} channels, weights expect {wc_in}"
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Shape(format!(
            "conv2d bias length {} != output channels {c_out}",
            bias.len()
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    Ok((c_in, h, w, c_out, kh, kw, oh, ow))
}

/// Expands `input` into the im2col matrix `[C_in·kH·kW, oh·ow]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    debug_assert_eq!(cols.len(), c_in * kh * kw * oh * ow);
    let n = oh * ow;
    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * n;
                for oy in 0..oh {
                    // Input row for this output row, shifted by padding.
                    let iy = oy + ky;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < pad || iy >= h + pad {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let iy = iy - pad;
                    // Valid output columns are those whose input column
                    // ox + kx - pad lands in [0, w).
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad - kx).min(ow);
                    dst[..lo.min(ow)].fill(T::ZERO);
                    if hi < ow {
                        dst[hi..].fill(T::ZERO);
                    }
                    if lo < hi {
                        let src =
                            &plane[iy * w + (lo + kx - pad)..iy * w + (hi - 1 + kx - pad) + 1];
                        dst[lo..hi].copy_from_slice(src);
                    }
                }
            }
        }
    }
}

/// Scatter-adds an im2col-shaped gradient back onto the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    grad_input: &mut [T],
) {
    let n = oh * ow;
    for c in 0..c_in {
        let plane_off = c * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * n;
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad - kx).min(ow);
                    for ox in lo..hi {
                        let ix = ox + kx - pad;
                        grad_input[plane_off + iy * w + ix] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Stride-1 2-D convolution. Output spatial size is `H + 2·pad − kH + 1`;
/// with `pad = (k−1)/2` for odd `k` the input size is preserved.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    pad: usize,
) -> Result<Tensor<T>> {
    let (c_in, h, w, c_out, kh, kw, oh, ow) = conv_check(input, weights, bias, pad)?;
    let k = c_in * kh * kw;
    let n = oh * ow;
    let mut cols = vec![T::ZERO; k * n];
    im2col(input.as_slice(), c_in, h, w, kh, kw, pad, oh, ow, &mut cols);

    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    gemm(
        c_out,
        k,
        n,
        weights.as_slice(),
        Trans::No,
        &cols,
        Trans::No,
        T::ZERO,
        out.as_mut_slice(),
    );
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out.as_mut_slice()[c * n..(c + 1) * n] {
            *v += b;
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weights, and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    pad: usize,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (c_in, h, w, c_out, kh, kw, oh, ow) = conv_check(input, weights, bias, pad)?;
    if upstream.shape() != [c_out, oh, ow] {
        return Err(Error::Shape(format!(
            "conv2d upstream shape {:?} != output shape [{c_out}, {oh}, {ow}]",
            upstream.shape()
        )));
    }
    let k = c_in * kh * kw;
    let n = oh * ow;
    let mut cols = vec![T::ZERO; k * n];
    im2col(input.as_slice(), c_in, h, w, kh, kw, pad, oh, ow, &mut cols);

    // dL/dW = upstream · colsᵀ
    let mut grad_w = Tensor::zeros(weights.shape());
    gemm(
        c_out,
        n,
        k,
        upstream.as_slice(),
        Trans::No,
        &cols,
        Trans::Yes,
        T::ZERO,
        grad_w.as_mut_slice(),
    );

    // dL/db = row sums of upstream
    let mut grad_b = vec![T::ZERO; c_out];
    for (c, gb) in grad_b.iter_mut().enumerate() {
        let mut acc = T::ZERO;
        for &g in &upstream.as_slice()[c * n..(c + 1) * n] {
            acc += g;
        }
        *gb = acc;
    }

    // dL/dcols = Wᵀ · upstream, scattered back through col2im.
    let mut grad_cols = vec![T::ZERO; k * n];
    gemm(
        k,
        c_out,
        n,
        weights.as_slice(),
        Trans::Yes,
        upstream.as_slice(),
        Trans::No,
        T::ZERO,
        &mut grad_cols,
    );
    let mut grad_input = Tensor::zeros(input.shape());
    col2im(
        &grad_cols,
        c_in,
        h,
        w,
        kh,
        kw,
        pad,
        oh,
        ow,
        grad_input.as_mut_slice(),
    );
    Ok((grad_input, grad_w, grad_b))
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index of its maximum (ties resolved to the first
/// element in row-major window order) for gradient routing.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let shape = input.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "maxpool2 input must be [C,H,W], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = vec![0u32; c * oh * ow];
    let src = input.as_slice();
    let dst = out.as_mut_slice();
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = idx3(h, w, ci, 2 * oy, 2 * ox);
                let window = [base, base + 1, base + w, base + w + 1];
                let mut best = window[0];
                for &pos in &window[1..] {
                    if src[pos] > src[best] {
                        best = pos;
                    }
                }
                let o = idx3(oh, ow, ci, oy, ox);
                dst[o] = src[best];
                argmax[o] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes the upstream gradient to each window's argmax position.
pub fn maxpool2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if upstream.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "maxpool2 upstream has {} elements, argmax has {}",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.as_mut_slice();
    for (&pos, &up) in argmax.iter().zip(upstream.as_slice()) {
        g[pos as usize] += up;
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

/// Elementwise `max(0, x)`.
pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.as_mut_slice() {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
    out
}

/// Upstream masked by `indicator(x > 0)`; the subgradient at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "relu upstream shape {:?} != input shape {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    let mut grad = upstream.clone();
    for (g, &x) in grad.as_mut_slice().iter_mut().zip(input.as_slice()) {
        if x <= T::ZERO {
            *g = T::ZERO;
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// Affine map `W·x + b` with `W: [m, n]`.
pub fn fully_connected_forward<T: Scalar>(
    input: &[T],
    weights: &Tensor<T>,
    bias: &[T],
) -> Result<Vec<T>> {
    let shape = weights.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "fully_connected weights must be [m,n], got {shape:?}"
        )));
    }
    let (m, n) = (shape[0], shape[1]);
    if input.len() != n {
        return Err(Error::Shape(format!(
            "fully_connected input length {} != weight columns {n}",
            input.len()
        )));
    }
    if bias.len() != m {
        return Err(Error::Shape(format!(
            "fully_connected bias length {} != weight rows {m}",
            bias.len()
        )));
    }
    let mut out = bias.to_vec();
    gemm(
        m,
        n,
        1,
        weights.as_slice(),
        Trans::No,
        input,
        Trans::No,
        T::ONE,
        &mut out,
    );
    Ok(out)
}

/// Gradients of [`fully_connected_forward`]: `(dL/dx, dL/dW, dL/db)`.
pub fn fully_connected_backward<T: Scalar>(
    input: &[T],
    weights: &Tensor<T>,
    upstream: &[T],
) -> Result<(Vec<T>, Tensor<T>, Vec<T>)> {
    let shape = weights.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "fully_connected weights must be [m,n], got {shape:?}"
        )));
    }
    let (m, n) = (shape[0], shape[1]);
    if input.len() != n || upstream.len() != m {
        return Err(Error::Shape(format!(
            "fully_connected backward: input {} / upstream {} vs weights [{m},{n}]",
            input.len(),
            upstream.len()
        )));
    }
    // dL/dx = Wᵀ · upstream
    let mut grad_input = vec![T::ZERO; n];
    gemm(
        n,
        m,
        1,
        weights.as_slice(),
        Trans::Yes,
        upstream,
        Trans::No,
        T::ZERO,
        &mut grad_input,
    );
    // dL/dW = upstream · xᵀ (outer product)
    let mut grad_w = Tensor::zeros(&[m, n]);
    gemm(
        m,
        1,
        n,
        upstream,
        Trans::No,
        input,
        Trans::No,
        T::ZERO,
        grad_w.as_mut_slice(),
    );
    Ok((grad_input, grad_w, upstream.to_vec()))
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Max-subtraction-stabilized softmax with cross-entropy loss.
///
/// Returns `(probabilities, −log p[label])`. The loss uses the algebraically
/// equivalent `log Σ exp(x−max) − (x[label]−max)` form, which stays finite
/// even when `p[label]` underflows to zero.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(Vec<T>, f64)> {
    if logits.len() < 2 {
        return Err(Error::Shape(format!(
            "softmax needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &x| acc.max(x.to_f64()));
    if !max.is_finite() {
        return Err(Error::Numeric("non-finite logit in softmax".into()));
    }
    let mut probs = vec![T::ZERO; logits.len()];
    let mut denom = 0.0f64;
    for &x in logits {
        denom += (x.to_f64() - max).exp();
    }
    for (p, &x) in probs.iter_mut().zip(logits) {
        *p = T::from_f64((x.to_f64() - max).exp() / denom);
    }
    let loss = denom.ln() - (logits[label].to_f64() - max);
    Ok((probs, loss))
}

/// Gradient of the loss w.r.t. the logits: `p − onehot(label)`.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &[T], label: usize) -> Result<Vec<T>> {
    if label >= probs.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let mut grad = probs.to_vec();
    grad[label] = grad[label] - T::ONE;
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout. In train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1−rate)`, so inference is exactly
/// the identity. Returns the survivor mask for the backward pass (`None` in
/// inference mode).
pub fn dropout_forward<T: Scalar>(
    input: &Tensor<T>,
    rate: f64,
    rng: &mut ChaCha8Rng,
    mode: Mode,
) -> Result<(Tensor<T>, Option<Vec<bool>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Inference || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let scale = T::from_f64(1.0 / (1.0 - rate));
    let mut out = input.clone();
    let mut mask = vec![false; input.len()];
    for (v, keep) in out.as_mut_slice().iter_mut().zip(mask.iter_mut()) {
        if rng.random::<f64>() < rate {
            *v = T::ZERO;
        } else {
            *v = *v * scale;
            *keep = true;
        }
    }
    Ok((out, Some(mask)))
}

/// Backward pass: upstream scaled by `1/(1−rate)` where the mask kept the
/// element, zero elsewhere. A `None` mask (inference / rate 0) is identity.
pub fn dropout_backward<T: Scalar>(
    upstream: &Tensor<T>,
    mask: Option<&[bool]>,
    rate: f64,
) -> Result<Tensor<T>> {
    let Some(mask) = mask else {
        return Ok(upstream.clone());
    };
    if mask.len() != upstream.len() {
        return Err(Error::Shape(format!(
            "dropout mask length {} != upstream length {}",
            mask.len(),
            upstream.len()
        )));
    }
    let scale = T::from_f64(1.0 / (1.0 - rate));
    let mut grad = upstream.clone();
    for (g, &keep) in grad.as_mut_slice().iter_mut().zip(mask) {
        *g = if keep { *g * scale } else { T::ZERO };
    }
    Ok(grad)
}
