//! Single-sample layer kernels: forward and backward passes for
//! convolution, max-pooling, ReLU, fully-connected and softmax layers.
//!
//! All kernels are plain loops over `f64` slices. Within one sample the
//! accumulation order is fixed, which keeps whole-network training
//! bit-reproducible no matter how samples are distributed over threads.

use crate::linalg::{Matrix, Tensor4};

/// Spatial output size and top/left padding for a conv or pool window.
pub fn conv_output_dims(
    in_h: usize,
    in_w: usize,
    window: usize,
    stride: usize,
    same: bool,
) -> (usize, usize, usize, usize) {
    if same {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + window).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + window).saturating_sub(in_w);
        (out_h, out_w, pad_h / 2, pad_w / 2)
    } else {
        let out_h = (in_h - window) / stride + 1;
        let out_w = (in_w - window) / stride + 1;
        (out_h, out_w, 0, 0)
    }
}

/// Valid output-column range for a kernel column `kw`: all `ow` with
/// `0 <= ow*stride + kw - pad < in_w`.
#[inline]
fn ow_range(out_w: usize, in_w: usize, kw: usize, pad: usize, stride: usize) -> (usize, usize) {
    let start = if kw >= pad {
        0
    } else {
        (pad - kw).div_ceil(stride)
    };
    let limit = in_w + pad;
    let end = if kw >= limit {
        0
    } else {
        (((limit - kw - 1) / stride) + 1).min(out_w)
    };
    (start.min(end), end)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    input: &[f64],
    in_h: usize,
    in_w: usize,
    w: &Tensor4,
    bias: &[f64],
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out: &mut [f64],
    out_h: usize,
    out_w: usize,
) {
    let (s1, s2, c, m) = w.dims();
    debug_assert_eq!(input.len(), c * in_h * in_w);
    debug_assert_eq!(out.len(), m * out_h * out_w);

    for im in 0..m {
        let out_plane = &mut out[im * out_h * out_w..(im + 1) * out_h * out_w];
        out_plane.fill(bias[im]);
        for ic in 0..c {
            let in_plane = &input[ic * in_h * in_w..(ic + 1) * in_h * in_w];
            for kh in 0..s1 {
                for kw in 0..s2 {
                    let wv = w.at(kh, kw, ic, im);
                    let (ow0, ow1) = ow_range(out_w, in_w, kw, pad_left, stride);
                    if ow0 >= ow1 {
                        continue;
                    }
                    for oh in 0..out_h {
                        let ih = (oh * stride + kh) as isize - pad_top as isize;
                        if ih < 0 || ih >= in_h as isize {
                            continue;
                        }
                        let in_row = &in_plane[ih as usize * in_w..(ih as usize + 1) * in_w];
                        let out_row = &mut out_plane[oh * out_w..(oh + 1) * out_w];
                        if stride == 1 {
                            let off = ow0 * stride + kw - pad_left;
                            let src = &in_row[off..off + (ow1 - ow0)];
                            for (o, &x) in out_row[ow0..ow1].iter_mut().zip(src) {
                                *o += wv * x;
                            }
                        } else {
                            for ow in ow0..ow1 {
                                out_row[ow] += wv * in_row[ow * stride + kw - pad_left];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of one sample's conv layer. `d_w`/`d_bias` are accumulated
/// into (callers zero them per accumulation chunk); `d_input` is
/// overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f64],
    in_h: usize,
    in_w: usize,
    w: &Tensor4,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    d_out: &[f64],
    out_h: usize,
    out_w: usize,
    d_w: &mut Tensor4,
    d_bias: &mut [f64],
    d_input: &mut [f64],
) {
    let (s1, s2, c, m) = w.dims();
    d_input.fill(0.0);

    for im in 0..m {
        let dout_plane = &d_out[im * out_h * out_w..(im + 1) * out_h * out_w];
        d_bias[im] += dout_plane.iter().sum::<f64>();
        for ic in 0..c {
            let in_plane = &input[ic * in_h * in_w..(ic + 1) * in_h * in_w];
            let din_plane = &mut d_input[ic * in_h * in_w..(ic + 1) * in_h * in_w];
            for kh in 0..s1 {
                for kw in 0..s2 {
                    let (ow0, ow1) = ow_range(out_w, in_w, kw, pad_left, stride);
                    if ow0 >= ow1 {
                        continue;
                    }
                    let wv = w.at(kh, kw, ic, im);
                    let mut grad_w = 0.0;
                    for oh in 0..out_h {
                        let ih = (oh * stride + kh) as isize - pad_top as isize;
                        if ih < 0 || ih >= in_h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        let dout_row = &dout_plane[oh * out_w..(oh + 1) * out_w];
                        if stride == 1 {
                            let off = ow0 + kw - pad_left;
                            let width = ow1 - ow0;
                            let in_row = &in_plane[ih * in_w + off..ih * in_w + off + width];
                            let din_row =
                                &mut din_plane[ih * in_w + off..ih * in_w + off + width];
                            for ((&g, &x), di) in
                                dout_row[ow0..ow1].iter().zip(in_row).zip(din_row)
                            {
                                grad_w += g * x;
                                *di += wv * g;
                            }
                        } else {
                            for ow in ow0..ow1 {
                                let iw = ow * stride + kw - pad_left;
                                let g = dout_row[ow];
                                grad_w += g * in_plane[ih * in_w + iw];
                                din_plane[ih * in_w + iw] += wv * g;
                            }
                        }
                    }
                    let idx = d_w.idx(kh, kw, ic, im);
                    d_w.data_mut()[idx] += grad_w;
                }
            }
        }
    }
}

/// Max pooling; `argmax` records the flat input index of each maximum
/// (first occurrence wins on ties).
#[allow(clippy::too_many_arguments)]
pub fn maxpool_forward(
    input: &[f64],
    channels: usize,
    in_h: usize,
    in_w: usize,
    window: usize,
    stride: usize,
    out: &mut [f64],
    out_h: usize,
    out_w: usize,
    argmax: &mut [usize],
) {
    for ch in 0..channels {
        let in_base = ch * in_h * in_w;
        let out_base = ch * out_h * out_w;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = in_base + oh * stride * in_w + ow * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = in_base + (oh * stride + dy) * in_w + (ow * stride + dx);
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[out_base + oh * out_w + ow] = best;
                argmax[out_base + oh * out_w + ow] = best_idx;
            }
        }
    }
}

pub fn maxpool_backward(d_out: &[f64], argmax: &[usize], d_input: &mut [f64]) {
    d_input.fill(0.0);
    for (o, &idx) in d_out.iter().zip(argmax) {
        d_input[idx] += o;
    }
}

pub fn relu_forward(input: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = if x > 0.0 { x } else { 0.0 };
    }
}

pub fn relu_backward(input: &[f64], d_out: &[f64], d_input: &mut [f64]) {
    for ((di, &x), &g) in d_input.iter_mut().zip(input).zip(d_out) {
        *di = if x > 0.0 { g } else { 0.0 };
    }
}

/// `out = W·input + b` with `W` stored row-per-output.
pub fn fc_forward(input: &[f64], w: &Matrix, bias: &[f64], out: &mut [f64]) {
    for (o, (row, &b)) in out.iter_mut().zip((0..w.rows()).map(|r| w.row(r)).zip(bias)) {
        let dot: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum();
        *o = dot + b;
    }
}

pub fn fc_backward(
    input: &[f64],
    w: &Matrix,
    d_out: &[f64],
    d_w: &mut [f64],
    d_bias: &mut [f64],
    d_input: &mut [f64],
) {
    let (out_dim, in_dim) = (w.rows(), w.cols());
    d_input.fill(0.0);
    for o in 0..out_dim {
        let g = d_out[o];
        d_bias[o] += g;
        let w_row = w.row(o);
        let dw_row = &mut d_w[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            dw_row[i] += g * input[i];
            d_input[i] += g * w_row[i];
        }
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_conv_is_scalar_multiply() {
        let w = Tensor4::new(1, 1, 1, 1, vec![2.0]).unwrap();
        let input = [3.0];
        let mut out = [0.0];
        conv_forward(&input, 1, 1, &w, &[0.0], 1, 0, 0, &mut out, 1, 1);
        assert_eq!(out[0], 6.0);
    }

    #[test]
    fn conv_valid_hand_example() {
        // 3x3 input, 2x2 kernel of ones: each output = sum of a 2x2 patch.
        let input = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let w = Tensor4::new(2, 2, 1, 1, vec![1.0; 4]).unwrap();
        let mut out = [0.0; 4];
        conv_forward(&input, 3, 3, &w, &[0.0], 1, 0, 0, &mut out, 2, 2);
        assert_eq!(out, [12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_same_padding_dims() {
        let (oh, ow, pt, pl) = conv_output_dims(28, 28, 5, 1, true);
        assert_eq!((oh, ow, pt, pl), (28, 28, 2, 2));
        let (oh, ow, pt, pl) = conv_output_dims(12, 12, 5, 1, false);
        assert_eq!((oh, ow, pt, pl), (8, 8, 0, 0));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let input = [1.0, 4.0, 2.0, 3.0];
        let mut out = [0.0];
        let mut argmax = [0usize];
        maxpool_forward(&input, 1, 2, 2, 2, 2, &mut out, 1, 1, &mut argmax);
        assert_eq!(out[0], 4.0);
        assert_eq!(argmax[0], 1);
        let mut din = [9.0; 4];
        maxpool_backward(&[5.0], &argmax, &mut din);
        assert_eq!(din, [0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let logits = [1.0, -2.0, 0.5, 3.0];
        let mut probs = [0.0; 4];
        softmax_row(&logits, &mut probs);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}
