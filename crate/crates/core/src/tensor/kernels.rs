//! Loop kernels behind the windowed primitives of the tape.

use super::graph::{Axis, ConvKernel};
use super::{Shape, Tensor};

/// Output extent of a strided window sweep.
pub(crate) fn window_out(len: usize, pad: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Range of output positions `o` with `o * stride + k - pad` inside `0..len`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &ConvKernel,
    stride: usize,
    pad: (usize, usize),
    out_shape: Shape,
) -> Tensor {
    let (oh, ow) = (out_shape.height, out_shape.width);
    let positions = oh * ow;
    let cols = im2col(input, kernel, stride, pad, oh, ow);
    let taps = kernel.in_channels * kernel.height * kernel.width;
    let mut out = vec![0.0; out_shape.numel()];
    if let Some(b) = &kernel.bias {
        for (plane, &bv) in out.chunks_exact_mut(positions).zip(b.iter()) {
            plane.fill(bv);
        }
    }
    // Axpy over the unfolded input in position blocks small enough to stay
    // in cache. Each output still accumulates its taps in (ci, ky, kx) order.
    const BLOCK: usize = 128;
    for p0 in (0..positions).step_by(BLOCK) {
        let p1 = (p0 + BLOCK).min(positions);
        for co in 0..kernel.out_channels {
            let dst = &mut out[co * positions + p0..co * positions + p1];
            let w = &kernel.weights[co * taps..(co + 1) * taps];
            for (k, &wv) in w.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (o, c) in dst.iter_mut().zip(&cols[k * positions + p0..k * positions + p1]) {
                    *o += wv * c;
                }
            }
        }
    }
    Tensor::new(out_shape, out).expect("conv output shape")
}

/// Unfolds the input into a `(taps, positions)` matrix; padded taps are zero.
fn im2col(input: &Tensor, kernel: &ConvKernel, stride: usize, pad: (usize, usize), oh: usize, ow: usize) -> Vec<f64> {
    let s = input.shape();
    let inp = input.data();
    let positions = oh * ow;
    let mut cols = vec![0.0; kernel.in_channels * kernel.height * kernel.width * positions];
    let mut k = 0;
    for ci in 0..kernel.in_channels {
        let in_plane = &inp[ci * s.plane()..(ci + 1) * s.plane()];
        for ky in 0..kernel.height {
            let (oy_lo, oy_hi) = valid_range(oh, s.height, ky, pad.0, stride);
            for kx in 0..kernel.width {
                let (ox_lo, ox_hi) = valid_range(ow, s.width, kx, pad.1, stride);
                let row = &mut cols[k * positions..(k + 1) * positions];
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad.0;
                    let row_in = &in_plane[iy * s.width..(iy + 1) * s.width];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        dst[ox] = row_in[ox * stride + kx - pad.1];
                    }
                }
                k += 1;
            }
        }
    }
    cols
}

/// Adjoint of the convolution with respect to its input.
pub(crate) fn conv2d_backward(
    grad_out: &Tensor,
    kernel: &ConvKernel,
    stride: usize,
    pad: (usize, usize),
    in_shape: Shape,
) -> Tensor {
    let go = grad_out.data();
    let (oh, ow) = (grad_out.shape().height, grad_out.shape().width);
    let mut gin = vec![0.0; in_shape.numel()];
    let nonzero = go.iter().filter(|v| **v != 0.0).count();
    if nonzero * 8 < go.len() {
        // Sparse adjoints (max pooling downstream): scatter per nonzero entry.
        for (idx, &g) in go.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let co = idx / (oh * ow);
            let oy = (idx / ow) % oh;
            let ox = idx % ow;
            for ci in 0..kernel.in_channels {
                for ky in 0..kernel.height {
                    let iy = (oy * stride + ky) as isize - pad.0 as isize;
                    if iy < 0 || iy >= in_shape.height as isize {
                        continue;
                    }
                    for kx in 0..kernel.width {
                        let ix = (ox * stride + kx) as isize - pad.1 as isize;
                        if ix < 0 || ix >= in_shape.width as isize {
                            continue;
                        }
                        gin[(ci * in_shape.height + iy as usize) * in_shape.width + ix as usize] +=
                            g * kernel.weight(co, ci, ky, kx);
                    }
                }
            }
        }
        return Tensor::new(in_shape, gin).expect("conv input shape");
    }
    for co in 0..kernel.out_channels {
        let g_plane = &go[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..kernel.in_channels {
            let in_plane = &mut gin[ci * in_shape.plane()..(ci + 1) * in_shape.plane()];
            for ky in 0..kernel.height {
                let (oy_lo, oy_hi) = valid_range(oh, in_shape.height, ky, pad.0, stride);
                for kx in 0..kernel.width {
                    let wv = kernel.weight(co, ci, ky, kx);
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(ow, in_shape.width, kx, pad.1, stride);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad.0;
                        let row_g = &g_plane[oy * ow..(oy + 1) * ow];
                        let row_in = &mut in_plane[iy * in_shape.width..(iy + 1) * in_shape.width];
                        if stride == 1 {
                            let start = ox_lo + kx - pad.1;
                            for (i, g) in row_in[start..start + (ox_hi - ox_lo)]
                                .iter_mut()
                                .zip(&row_g[ox_lo..ox_hi])
                            {
                                *i += wv * g;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row_in[ox * stride + kx - pad.1] += wv * row_g[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, gin).expect("conv input shape")
}

/// Adjoint of the convolution with respect to its weights and bias.
pub(crate) fn conv2d_parameter_backward(
    input: &Tensor,
    grad_out: &Tensor,
    kernel: &ConvKernel,
    stride: usize,
    pad: (usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let s = input.shape();
    let inp = input.data();
    let go = grad_out.data();
    let (oh, ow) = (grad_out.shape().height, grad_out.shape().width);
    let mut gw = vec![0.0; kernel.weights.len()];
    let mut gb = vec![0.0; kernel.out_channels];
    for co in 0..kernel.out_channels {
        let g_plane = &go[co * oh * ow..(co + 1) * oh * ow];
        gb[co] = g_plane.iter().sum();
        for ci in 0..kernel.in_channels {
            let in_plane = &inp[ci * s.plane()..(ci + 1) * s.plane()];
            for ky in 0..kernel.height {
                let (oy_lo, oy_hi) = valid_range(oh, s.height, ky, pad.0, stride);
                for kx in 0..kernel.width {
                    let (ox_lo, ox_hi) = valid_range(ow, s.width, kx, pad.1, stride);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad.0;
                        let row_in = &in_plane[iy * s.width..(iy + 1) * s.width];
                        let row_g = &g_plane[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            acc += row_g[ox] * row_in[ox * stride + kx - pad.1];
                        }
                    }
                    gw[((co * kernel.in_channels + ci) * kernel.height + ky) * kernel.width + kx] = acc;
                }
            }
        }
    }
    (gw, gb)
}

/// Depthwise valid correlation with a 1-D tap vector along one spatial axis.
pub(crate) fn filter1d_forward(
    input: &Tensor,
    taps: &[f64],
    axis: Axis,
    stride: usize,
    out_shape: Shape,
) -> Tensor {
    let s = input.shape();
    let inp = input.data();
    let mut out = vec![0.0; out_shape.numel()];
    let (oh, ow) = (out_shape.height, out_shape.width);
    for c in 0..s.channels {
        let in_plane = &inp[c * s.plane()..(c + 1) * s.plane()];
        let out_plane = &mut out[c * oh * ow..(c + 1) * oh * ow];
        match axis {
            Axis::Width => {
                for y in 0..oh {
                    let row_in = &in_plane[y * s.width..(y + 1) * s.width];
                    let row_out = &mut out_plane[y * ow..(y + 1) * ow];
                    for (ox, o) in row_out.iter_mut().enumerate() {
                        let base = ox * stride;
                        *o = taps
                            .iter()
                            .zip(&row_in[base..base + taps.len()])
                            .map(|(t, v)| t * v)
                            .sum();
                    }
                }
            }
            Axis::Height => {
                for oy in 0..oh {
                    let row_out = &mut out_plane[oy * ow..(oy + 1) * ow];
                    for (k, &t) in taps.iter().enumerate() {
                        let iy = oy * stride + k;
                        let row_in = &in_plane[iy * s.width..iy * s.width + ow];
                        for (o, v) in row_out.iter_mut().zip(row_in) {
                            *o += t * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, out).expect("filter output shape")
}

pub(crate) fn filter1d_backward(
    grad_out: &Tensor,
    taps: &[f64],
    axis: Axis,
    stride: usize,
    in_shape: Shape,
) -> Tensor {
    let go = grad_out.data();
    let (oh, ow) = (grad_out.shape().height, grad_out.shape().width);
    let mut gin = vec![0.0; in_shape.numel()];
    for c in 0..in_shape.channels {
        let g_plane = &go[c * oh * ow..(c + 1) * oh * ow];
        let in_plane = &mut gin[c * in_shape.plane()..(c + 1) * in_shape.plane()];
        match axis {
            Axis::Width => {
                for y in 0..oh {
                    let row_g = &g_plane[y * ow..(y + 1) * ow];
                    let row_in = &mut in_plane[y * in_shape.width..(y + 1) * in_shape.width];
                    for (ox, &g) in row_g.iter().enumerate() {
                        let base = ox * stride;
                        for (i, t) in row_in[base..base + taps.len()].iter_mut().zip(taps) {
                            *i += t * g;
                        }
                    }
                }
            }
            Axis::Height => {
                for oy in 0..oh {
                    let row_g = &g_plane[oy * ow..(oy + 1) * ow];
                    for (k, &t) in taps.iter().enumerate() {
                        let iy = oy * stride + k;
                        let row_in = &mut in_plane[iy * in_shape.width..iy * in_shape.width + ow];
                        for (i, g) in row_in.iter_mut().zip(row_g) {
                            *i += t * g;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, gin).expect("filter input shape")
}

/// Half-open cell bounds of an adaptive `cells`-way split of `len`.
pub(crate) fn cell_bounds(len: usize, cells: usize, i: usize) -> (usize, usize) {
    let start = i * len / cells;
    let end = ((i + 1) * len).div_ceil(cells);
    (start, end)
}
