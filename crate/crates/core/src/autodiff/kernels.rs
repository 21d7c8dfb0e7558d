//! Forward and adjoint kernels on raw row-major buffers.

use super::direct;
use super::tensor::Real;

/// Unfolds one `C×H×W` image into a `(C·9)×(H·W)` patch matrix for a 3×3 same-padded conv.
pub(crate) fn im2col<T: Real>(img: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Narrower planes have rows too short for the direct kernel-gradient loop.
const DIRECT_KERNEL_GRAD_MIN_WIDTH: usize = 32;

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn conv2d_forward<T: Real>(
    d: &ConvDims,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.c_out * d.h * d.w];
    direct::conv_forward(
        d.n, input, kernel, bias, d.c_in, d.c_out, d.h, d.w, false, &mut out,
    );
    out
}

/// Accumulates conv adjoints. `d_input` is skipped when the input needs no gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    d: &ConvDims,
    input: &[T],
    kernel: &[T],
    d_out: &[T],
    d_input: Option<&mut [T]>,
    d_kernel: Option<&mut [T]>,
    d_bias: Option<&mut [T]>,
) {
    let hw = d.h * d.w;
    if let Some(db) = d_bias {
        for n in 0..d.n {
            for (co, plane) in d_out[n * d.c_out * hw..][..d.c_out * hw]
                .chunks_exact(hw)
                .enumerate()
            {
                let s: T = plane.iter().copied().sum();
                db[co] = db[co] + s;
            }
        }
    }
    if let Some(dk) = d_kernel {
        if d.w >= DIRECT_KERNEL_GRAD_MIN_WIDTH {
            direct::conv_kernel_grad(d.n, input, d_out, d.c_in, d.c_out, d.h, d.w, dk);
        } else {
            let k9 = d.c_in * 9;
            let mut col = vec![T::zero(); k9 * hw];
            for n in 0..d.n {
                im2col(
                    &input[n * d.c_in * hw..][..d.c_in * hw],
                    d.c_in,
                    d.h,
                    d.w,
                    &mut col,
                );
                let dy = &d_out[n * d.c_out * hw..][..d.c_out * hw];
                T::gemm(
                    d.c_out,
                    hw,
                    k9,
                    dy,
                    hw as isize,
                    1,
                    &col,
                    1,
                    hw as isize,
                    T::one(),
                    dk,
                    k9 as isize,
                    1,
                );
            }
        }
    }
    if let Some(dx) = d_input {
        // The input adjoint is a forward conv of d_out with the flipped, transposed kernel.
        let zero = vec![T::zero(); d.c_in];
        let mut tmp = vec![T::zero(); dx.len()];
        direct::conv_forward(
            d.n, d_out, kernel, &zero, d.c_out, d.c_in, d.h, d.w, true, &mut tmp,
        );
        for (a, b) in dx.iter_mut().zip(&tmp) {
            *a = *a + *b;
        }
    }
}

/// 2×2 max pooling; returns the pooled values and the flat input index of each maximum
/// (first index wins ties, scanning row-major within the window).
pub(crate) fn maxpool2_forward<T: Real>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let idx = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = idx[0];
                for &i in &idx[1..] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward<T: Real>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * w..][..w];
            let drow = &mut dst[y * ow..][..ow];
            for (x, v) in drow.iter_mut().enumerate() {
                *v = srow[x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(
    d_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    d_in: &mut [T],
) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &d_out[p * oh * ow..][..oh * ow];
        let dst = &mut d_in[p * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                let i = (y / 2) * w + x / 2;
                dst[i] = dst[i] + src[y * ow + x];
            }
        }
    }
}
