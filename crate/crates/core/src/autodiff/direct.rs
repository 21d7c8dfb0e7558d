//! Register-blocked direct 3×3 convolution.
//!
//! Output channels are processed in blocks of up to 8 and pixels in runs of 8, so each
//! padded input vector is loaded once per tap and reused across the whole channel block.
//! Multiplies and adds stay separate (no fused multiply-add), so the result does not
//! depend on which instruction set the dispatcher picks.

use super::tensor::Real;

const LANES: usize = 8;

/// Copies `c` planes of `h×w` into zero-bordered `(h+2)×(w+2)` planes.
fn pad_planes<T: Real>(src: &[T], c: usize, h: usize, w: usize, dst: &mut Vec<T>) {
    let (ph, pw) = (h + 2, w + 2);
    dst.clear();
    dst.resize(c * ph * pw, T::zero());
    for ci in 0..c {
        for y in 0..h {
            let s = &src[(ci * h + y) * w..][..w];
            dst[(ci * ph + y + 1) * pw + 1..][..w].copy_from_slice(s);
        }
    }
}

/// One output-channel block of width `CB` over every pixel of one sample.
/// `wt` is laid out `[ci][tap][CB]`.
#[inline(always)]
fn forward_block<T: Real, const CB: usize>(
    padded: &[T],
    wt: &[T],
    bias: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    out: &mut [T],
) {
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let hw = h * w;
    for y in 0..h {
        let mut x0 = 0;
        while x0 + LANES <= w {
            let mut acc = [[T::zero(); LANES]; CB];
            for (c, a) in acc.iter_mut().enumerate() {
                *a = [bias[c]; LANES];
            }
            for ci in 0..c_in {
                let base = ci * plane;
                let wc = &wt[ci * 9 * CB..][..9 * CB];
                for ky in 0..3 {
                    let row = &padded[base + (y + ky) * pw + x0..][..LANES + 2];
                    for kx in 0..3 {
                        let v: [T; LANES] = row[kx..kx + LANES].try_into().unwrap();
                        let wk = &wc[(ky * 3 + kx) * CB..][..CB];
                        for c in 0..CB {
                            for l in 0..LANES {
                                acc[c][l] = acc[c][l] + wk[c] * v[l];
                            }
                        }
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out[c * hw + y * w + x0..][..LANES].copy_from_slice(a);
            }
            x0 += LANES;
        }
        for x in x0..w {
            let mut acc = [T::zero(); CB];
            acc.copy_from_slice(&bias[..CB]);
            for ci in 0..c_in {
                let base = ci * plane;
                let wc = &wt[ci * 9 * CB..][..9 * CB];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let v = padded[base + (y + ky) * pw + x + kx];
                        let wk = &wc[(ky * 3 + kx) * CB..][..CB];
                        for c in 0..CB {
                            acc[c] = acc[c] + wk[c] * v;
                        }
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out[c * hw + y * w + x] = *a;
            }
        }
    }
}

/// Reorders `C_out×C_in×3×3` weights for the block `[co0, co0+cb)` into `[ci][tap][cb]`.
/// With `flip` the kernel is read as its spatially flipped transpose (`C_in` and `C_out`
/// swapped), which turns the forward kernel into the input-gradient kernel.
fn block_weights<T: Real>(
    kernel: &[T],
    c_in: usize,
    c_out: usize,
    co0: usize,
    cb: usize,
    flip: bool,
    dst: &mut Vec<T>,
) {
    dst.clear();
    dst.resize(c_in * 9 * cb, T::zero());
    for ci in 0..c_in {
        for tap in 0..9 {
            for c in 0..cb {
                let co = co0 + c;
                dst[(ci * 9 + tap) * cb + c] = if flip {
                    // kernel is stored as [ci_fwd = co][co_fwd = ci]
                    kernel[(ci * c_out + co) * 9 + (8 - tap)]
                } else {
                    kernel[(co * c_in + ci) * 9 + tap]
                };
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn forward_all<T: Real>(
    n: usize,
    input: &[T],
    kernel: &[T],
    bias: &[T],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    flip: bool,
    out: &mut [T],
) {
    let hw = h * w;
    let mut blocks = Vec::new();
    let mut co0 = 0;
    while co0 < c_out {
        let rest = c_out - co0;
        let cb = if rest >= 8 {
            8
        } else if rest >= 4 {
            4
        } else if rest >= 2 {
            2
        } else {
            1
        };
        let mut wt = Vec::new();
        block_weights(kernel, c_in, c_out, co0, cb, flip, &mut wt);
        blocks.push((co0, cb, wt));
        co0 += cb;
    }
    let mut padded = Vec::new();
    for s in 0..n {
        pad_planes(
            &input[s * c_in * hw..][..c_in * hw],
            c_in,
            h,
            w,
            &mut padded,
        );
        let out_s = &mut out[s * c_out * hw..][..c_out * hw];
        for (co0, cb, wt) in &blocks {
            let b = &bias[*co0..co0 + cb];
            let o = &mut out_s[co0 * hw..(co0 + cb) * hw];
            match cb {
                8 => forward_block::<T, 8>(&padded, wt, b, c_in, h, w, o),
                4 => forward_block::<T, 4>(&padded, wt, b, c_in, h, w, o),
                2 => forward_block::<T, 2>(&padded, wt, b, c_in, h, w, o),
                _ => forward_block::<T, 1>(&padded, wt, b, c_in, h, w, o),
            }
        }
    }
}

/// Kernel gradient summed over samples, accumulated into `dk` (`C_out×C_in×3×3`).
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn kernel_grad_all<T: Real>(
    n: usize,
    input: &[T],
    d_out: &[T],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    dk: &mut [T],
) {
    let hw = h * w;
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let mut padded = Vec::new();
    // Per-lane partial sums, reduced once at the end so the order is fixed.
    let mut acc = vec![[[T::zero(); LANES]; 9]; c_out * c_in];
    let mut tail = vec![[T::zero(); 9]; c_out * c_in];
    for s in 0..n {
        pad_planes(
            &input[s * c_in * hw..][..c_in * hw],
            c_in,
            h,
            w,
            &mut padded,
        );
        let dy_s = &d_out[s * c_out * hw..][..c_out * hw];
        for co in 0..c_out {
            let dy = &dy_s[co * hw..][..hw];
            for ci in 0..c_in {
                let base = ci * plane;
                let a = &mut acc[co * c_in + ci];
                let t = &mut tail[co * c_in + ci];
                let full = w - w % LANES;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut lane = a[ky * 3 + kx];
                        let mut rest = t[ky * 3 + kx];
                        for y in 0..h {
                            let drow = &dy[y * w..][..w];
                            let prow = &padded[base + (y + ky) * pw + kx..][..w];
                            for (dc, pc) in drow[..full]
                                .chunks_exact(LANES)
                                .zip(prow[..full].chunks_exact(LANES))
                            {
                                let dc: &[T; LANES] = dc.try_into().unwrap();
                                let pc: &[T; LANES] = pc.try_into().unwrap();
                                for l in 0..LANES {
                                    lane[l] = lane[l] + dc[l] * pc[l];
                                }
                            }
                            for x in full..w {
                                rest = rest + drow[x] * prow[x];
                            }
                        }
                        a[ky * 3 + kx] = lane;
                        t[ky * 3 + kx] = rest;
                    }
                }
            }
        }
    }
    for (pair, (a, t)) in acc.iter().zip(&tail).enumerate() {
        for tap in 0..9 {
            let mut s = t[tap];
            for &v in &a[tap] {
                s = s + v;
            }
            dk[pair * 9 + tap] = dk[pair * 9 + tap] + s;
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use super::*;

    #[target_feature(enable = "avx2")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn forward_all_avx<T: Real>(
        n: usize,
        input: &[T],
        kernel: &[T],
        bias: &[T],
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
        flip: bool,
        out: &mut [T],
    ) {
        forward_all(n, input, kernel, bias, c_in, c_out, h, w, flip, out)
    }

    #[target_feature(enable = "avx2")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn kernel_grad_all_avx<T: Real>(
        n: usize,
        input: &[T],
        d_out: &[T],
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
        dk: &mut [T],
    ) {
        kernel_grad_all(n, input, d_out, c_in, c_out, h, w, dk)
    }
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `out = conv(input, kernel) + bias` for `n` samples; `out` is fully overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward<T: Real>(
    n: usize,
    input: &[T],
    kernel: &[T],
    bias: &[T],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    flip: bool,
    out: &mut [T],
) {
    assert_eq!(input.len(), n * c_in * h * w);
    assert_eq!(out.len(), n * c_out * h * w);
    assert_eq!(kernel.len(), c_in * c_out * 9);
    assert_eq!(bias.len(), c_out);
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports avx2, checked at runtime just above.
        unsafe {
            avx::forward_all_avx(n, input, kernel, bias, c_in, c_out, h, w, flip, out);
        }
        return;
    }
    let _ = has_avx2;
    forward_all(n, input, kernel, bias, c_in, c_out, h, w, flip, out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_kernel_grad<T: Real>(
    n: usize,
    input: &[T],
    d_out: &[T],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    dk: &mut [T],
) {
    assert_eq!(input.len(), n * c_in * h * w);
    assert_eq!(d_out.len(), n * c_out * h * w);
    assert_eq!(dk.len(), c_in * c_out * 9);
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports avx2, checked at runtime just above.
        unsafe {
            avx::kernel_grad_all_avx(n, input, d_out, c_in, c_out, h, w, dk);
        }
        return;
    }
    kernel_grad_all(n, input, d_out, c_in, c_out, h, w, dk)
}
