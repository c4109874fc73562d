//! 2-D convolution with stride, zero padding and dilation.
//!
//! Forward and both backward passes are expressed as matrix products against
//! an im2col patch matrix. Patches are rebuilt in backward from the stored
//! input rather than saved, which keeps tape memory flat. Accumulation order
//! is plain ascending (channel, ky, kx), so a dilated convolution is
//! bit-identical to a stride-1 convolution with a zero-interleaved kernel.

use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            dilation,
        }
    }

    pub fn unit() -> Self {
        ConvSpec::new(1, 0, 1)
    }
}

/// Output extent for one spatial dimension, or None when the effective
/// kernel does not fit inside the padded input.
pub(crate) fn out_extent(input: usize, kernel: usize, spec: &ConvSpec) -> Option<usize> {
    let effective = (kernel - 1) * spec.dilation + 1;
    let padded = input + 2 * spec.padding;
    if effective > padded {
        return None;
    }
    Some((padded - effective) / spec.stride + 1)
}

pub(crate) fn validate(
    x_shape: &[usize],
    k_shape: &[usize],
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    if x_shape.len() != 4 || k_shape.len() != 4 {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d expects 4-d input and kernel, got {x_shape:?} and {k_shape:?}"
        )));
    }
    if spec.dilation < 1 || spec.stride < 1 {
        return Err(TensorError::InvalidArgument(
            "conv2d stride and dilation must be >= 1".into(),
        ));
    }
    let (cin_x, h, w) = (x_shape[1], x_shape[2], x_shape[3]);
    let (cin_k, kh, kw) = (k_shape[1], k_shape[2], k_shape[3]);
    if cin_x != cin_k {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d input channels {cin_x} != kernel channels {cin_k}"
        )));
    }
    let oh = out_extent(h, kh, spec).ok_or_else(|| {
        TensorError::InvalidArgument(format!(
            "effective kernel extent {} exceeds padded input {}",
            (kh - 1) * spec.dilation + 1,
            h + 2 * spec.padding
        ))
    })?;
    let ow = out_extent(w, kw, spec).ok_or_else(|| {
        TensorError::InvalidArgument(format!(
            "effective kernel extent {} exceeds padded input {}",
            (kw - 1) * spec.dilation + 1,
            w + 2 * spec.padding
        ))
    })?;
    Ok((oh, ow))
}

/// Gather all receptive-field patches into a (b*oh*ow) x (cin*kh*kw) matrix.
/// Out-of-bounds taps read as exact zeros.
fn im2col<E: Scalar>(
    x: &[E],
    (b, cin, h, w): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    spec: &ConvSpec,
) -> Vec<E> {
    let kk = cin * kh * kw;
    let mut patches = vec![E::ZERO; b * oh * ow * kk];
    let mut row = 0usize;
    for bi in 0..b {
        let x_img = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * kk;
                let iy0 = (oy * spec.stride) as isize - spec.padding as isize;
                let ix0 = (ox * spec.stride) as isize - spec.padding as isize;
                let mut col = 0usize;
                for ci in 0..cin {
                    let plane = &x_img[ci * h * w..(ci + 1) * h * w];
                    for m in 0..kh {
                        let iy = iy0 + (m * spec.dilation) as isize;
                        if iy >= 0 && (iy as usize) < h {
                            let row_plane = &plane[iy as usize * w..(iy as usize + 1) * w];
                            for n in 0..kw {
                                let ix = ix0 + (n * spec.dilation) as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    patches[base + col + n] = row_plane[ix as usize];
                                }
                            }
                        }
                        col += kw;
                    }
                }
                row += 1;
            }
        }
    }
    patches
}

/// Scatter-add a patch-matrix gradient back onto the input layout.
fn col2im<E: Scalar>(
    d_patches: &[E],
    (b, cin, h, w): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    spec: &ConvSpec,
) -> Vec<E> {
    let kk = cin * kh * kw;
    let mut dx = vec![E::ZERO; b * cin * h * w];
    let mut row = 0usize;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * kk;
                let iy0 = (oy * spec.stride) as isize - spec.padding as isize;
                let ix0 = (ox * spec.stride) as isize - spec.padding as isize;
                let mut col = 0usize;
                for ci in 0..cin {
                    for m in 0..kh {
                        let iy = iy0 + (m * spec.dilation) as isize;
                        if iy >= 0 && (iy as usize) < h {
                            let dst0 = (bi * cin + ci) * h * w + iy as usize * w;
                            for n in 0..kw {
                                let ix = ix0 + (n * spec.dilation) as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    dx[dst0 + ix as usize] += d_patches[base + col + n];
                                }
                            }
                        }
                        col += kw;
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Patch matrices up to this many elements are kept for the backward pass;
/// larger ones are rebuilt from the stored input instead.
const SAVED_PATCHES_CAP: usize = 16 << 20;

pub(crate) fn conv2d_forward<E: Scalar>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<(Tensor<E>, Option<Vec<E>>)> {
    let (oh, ow) = validate(x.shape(), kernel.shape(), spec)?;
    let (b, cin, h, w) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let kk = cin * kh * kw;
    let rows = b * oh * ow;

    let patches = im2col(x.data(), (b, cin, h, w), (kh, kw), (oh, ow), spec);

    // Transpose kernel to [kk, cout] so the inner accumulation walks
    // contiguous memory in both operands.
    let kdat = kernel.data();
    let mut kt = vec![E::ZERO; kk * cout];
    for mo in 0..cout {
        for k in 0..kk {
            kt[k * cout + mo] = kdat[mo * kk + k];
        }
    }

    // out2[row, cout] = patches[row, :] . kernel[:, :]^T, accumulated in
    // ascending k order (matches a naive channel-ky-kx loop bit for bit).
    // Four k taps per pass over the short output row; (((o + a0k0) + a1k1)
    // + a2k2) + a3k3 keeps the same left-to-right summation order.
    let mut out2 = vec![E::ZERO; rows * cout];
    for r in 0..rows {
        let prow = &patches[r * kk..(r + 1) * kk];
        let orow = &mut out2[r * cout..(r + 1) * cout];
        let mut k = 0usize;
        while k + 4 <= kk {
            let (a0, a1, a2, a3) = (prow[k], prow[k + 1], prow[k + 2], prow[k + 3]);
            let k0 = &kt[k * cout..(k + 1) * cout];
            let k1 = &kt[(k + 1) * cout..(k + 2) * cout];
            let k2 = &kt[(k + 2) * cout..(k + 3) * cout];
            let k3 = &kt[(k + 3) * cout..(k + 4) * cout];
            for m in 0..cout {
                orow[m] = (((orow[m] + a0 * k0[m]) + a1 * k1[m]) + a2 * k2[m]) + a3 * k3[m];
            }
            k += 4;
        }
        while k < kk {
            let a = prow[k];
            let krow = &kt[k * cout..(k + 1) * cout];
            for (o, &kv) in orow.iter_mut().zip(krow) {
                *o += a * kv;
            }
            k += 1;
        }
    }

    // Permute [b*oh*ow, cout] -> [b, cout, oh, ow].
    let mut out = vec![E::ZERO; b * cout * oh * ow];
    for bi in 0..b {
        for s in 0..oh * ow {
            let src = &out2[(bi * oh * ow + s) * cout..(bi * oh * ow + s + 1) * cout];
            for (mo, &v) in src.iter().enumerate() {
                out[(bi * cout + mo) * oh * ow + s] = v;
            }
        }
    }
    let saved = if patches.len() <= SAVED_PATCHES_CAP {
        Some(patches)
    } else {
        None
    };
    Ok((Tensor::new(vec![b, cout, oh, ow], out)?, saved))
}

/// Gradients of a conv2d output with respect to input and kernel.
/// Either side can be skipped when the corresponding operand is constant.
pub(crate) fn conv2d_backward<E: Scalar>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    spec: &ConvSpec,
    grad_out: &[E],
    saved_patches: Option<&[E]>,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let (b, cin, h, w) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (oh, ow) = validate(x.shape(), kernel.shape(), spec).expect("validated at forward");
    let kk = cin * kh * kw;
    let rows = b * oh * ow;

    // Permute grad to row-major [rows, cout].
    let mut g2 = vec![E::ZERO; rows * cout];
    for bi in 0..b {
        for mo in 0..cout {
            let src = &grad_out[(bi * cout + mo) * oh * ow..(bi * cout + mo + 1) * oh * ow];
            for (s, &v) in src.iter().enumerate() {
                g2[(bi * oh * ow + s) * cout + mo] = v;
            }
        }
    }

    let dk = if need_dk {
        let rebuilt;
        let patches: &[E] = match saved_patches {
            Some(p) => p,
            None => {
                rebuilt = im2col(x.data(), (b, cin, h, w), (kh, kw), (oh, ow), spec);
                &rebuilt
            }
        };
        let mut dk = vec![E::ZERO; cout * kk];
        for r in 0..rows {
            let prow = &patches[r * kk..(r + 1) * kk];
            let grow = &g2[r * cout..(r + 1) * cout];
            for (mo, &g) in grow.iter().enumerate() {
                let drow = &mut dk[mo * kk..(mo + 1) * kk];
                for (d, &p) in drow.iter_mut().zip(prow) {
                    *d += g * p;
                }
            }
        }
        Some(dk)
    } else {
        None
    };

    let dx = if need_dx {
        let kdat = kernel.data();
        let mut d_patches = vec![E::ZERO; rows * kk];
        for r in 0..rows {
            let grow = &g2[r * cout..(r + 1) * cout];
            let drow = &mut d_patches[r * kk..(r + 1) * kk];
            for (mo, &g) in grow.iter().enumerate() {
                let krow = &kdat[mo * kk..(mo + 1) * kk];
                for (d, &kv) in drow.iter_mut().zip(krow) {
                    *d += g * kv;
                }
            }
        }
        Some(col2im(
            &d_patches,
            (b, cin, h, w),
            (kh, kw),
            (oh, ow),
            spec,
        ))
    } else {
        None
    };

    (dx, dk)
}

/// Bilinear resampling of a single [h, w] plane to [oh, ow] with the
/// half-pixel (align-corners-false) convention and edge clamping. Used by
/// the upsample tape op and by plain image resizing.
pub fn bilinear_resize_plane<E: Scalar>(
    src: &[E],
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<E> {
    let mut out = vec![E::ZERO; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for dy in 0..oh {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = E::from_f64(fy - y0 as f64);
        for dx in 0..ow {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = E::from_f64(fx - x0 as f64);
            let a = src[y0 * w + x0];
            let b = src[y0 * w + x1];
            let c = src[y1 * w + x0];
            let d = src[y1 * w + x1];
            let top = a + (b - a) * tx;
            let bot = c + (d - c) * tx;
            out[dy * ow + dx] = top + (bot - top) * ty;
        }
    }
    out
}

/// Interpolation taps and weights for one output pixel (for the backward
/// scatter of the upsample op).
pub(crate) fn bilinear_taps(
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dy: usize,
    dx: usize,
) -> [(usize, usize, f64); 4] {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
    let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
    let y0 = fy.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x0 = fx.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let ty = fy - y0 as f64;
    let tx = fx - x0 as f64;
    [
        (y0, x0, (1.0 - ty) * (1.0 - tx)),
        (y0, x1, (1.0 - ty) * tx),
        (y1, x0, ty * (1.0 - tx)),
        (y1, x1, ty * tx),
    ]
}
