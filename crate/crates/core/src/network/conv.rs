//! Single-image convolution kernels: im2col followed by one GEMM.

use super::{ConvParams, ConvSpec, Shape};
use crate::scalar::{gemm, Mat, Scalar};

#[derive(Default)]
pub(super) struct ConvScratch<T> {
    col: Vec<T>,
    dcol: Vec<T>,
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1 && spec.padding == 0
}

/// Unfolds `input` (`C×H×W`) into `(C·k·k) × (Ho·Wo)` patch columns.
fn im2col<T: Scalar>(spec: &ConvSpec, ins: Shape, outs: Shape, input: &[T], col: &mut Vec<T>) {
    let k = spec.kernel;
    let p = outs.plane();
    col.clear();
    col.resize(ins.channels * k * k * p, T::ZERO);
    let pad = spec.padding as isize;
    for c in 0..ins.channels {
        let src = &input[c * ins.plane()..(c + 1) * ins.plane()];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((c * k + ki) * k + kj) * p..][..p];
                for oy in 0..outs.height {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= ins.height as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * ins.width..][..ins.width];
                    let dst = &mut row[oy * outs.width..][..outs.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix >= 0 && ix < ins.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-column gradients back onto `dx`.
fn col2im<T: Scalar>(spec: &ConvSpec, ins: Shape, outs: Shape, dcol: &[T], dx: &mut [T]) {
    let k = spec.kernel;
    let p = outs.plane();
    let pad = spec.padding as isize;
    dx.iter_mut().for_each(|v| *v = T::ZERO);
    for c in 0..ins.channels {
        let dst = &mut dx[c * ins.plane()..(c + 1) * ins.plane()];
        for ki in 0..k {
            for kj in 0..k {
                let row = &dcol[((c * k + ki) * k + kj) * p..][..p];
                for oy in 0..outs.height {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= ins.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * ins.width..][..ins.width];
                    for (ox, &g) in row[oy * outs.width..][..outs.width].iter().enumerate() {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix >= 0 && ix < ins.width as isize {
                            dst_row[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv_forward<T: Scalar>(
    spec: &ConvSpec,
    ins: Shape,
    outs: Shape,
    params: &ConvParams<T>,
    input: &[T],
    out: &mut [T],
    scratch: &mut ConvScratch<T>,
) {
    let kdim = spec.in_channels * spec.kernel * spec.kernel;
    let p = outs.plane();
    let cols: &[T] = if is_pointwise(spec) {
        input
    } else {
        im2col(spec, ins, outs, input, &mut scratch.col);
        &scratch.col
    };
    gemm(T::ONE, Mat::new(&params.weight, spec.out_channels, kdim), Mat::new(cols, kdim, p), T::ZERO, out);
    for (row, &b) in out.chunks_exact_mut(p).zip(&params.bias) {
        for v in row {
            *v += b;
            if spec.relu && *v < T::ZERO {
                *v = T::ZERO;
            }
        }
    }
}

/// Accumulates weight and bias gradients for one image given `dz`, the
/// gradient at the pre-activation output (`out × Ho·Wo`), and optionally
/// writes the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub(super) fn conv_backward<T: Scalar>(
    spec: &ConvSpec,
    ins: Shape,
    outs: Shape,
    params: &ConvParams<T>,
    input: &[T],
    dz: &[T],
    grads: &mut ConvParams<T>,
    dx: Option<&mut [T]>,
    scratch: &mut ConvScratch<T>,
) {
    let kdim = spec.in_channels * spec.kernel * spec.kernel;
    let p = outs.plane();
    let pointwise = is_pointwise(spec);
    let dz_mat = Mat::new(dz, spec.out_channels, p);
    {
        let cols: &[T] = if pointwise {
            input
        } else {
            im2col(spec, ins, outs, input, &mut scratch.col);
            &scratch.col
        };
        gemm(T::ONE, dz_mat, Mat::new(cols, kdim, p).t(), T::ONE, &mut grads.weight);
    }
    for (row, db) in dz.chunks_exact(p).zip(&mut grads.bias) {
        let mut s = T::ZERO;
        for &v in row {
            s += v;
        }
        *db += s;
    }
    if let Some(dx) = dx {
        let w_t = Mat::new(&params.weight, spec.out_channels, kdim).t();
        if pointwise {
            gemm(T::ONE, w_t, dz_mat, T::ZERO, dx);
        } else {
            scratch.dcol.clear();
            scratch.dcol.resize(kdim * p, T::ZERO);
            gemm(T::ONE, w_t, dz_mat, T::ZERO, &mut scratch.dcol);
            col2im(spec, ins, outs, &scratch.dcol, dx);
        }
    }
}
