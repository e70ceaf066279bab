//! Raw loops behind the convolution and pooling ops. Stride 1, zero padding
//! `(k - 1) / 2`, NCHW row-major.

use crate::tensor::Shape;

/// Valid output column range for a horizontal tap offset `dx`.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    in_shape: Shape,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_c: usize,
    k: usize,
) -> Vec<f64> {
    let Shape { n, c: in_c, h, w } = in_shape;
    let plane = h * w;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * out_c * plane];
    for b in 0..n {
        for co in 0..out_c {
            let out_plane = &mut out[(b * out_c + co) * plane..][..plane];
            if let Some(bias) = bias {
                out_plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..in_c {
                let in_plane = &input[(b * in_c + ci) * plane..][..plane];
                let wk = &weight[(co * in_c + ci) * k * k..][..k * k];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - pad;
                        let (x0, x1) = span(w, dx);
                        for oy in y0..y1 {
                            let iy = (oy as isize + dy) as usize;
                            let src = &in_plane[iy * w..][(x0 as isize + dx) as usize..][..x1 - x0];
                            let dst = &mut out_plane[oy * w + x0..oy * w + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    in_shape: Shape,
    weight: &[f64],
    out_c: usize,
    k: usize,
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let Shape { n, c: in_c, h, w } = in_shape;
    let plane = h * w;
    let pad = (k / 2) as isize;
    if let Some(gb) = grad_bias {
        for b in 0..n {
            for (co, g) in gb.iter_mut().enumerate() {
                *g += grad_out[(b * out_c + co) * plane..][..plane].iter().sum::<f64>();
            }
        }
    }
    for b in 0..n {
        for co in 0..out_c {
            let go = &grad_out[(b * out_c + co) * plane..][..plane];
            for ci in 0..in_c {
                let in_off = (b * in_c + ci) * plane;
                let w_off = (co * in_c + ci) * k * k;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = span(w, dx);
                        let sx = (x0 as isize + dx) as usize;
                        if let Some(gw) = grad_weight.as_deref_mut() {
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let iy = (oy as isize + dy) as usize;
                                let src = &input[in_off + iy * w + sx..][..x1 - x0];
                                let g = &go[oy * w + x0..oy * w + x1];
                                acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            }
                            gw[w_off + ky * k + kx] += acc;
                        }
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let wv = weight[w_off + ky * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in y0..y1 {
                                let iy = (oy as isize + dy) as usize;
                                let dst = &mut gi[in_off + iy * w + sx..][..x1 - x0];
                                let g = &go[oy * w + x0..oy * w + x1];
                                for (d, g) in dst.iter_mut().zip(g) {
                                    *d += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 average pooling with stride 2.
pub(crate) fn avg_pool2_forward(input: &[f64], s: Shape) -> Vec<f64> {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = vec![0.0; s.n * s.c * oh * ow];
    for p in 0..s.n * s.c {
        let src = &input[p * s.plane()..][..s.plane()];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * s.w + 2 * x;
                dst[y * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + s.w] + src[i + s.w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(grad_out: &[f64], s: Shape, grad_in: &mut [f64]) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    for p in 0..s.n * s.c {
        let g = &grad_out[p * oh * ow..][..oh * ow];
        let dst = &mut grad_in[p * s.plane()..][..s.plane()];
        for y in 0..oh {
            for x in 0..ow {
                let v = 0.25 * g[y * ow + x];
                let i = 2 * y * s.w + 2 * x;
                dst[i] += v;
                dst[i + 1] += v;
                dst[i + s.w] += v;
                dst[i + s.w + 1] += v;
            }
        }
    }
}
