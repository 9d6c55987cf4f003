//! Raw numeric kernels behind the tape ops.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn work(&self) -> usize {
        self.batch * self.c_in * self.c_out * self.height * self.width * self.kernel * self.kernel
    }
}

/// `dst[x] += w * src[x + shift]` over the columns where both indices are valid.
#[inline]
fn axpy_shifted(dst: &mut [f32], src: &[f32], w: f32, shift: isize) {
    let n = dst.len() as isize;
    let lo = (-shift).max(0);
    let hi = (n - shift).min(n);
    if lo >= hi {
        return;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let s0 = (lo as isize + shift) as usize;
    let src = &src[s0..s0 + (hi - lo)];
    for (d, s) in dst[lo..hi].iter_mut().zip(src) {
        *d += w * s;
    }
}

/// Sum of `a[x] * b[x + shift]` over valid columns.
#[inline]
fn dot_shifted(a: &[f32], b: &[f32], shift: isize) -> f32 {
    let n = a.len() as isize;
    let lo = (-shift).max(0);
    let hi = (n - shift).min(n);
    if lo >= hi {
        return 0.0;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let s0 = (lo as isize + shift) as usize;
    a[lo..hi]
        .iter()
        .zip(&b[s0..s0 + (hi - lo)])
        .map(|(x, y)| x * y)
        .sum()
}

pub(crate) fn conv2d_forward(g: ConvGeom, input: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let plane = g.height * g.width;
    let k = g.kernel;
    let pad = g.pad() as isize;
    let mut out = vec![0.0f32; g.batch * g.c_out * plane];
    let body = |(idx, dst): (usize, &mut [f32])| {
        let b = idx / g.c_out;
        let co = idx % g.c_out;
        dst.fill(bias[co]);
        for ci in 0..g.c_in {
            let src = &input[(b * g.c_in + ci) * plane..][..plane];
            let wk = &weight[(co * g.c_in + ci) * k * k..][..k * k];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let w = wk[ky * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pad;
                    for y in 0..g.height {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= g.height as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * g.width..][..g.width];
                        axpy_shifted(&mut dst[y * g.width..][..g.width], srow, w, dx);
                    }
                }
            }
        }
    };
    if g.work() >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(body);
    } else {
        out.chunks_mut(plane).enumerate().for_each(body);
    }
    out
}

/// Gradient with respect to the convolution input.
pub(crate) fn conv2d_backward_input(g: ConvGeom, grad_out: &[f32], weight: &[f32]) -> Vec<f32> {
    let plane = g.height * g.width;
    let k = g.kernel;
    let pad = g.pad() as isize;
    let mut gin = vec![0.0f32; g.batch * g.c_in * plane];
    let body = |(idx, dst): (usize, &mut [f32])| {
        let b = idx / g.c_in;
        let ci = idx % g.c_in;
        for co in 0..g.c_out {
            let go = &grad_out[(b * g.c_out + co) * plane..][..plane];
            let wk = &weight[(co * g.c_in + ci) * k * k..][..k * k];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let w = wk[ky * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pad;
                    // gin[y][x] += w * go[y - dy][x - dx]
                    for y in 0..g.height {
                        let oy = y as isize - dy;
                        if oy < 0 || oy >= g.height as isize {
                            continue;
                        }
                        let grow = &go[oy as usize * g.width..][..g.width];
                        axpy_shifted(&mut dst[y * g.width..][..g.width], grow, w, -dx);
                    }
                }
            }
        }
    };
    if g.work() >= PAR_THRESHOLD {
        gin.par_chunks_mut(plane).enumerate().for_each(body);
    } else {
        gin.chunks_mut(plane).enumerate().for_each(body);
    }
    gin
}

/// Gradients with respect to weight and bias.
pub(crate) fn conv2d_backward_params(
    g: ConvGeom,
    grad_out: &[f32],
    input: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let plane = g.height * g.width;
    let k = g.kernel;
    let pad = g.pad() as isize;
    let per_out = g.c_in * k * k;
    let mut gw = vec![0.0f32; g.c_out * per_out];
    let body = |(co, dst): (usize, &mut [f32])| {
        for b in 0..g.batch {
            let go = &grad_out[(b * g.c_out + co) * plane..][..plane];
            for ci in 0..g.c_in {
                let src = &input[(b * g.c_in + ci) * plane..][..plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let mut acc = 0.0f32;
                        for y in 0..g.height {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= g.height as isize {
                                continue;
                            }
                            acc += dot_shifted(
                                &go[y * g.width..][..g.width],
                                &src[sy as usize * g.width..][..g.width],
                                dx,
                            );
                        }
                        dst[(ci * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    };
    if g.work() >= PAR_THRESHOLD {
        gw.par_chunks_mut(per_out).enumerate().for_each(body);
    } else {
        gw.chunks_mut(per_out).enumerate().for_each(body);
    }
    let mut gb = vec![0.0f32; g.c_out];
    for b in 0..g.batch {
        for (co, acc) in gb.iter_mut().enumerate() {
            *acc += grad_out[(b * g.c_out + co) * plane..][..plane].iter().sum::<f32>();
        }
    }
    (gw, gb)
}

/// Source index (in the `[B, C*r*r, H, W]` input) of every element of the
/// shuffled `[B, C, rH, rW]` output.
pub(crate) fn pixel_shuffle_map(shape: &[usize], r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("pixel_shuffle needs [B,C,H,W], got {shape:?}")));
    }
    if r == 0 {
        return Err(Error::invalid("pixel_shuffle factor must be positive"));
    }
    let (b, c_in, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c_in % (r * r) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {c_in} channels not divisible by {}",
            r * r
        )));
    }
    let c = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut map = Vec::with_capacity(b * c_in * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                let (hy, dy) = (oy / r, oy % r);
                for ox in 0..ow {
                    let (wx, dx) = (ox / r, ox % r);
                    let src_c = ci * r * r + dy * r + dx;
                    map.push(((bi * c_in + src_c) * h + hy) * w + wx);
                }
            }
        }
    }
    Ok((map, vec![b, c, oh, ow]))
}

/// Sub-pixel rearrangement `[B, C*r*r, H, W] -> [B, C, rH, rW]`.
pub fn pixel_shuffle_tensor(x: &Tensor, r: usize) -> Result<Tensor> {
    let (map, shape) = pixel_shuffle_map(x.shape(), r)?;
    let data = map.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(shape, data)
}

/// Inverse of [`pixel_shuffle_tensor`].
pub fn pixel_unshuffle_tensor(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || r == 0 || s[2] % r != 0 || s[3] % r != 0 {
        return Err(Error::shape(format!("pixel_unshuffle by {r} on {s:?}")));
    }
    let in_shape = [s[0], s[1] * r * r, s[2] / r, s[3] / r];
    let (map, _) = pixel_shuffle_map(&in_shape, r)?;
    let mut data = vec![0.0f32; x.numel()];
    for (o, &i) in map.iter().enumerate() {
        data[i] = x.data()[o];
    }
    Tensor::new(in_shape.to_vec(), data)
}

/// Pooling windows mapping `k` slices onto `p` outputs.
///
/// Window `j` covers `[floor(j*k/p), ceil((j+1)*k/p))`. Every window is
/// non-empty, every slice is covered, and neighbouring windows overlap by at
/// most one slice when `p` does not divide `k`.
pub fn pool_windows(k: usize, p: usize) -> Result<Vec<(usize, usize)>> {
    if p == 0 || p > k {
        return Err(Error::invalid(format!(
            "cannot pool {k} slices into {p} groups"
        )));
    }
    Ok((0..p)
        .map(|j| ((j * k) / p, ((j + 1) * k).div_ceil(p)))
        .collect())
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// For each output element of `permute(x, perm)`, the flat source index.
pub(crate) fn permute_map(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::invalid(format!("bad permutation {perm:?} for rank {rank}")));
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok((map, out_shape))
}

/// `(outer, extent, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}
