use crate::error::{Error, Result};
use crate::lightfield::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleDirection {
    Down,
    Up,
}

/// Integer-factor bicubic resampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResampleSpec {
    pub scale: usize,
    pub direction: ResampleDirection,
    /// Cubic kernel parameter.
    pub a: f64,
    /// Widen the kernel by the scale factor when shrinking.
    pub antialias: bool,
}

impl ResampleSpec {
    pub fn down(scale: usize) -> Self {
        ResampleSpec { scale, direction: ResampleDirection::Down, a: -0.5, antialias: true }
    }

    pub fn up(scale: usize) -> Self {
        ResampleSpec { scale, direction: ResampleDirection::Up, a: -0.5, antialias: false }
    }
}

/// Keys cubic convolution kernel.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-sample `(source index, weight)` lists for resampling a line of
/// `in_len` samples to `out_len`. Sample centers are aligned
/// (`src = (dst + 0.5) * in/out - 0.5`), out-of-range taps are clamped to the
/// border, and each list is normalized to sum to one.
pub fn bicubic_weights(in_len: usize, out_len: usize, a: f64, antialias: bool) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let shrink = if antialias && scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / shrink;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
            for j in lo..=hi {
                let w = shrink * cubic_kernel((center - j as f64) * shrink, a);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

fn resample_rows(src: &[f32], h: usize, w: usize, taps: &[Vec<(usize, f64)>]) -> Vec<f32> {
    let ow = taps.len();
    let mut out = Vec::with_capacity(h * ow);
    for y in 0..h {
        let row = &src[y * w..][..w];
        out.extend(taps.iter().map(|t| t.iter().map(|&(j, wt)| row[j] as f64 * wt).sum::<f64>() as f32));
    }
    out
}

fn resample_cols(src: &[f32], w: usize, taps: &[Vec<(usize, f64)>]) -> Vec<f32> {
    let oh = taps.len();
    let mut out = vec![0.0f32; oh * w];
    for (y, t) in taps.iter().enumerate() {
        for x in 0..w {
            out[y * w + x] = t.iter().map(|&(j, wt)| src[j * w + x] as f64 * wt).sum::<f64>() as f32;
        }
    }
    out
}

/// Separable bicubic resize of every channel to `out_h x out_w`.
pub fn resize_to(img: &Image, out_h: usize, out_w: usize, a: f64, antialias: bool) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    let (h, w) = (img.height(), img.width());
    let tx = bicubic_weights(w, out_w, a, antialias);
    let ty = bicubic_weights(h, out_h, a, antialias);
    let mut data = Vec::with_capacity(out_h * out_w * img.channels());
    for c in 0..img.channels() {
        let rows = resample_rows(img.plane(c), h, w, &tx);
        data.extend(resample_cols(&rows, out_w, &ty));
    }
    Image::new(out_h, out_w, img.channels(), data)
}

/// Integer-factor bicubic resize as described by `spec`.
pub fn bicubic_resize(img: &Image, spec: &ResampleSpec) -> Result<Image> {
    if spec.scale < 2 {
        return Err(Error::invalid(format!("scale must be at least 2, got {}", spec.scale)));
    }
    let (h, w) = (img.height(), img.width());
    match spec.direction {
        ResampleDirection::Down => {
            if h % spec.scale != 0 || w % spec.scale != 0 {
                return Err(Error::invalid(format!(
                    "{h}x{w} is not divisible by scale {}",
                    spec.scale
                )));
            }
            resize_to(img, h / spec.scale, w / spec.scale, spec.a, spec.antialias)
        }
        ResampleDirection::Up => resize_to(img, h * spec.scale, w * spec.scale, spec.a, spec.antialias),
    }
}
