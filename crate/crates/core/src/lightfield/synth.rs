use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sample_bilinear, AngularPosition, Image, LightField};
use crate::error::{Error, Result};

/// Renders an `M x N` light field of a fronto-parallel scene with constant
/// disparity `d` by shifting `base`.
///
/// View `(u, v)` samples `base` at `(y0 + y - d (v - cv), x0 + x - d (u - cu))`
/// where `(cu, cv)` is the grid center and `(y0, x0)` a margin large enough
/// that every shifted read stays inside `base`. Output extents are the base
/// extents minus twice that margin.
pub fn render_constant_disparity(base: &Image, d: f32, m: usize, n: usize) -> Result<LightField> {
    if m == 0 || n == 0 {
        return Err(Error::invalid("angular extents must be positive"));
    }
    let cu = (m as f32 - 1.0) / 2.0;
    let cv = (n as f32 - 1.0) / 2.0;
    let margin_x = (d.abs() * cu).ceil() as usize;
    let margin_y = (d.abs() * cv).ceil() as usize;
    let (bh, bw) = (base.height(), base.width());
    if bh <= 2 * margin_y || bw <= 2 * margin_x {
        return Err(Error::invalid(format!(
            "base {bh}x{bw} too small for disparity {d} over a {m}x{n} grid"
        )));
    }
    let (h, w) = (bh - 2 * margin_y, bw - 2 * margin_x);
    let c = base.channels();
    let mut data = Vec::with_capacity(m * n * c * h * w);
    for u in 0..m {
        for v in 0..n {
            let sx = -d * (u as f32 - cu);
            let sy = -d * (v as f32 - cv);
            for ch in 0..c {
                let plane = base.plane(ch);
                for y in 0..h {
                    for x in 0..w {
                        let yy = margin_y as f32 + y as f32 + sy;
                        let xx = margin_x as f32 + x as f32 + sx;
                        let s = sample_bilinear(plane, bh, bw, yy, xx)
                            .expect("margin keeps reads in bounds");
                        data.push(s.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    LightField::new(m, n, h, w, c, data)
}

/// Smooth random texture: a sum of oriented sinusoids with spatial
/// frequencies up to `max_frequency` cycles per pixel, scaled to `[0.1, 0.9]`.
pub fn synthetic_texture(height: usize, width: usize, max_frequency: f32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f32, f32, f32, f32)> = (0..12)
        .map(|_| {
            let f = rng.gen_range(0.15..=1.0) * max_frequency;
            let theta = rng.gen_range(0.0..std::f32::consts::PI);
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            let amp = rng.gen_range(0.5..1.0);
            (f * theta.cos(), f * theta.sin(), phase, amp)
        })
        .collect();
    let raw = Image::from_fn(height, width, |y, x| {
        waves
            .iter()
            .map(|&(fx, fy, ph, a)| {
                a * (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) + ph).sin()
            })
            .sum()
    });
    let lo = raw.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = raw.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    let data = raw.data().iter().map(|v| 0.1 + 0.8 * (v - lo) / span).collect();
    Image::new(height, width, 1, data).expect("same extents")
}

/// `q` distinct positions from an `M x N` grid.
///
/// The grid center comes first, the rest follow a seeded shuffle, so the
/// pattern for a smaller `q` is a subset of the pattern for a larger one
/// under the same seed. The result is returned in raster order.
pub fn irregular_pattern(m: usize, n: usize, q: usize, seed: u64) -> Result<Vec<AngularPosition>> {
    if q == 0 || q > m * n {
        return Err(Error::invalid(format!("cannot draw {q} views from a {m}x{n} grid")));
    }
    let center = AngularPosition::new((m as i32 - 1) / 2, (n as i32 - 1) / 2);
    let mut rest: Vec<AngularPosition> = (0..m as i32)
        .flat_map(|u| (0..n as i32).map(move |v| AngularPosition::new(u, v)))
        .filter(|&p| p != center)
        .collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<AngularPosition> = std::iter::once(center).chain(rest).take(q).collect();
    chosen.sort();
    Ok(chosen)
}
