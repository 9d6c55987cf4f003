use super::{sample_bilinear, AngularPosition, Image, LightField};
use crate::error::{Error, Result};

/// Per-pixel disparity (pixels per unit angular step) registered to one view.
///
/// Positive disparity moves a point by `+d` pixels along `x` for every `+1`
/// step in `u` (and along `y` for `v`).
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    position: AngularPosition,
    data: Vec<f32>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, position: AngularPosition, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "disparity map {height}x{width} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("disparity map contains non-finite values"));
        }
        Ok(DisparityMap { height, width, position, data })
    }

    pub fn constant(height: usize, width: usize, position: AngularPosition, d: f32) -> Self {
        DisparityMap::new(height, width, position, vec![d; height * width]).expect("finite constant")
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn position(&self) -> AngularPosition {
        self.position
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    /// Same map with every value multiplied by `factor` (e.g. after resampling).
    pub fn scaled(&self, factor: f32) -> DisparityMap {
        DisparityMap {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Tuning for [`estimate_disparity_epi`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    /// Side of the square aggregation window (odd).
    pub window: usize,
    pub eps: f32,
    /// Estimates are clamped to `[min, max]`.
    pub range: (f32, f32),
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            window: 7,
            eps: 1e-6,
            range: (-8.0, 8.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityEstimate {
    pub map: DisparityMap,
    /// Set when the center view has no usable gradients; the map is all zero.
    pub textureless: bool,
}

fn luma_view(lf: &LightField, u: usize, v: usize) -> Result<Image> {
    let img = lf.get_sai(AngularPosition::new(u as i32, v as i32))?;
    match img.channels() {
        1 => Ok(img),
        _ => crate::imaging::rgb_to_y(&img),
    }
}

/// Center-view disparity from the EPI structure tensor.
///
/// With `I_x, I_y` the spatial and `I_u, I_v` the angular central
/// differences at the center view, each pixel gets
/// `d = -(sum I_x I_u + sum I_y I_v) / (sum I_x^2 + sum I_y^2 + eps)`
/// over a square window.
pub fn estimate_disparity_epi(lf: &LightField, config: &EstimatorConfig) -> Result<DisparityEstimate> {
    let (m, n) = lf.angular();
    if m < 3 || n < 3 {
        return Err(Error::invalid(format!("need at least 3x3 views, got {m}x{n}")));
    }
    if config.window % 2 == 0 {
        return Err(Error::invalid("estimator window must be odd"));
    }
    let (h, w) = lf.spatial();
    let center = lf.center();
    let (uc, vc) = (center.u as usize, center.v as usize);
    let c = luma_view(lf, uc, vc)?;
    let left = luma_view(lf, uc - 1, vc)?;
    let right = luma_view(lf, uc + 1, vc)?;
    let up = luma_view(lf, uc, vc - 1)?;
    let down = luma_view(lf, uc, vc + 1)?;

    let px = |img: &Image, y: usize, x: isize| img.get(0, y, x.clamp(0, w as isize - 1) as usize);
    let py = |img: &Image, y: isize, x: usize| img.get(0, y.clamp(0, h as isize - 1) as usize, x);
    let mut num = vec![0.0f64; h * w];
    let mut den = vec![0.0f64; h * w];
    let mut max_grad = 0.0f32;
    for y in 0..h {
        for x in 0..w {
            let ix = 0.5 * (px(&c, y, x as isize + 1) - px(&c, y, x as isize - 1));
            let iy = 0.5 * (py(&c, y as isize + 1, x) - py(&c, y as isize - 1, x));
            let iu = 0.5 * (right.get(0, y, x) - left.get(0, y, x));
            let iv = 0.5 * (down.get(0, y, x) - up.get(0, y, x));
            max_grad = max_grad.max(ix.abs()).max(iy.abs()).max(iu.abs()).max(iv.abs());
            num[y * w + x] = (ix * iu + iy * iv) as f64;
            den[y * w + x] = (ix * ix + iy * iy) as f64;
        }
    }
    if max_grad < config.eps {
        log::warn!("textureless center view; disparity estimate set to zero");
        return Ok(DisparityEstimate {
            map: DisparityMap::constant(h, w, center, 0.0),
            textureless: true,
        });
    }
    let num = box_sum(&num, h, w, config.window / 2);
    let den = box_sum(&den, h, w, config.window / 2);
    let (lo, hi) = config.range;
    let data = num
        .iter()
        .zip(&den)
        .map(|(&a, &b)| ((-a / (b + config.eps as f64)) as f32).clamp(lo, hi))
        .collect();
    Ok(DisparityEstimate {
        map: DisparityMap::new(h, w, center, data)?,
        textureless: false,
    })
}

/// Windowed sums with the window clipped at the borders.
fn box_sum(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            rows[y * w + x] = src[y * w + x0..=y * w + x1].iter().sum();
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (y0..=y1).map(|yy| rows[yy * w + x]).sum();
        }
    }
    out
}

/// Carries a disparity map to another view through the parallax relation:
/// a point at `x` in the source view sits at `x + d (target - source)`.
pub fn propagate_disparity(source: &DisparityMap, target: AngularPosition) -> DisparityMap {
    let (h, w) = source.spatial();
    let du = (target.u - source.position.u) as f32;
    let dv = (target.v - source.position.v) as f32;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d0 = source.at(y, x);
            let sx = (x as f32 - d0 * du).clamp(0.0, (w - 1) as f32);
            let sy = (y as f32 - d0 * dv).clamp(0.0, (h - 1) as f32);
            data.push(sample_bilinear(&source.data, h, w, sy, sx).expect("clamped"));
        }
    }
    DisparityMap { height: h, width: w, position: target, data }
}
