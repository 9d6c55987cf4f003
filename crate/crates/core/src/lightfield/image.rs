use crate::error::{Error, Result};

/// Channel-planar image (`[channel][y][x]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("image extents must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Single-channel image from `f(y, x)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Image { height, width, channels: 1, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..][..self.height * self.width]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = &self.data[(c * self.height + y) * self.width..][..self.width];
                data.extend_from_slice(&row[x0..x0 + w]);
            }
        }
        Image::new(h, w, self.channels, data)
    }

    pub fn clamped(mut self) -> Image {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn channel(&self, c: usize) -> Result<Image> {
        if c >= self.channels {
            return Err(Error::invalid(format!("channel {c} of {}", self.channels)));
        }
        Image::new(self.height, self.width, 1, self.plane(c).to_vec())
    }

    pub fn stack_channels(planes: &[Image]) -> Result<Image> {
        let first = planes.first().ok_or_else(|| Error::invalid("no planes"))?;
        let mut data = Vec::with_capacity(first.data.len() * planes.len());
        for p in planes {
            if (p.height, p.width, p.channels) != (first.height, first.width, 1) {
                return Err(Error::shape("planes must be single-channel and equal-sized"));
            }
            data.extend_from_slice(&p.data);
        }
        Image::new(first.height, first.width, planes.len(), data)
    }
}

/// Bilinear sample of a `height x width` plane at `(y, x)`.
///
/// Returns `None` when the coordinate lies outside `[0, h-1] x [0, w-1]`.
/// Integer coordinates return the stored sample exactly.
pub fn sample_bilinear(plane: &[f32], height: usize, width: usize, y: f32, x: f32) -> Option<f32> {
    if !(y >= 0.0 && x >= 0.0 && y <= (height - 1) as f32 && x <= (width - 1) as f32) {
        return None;
    }
    let y0 = (y.floor() as usize).min(height - 1);
    let x0 = (x.floor() as usize).min(width - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let p = |yy: usize, xx: usize| plane[yy * width + xx];
    if fy == 0.0 && fx == 0.0 {
        return Some(p(y0, x0));
    }
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}
