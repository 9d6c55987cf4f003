//! 4D light-field container and slicing.
//!
//! A regular light field is an `M x N` grid of sub-aperture images (SAIs),
//! each `H x W` with one or three channels. Angular index `u` pairs with the
//! horizontal spatial axis `x` and `v` with the vertical axis `y`: a scene
//! point with disparity `d` moves by `d * (u' - u)` pixels along `x` and
//! `d * (v' - v)` along `y` between views.

mod disparity;
pub(crate) mod epi;
mod image;
pub mod io;
mod parallax;
mod synth;

pub use disparity::{estimate_disparity_epi, propagate_disparity, DisparityEstimate, DisparityMap, EstimatorConfig};
pub use epi::{extract_epi, Epi, EpiOrientation};
pub use image::{sample_bilinear, Image};
pub use parallax::parallax_residual;
pub use synth::{irregular_pattern, render_constant_disparity, synthetic_texture};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angular coordinate of a view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AngularPosition {
    pub u: i32,
    pub v: i32,
}

impl AngularPosition {
    pub const fn new(u: i32, v: i32) -> Self {
        AngularPosition { u, v }
    }
}

impl std::fmt::Display for AngularPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.u, self.v)
    }
}

/// Regular `M x N` light field with samples in `[0, 1]`.
///
/// Storage order is `[u][v][channel][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LightField {
    m: usize,
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl LightField {
    pub fn new(
        m: usize,
        n: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if m == 0 || n == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("light field extents must be positive"));
        }
        if data.len() != m * n * height * width * channels {
            return Err(Error::shape(format!(
                "light field {m}x{n}x{height}x{width}x{channels} needs {} samples, got {}",
                m * n * height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("sample {bad} outside [0, 1]")));
        }
        Ok(LightField { m, n, height, width, channels, data })
    }

    pub fn constant(m: usize, n: usize, height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(m, n, height, width, channels, vec![value; m * n * height * width * channels])
    }

    /// Assembles a light field from views in raster order, clamping samples to `[0, 1]`.
    pub fn from_views(m: usize, n: usize, views: &[Image]) -> Result<Self> {
        if views.len() != m * n || views.is_empty() {
            return Err(Error::shape(format!("expected {} views, got {}", m * n, views.len())));
        }
        let (h, w, c) = (views[0].height(), views[0].width(), views[0].channels());
        let mut data = Vec::with_capacity(m * n * h * w * c);
        for view in views {
            if (view.height(), view.width(), view.channels()) != (h, w, c) {
                return Err(Error::shape("views differ in size or channel count"));
            }
            data.extend(view.data().iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Self::new(m, n, h, w, c, data)
    }

    pub fn angular(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn view_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn view_index(&self, pos: AngularPosition) -> Result<usize> {
        if pos.u < 0 || pos.v < 0 || pos.u as usize >= self.m || pos.v as usize >= self.n {
            return Err(Error::invalid(format!(
                "angular position {pos} outside {}x{} grid",
                self.m, self.n
            )));
        }
        Ok(pos.u as usize * self.n + pos.v as usize)
    }

    pub fn contains(&self, pos: AngularPosition) -> bool {
        self.view_index(pos).is_ok()
    }

    pub fn center(&self) -> AngularPosition {
        AngularPosition::new((self.m as i32 - 1) / 2, (self.n as i32 - 1) / 2)
    }

    /// All angular positions in raster order.
    pub fn positions(&self) -> Vec<AngularPosition> {
        (0..self.m as i32)
            .flat_map(|u| (0..self.n as i32).map(move |v| AngularPosition::new(u, v)))
            .collect()
    }

    pub fn view_slice(&self, pos: AngularPosition) -> Result<&[f32]> {
        let i = self.view_index(pos)?;
        Ok(&self.data[i * self.view_len()..][..self.view_len()])
    }

    /// Sub-aperture image at `pos`.
    pub fn get_sai(&self, pos: AngularPosition) -> Result<Image> {
        let slice = self.view_slice(pos)?;
        Image::new(self.height, self.width, self.channels, slice.to_vec())
    }

    pub fn set_sai(&mut self, pos: AngularPosition, img: &Image) -> Result<()> {
        if (img.height(), img.width(), img.channels()) != (self.height, self.width, self.channels) {
            return Err(Error::shape("SAI does not match light-field extents"));
        }
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("SAI samples outside [0, 1]"));
        }
        let i = self.view_index(pos)?;
        let len = self.view_len();
        self.data[i * len..][..len].copy_from_slice(img.data());
        Ok(())
    }

    /// Sample at `(u, v, channel, y, x)`; indices must be in range.
    #[inline]
    pub fn at(&self, u: usize, v: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[(((u * self.n + v) * self.channels + c) * self.height + y) * self.width + x]
    }

    /// Applies `f` to every sample, clamping the result to `[0, 1]`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> LightField {
        LightField {
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Applies `f` to every view.
    pub fn map_views(&self, mut f: impl FnMut(AngularPosition, &Image) -> Result<Image>) -> Result<LightField> {
        let views = self
            .positions()
            .into_iter()
            .map(|p| f(p, &self.get_sai(p)?))
            .collect::<Result<Vec<_>>>()?;
        Self::from_views(self.m, self.n, &views)
    }

    /// Luma-only copy (identity for single-channel fields).
    pub fn to_luma(&self) -> Result<LightField> {
        match self.channels {
            1 => Ok(self.clone()),
            3 => self.map_views(|_, img| crate::imaging::rgb_to_y(img)),
            c => Err(Error::invalid(format!("cannot take luma of {c}-channel light field"))),
        }
    }

    /// Spatial crop `[y0, y0+h) x [x0, x0+w)` applied to every view.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<LightField> {
        self.map_views(|_, img| img.crop(y0, x0, h, w))
    }
}

/// Views at arbitrary, distinct angular positions sharing spatial extents.
#[derive(Clone, Debug, PartialEq)]
pub struct IrregularLightField {
    positions: Vec<AngularPosition>,
    views: Vec<Image>,
}

impl IrregularLightField {
    pub fn new(entries: Vec<(AngularPosition, Image)>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::invalid("irregular light field needs at least one view"))?;
        let dims = (first.1.height(), first.1.width(), first.1.channels());
        let mut positions = Vec::with_capacity(entries.len());
        let mut views = Vec::with_capacity(entries.len());
        for (pos, img) in entries {
            if positions.contains(&pos) {
                return Err(Error::invalid(format!("duplicate angular position {pos}")));
            }
            if (img.height(), img.width(), img.channels()) != dims {
                return Err(Error::shape("views differ in size or channel count"));
            }
            positions.push(pos);
            views.push(img);
        }
        Ok(IrregularLightField { positions, views })
    }

    /// Number of views `q`.
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn positions(&self) -> &[AngularPosition] {
        &self.positions
    }

    pub fn views(&self) -> &[Image] {
        &self.views
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.views[0].height(), self.views[0].width())
    }

    pub fn channels(&self) -> usize {
        self.views[0].channels()
    }

    pub fn index_of(&self, pos: AngularPosition) -> Option<usize> {
        self.positions.iter().position(|&p| p == pos)
    }

    pub fn view(&self, pos: AngularPosition) -> Option<&Image> {
        self.index_of(pos).map(|i| &self.views[i])
    }

    pub fn map_views(&self, mut f: impl FnMut(AngularPosition, &Image) -> Result<Image>) -> Result<Self> {
        let entries = self
            .positions
            .iter()
            .zip(&self.views)
            .map(|(&p, img)| Ok((p, f(p, img)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }
}

impl From<&LightField> for IrregularLightField {
    fn from(lf: &LightField) -> Self {
        let entries = lf
            .positions()
            .into_iter()
            .map(|p| (p, lf.get_sai(p).expect("position from own grid")))
            .collect();
        IrregularLightField::new(entries).expect("regular grid has distinct positions")
    }
}

/// Irregular subset of a regular light field, views copied verbatim.
pub fn make_irregular(lf: &LightField, positions: &[AngularPosition]) -> Result<IrregularLightField> {
    let entries = positions
        .iter()
        .map(|&p| Ok((p, lf.get_sai(p)?)))
        .collect::<Result<Vec<_>>>()?;
    IrregularLightField::new(entries)
}
