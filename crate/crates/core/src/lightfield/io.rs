//! On-disk light-field, image and disparity formats.
//!
//! A light field is a directory holding `meta.json` plus one PNG per view
//! named `view_{u:02}_{v:02}.png`. Irregular light fields list their views
//! under `positions` in `meta.json`. Disparity maps are raw little-endian
//! `f32` grids behind an 8-byte header: `LFD1`, `u16` height, `u16` width.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{AngularPosition, DisparityMap, Image, IrregularLightField, LightField};
use crate::error::{Error, Result};

const DISPARITY_MAGIC: &[u8; 4] = b"LFD1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfMeta {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[i32; 2]>>,
}

/// Either flavour of light field as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum LfData {
    Regular(LightField),
    Irregular(IrregularLightField),
}

impl LfData {
    pub fn spatial(&self) -> (usize, usize) {
        match self {
            LfData::Regular(lf) => lf.spatial(),
            LfData::Irregular(lf) => lf.spatial(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            LfData::Regular(lf) => lf.channels(),
            LfData::Irregular(lf) => lf.channels(),
        }
    }

    pub fn to_irregular(&self) -> IrregularLightField {
        match self {
            LfData::Regular(lf) => IrregularLightField::from(lf),
            LfData::Irregular(lf) => lf.clone(),
        }
    }

    pub fn map_views(&self, f: impl FnMut(AngularPosition, &Image) -> Result<Image>) -> Result<LfData> {
        Ok(match self {
            LfData::Regular(lf) => LfData::Regular(lf.map_views(f)?),
            LfData::Irregular(lf) => LfData::Irregular(lf.map_views(f)?),
        })
    }
}

pub fn view_file_name(pos: AngularPosition) -> String {
    format!("view_{:02}_{:02}.png", pos.u, pos.v)
}

/// Reads an 8- or 16-bit grayscale or RGB PNG into `[0, 1]` samples.
/// Alpha is dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let gray = color.channel_count() <= 2;
    let sixteen = color.bytes_per_pixel() / color.channel_count() >= 2;
    let planes: Vec<Vec<f32>> = match (gray, sixteen) {
        (true, false) => vec![img.to_luma8().pixels().map(|p| p.0[0] as f32 / 255.0).collect()],
        (true, true) => vec![img.to_luma16().pixels().map(|p| p.0[0] as f32 / 65535.0).collect()],
        (false, false) => {
            let rgb = img.to_rgb8();
            (0..3)
                .map(|c| rgb.pixels().map(|p| p.0[c] as f32 / 255.0).collect())
                .collect()
        }
        (false, true) => {
            let rgb = img.to_rgb16();
            (0..3)
                .map(|c| rgb.pixels().map(|p| p.0[c] as f32 / 65535.0).collect())
                .collect()
        }
    };
    let c = planes.len();
    Image::new(h, w, c, planes.concat())
}

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn encode_png(img: &Image) -> Result<DynamicImage> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    match img.channels() {
        1 => {
            let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w, h, img.data().iter().map(|&v| to_u16(v)).collect())
                .ok_or_else(|| Error::Format("image buffer size".into()))?;
            Ok(DynamicImage::ImageLuma16(buf))
        }
        3 => {
            let plane = (h * w) as usize;
            let mut raw = Vec::with_capacity(plane * 3);
            for i in 0..plane {
                for c in 0..3 {
                    raw.push(to_u16(img.data()[c * plane + i]));
                }
            }
            let buf = ImageBuffer::<Rgb<u16>, Vec<u16>>::from_raw(w, h, raw)
                .ok_or_else(|| Error::Format("image buffer size".into()))?;
            Ok(DynamicImage::ImageRgb16(buf))
        }
        c => Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    }
}

/// Writes a 16-bit PNG atomically.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let encoded = encode_png(img)?;
    let mut bytes = Vec::new();
    encoded.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes)
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Writes `bytes` to a temporary sibling file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(parent_dir(path))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn read_meta(dir: &Path) -> Result<LfMeta> {
    let text = fs::read_to_string(dir.join("meta.json"))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_view(dir: &Path, pos: AngularPosition, meta: &LfMeta) -> Result<Image> {
    let img = read_png(&dir.join(view_file_name(pos)))?;
    if (img.height(), img.width()) != (meta.h, meta.w) {
        return Err(Error::Format(format!(
            "view {pos} is {}x{}, meta.json says {}x{}",
            img.height(),
            img.width(),
            meta.h,
            meta.w
        )));
    }
    match (img.channels(), meta.channels) {
        (a, b) if a == b => Ok(img),
        (3, 1) => crate::imaging::rgb_to_y(&img),
        (1, 3) => Image::stack_channels(&[img.clone(), img.clone(), img]),
        (a, b) => Err(Error::Format(format!("view {pos} has {a} channels, expected {b}"))),
    }
}

/// Loads a light-field directory.
pub fn read_lf_dir(dir: &Path) -> Result<LfData> {
    let meta = read_meta(dir)?;
    if let Some(positions) = &meta.positions {
        let entries = positions
            .iter()
            .map(|&[u, v]| {
                let pos = AngularPosition::new(u, v);
                Ok((pos, read_view(dir, pos, &meta)?))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(LfData::Irregular(IrregularLightField::new(entries)?));
    }
    let mut views = Vec::with_capacity(meta.m * meta.n);
    for u in 0..meta.m as i32 {
        for v in 0..meta.n as i32 {
            views.push(read_view(dir, AngularPosition::new(u, v), &meta)?);
        }
    }
    Ok(LfData::Regular(LightField::from_views(meta.m, meta.n, &views)?))
}

/// Loads a regular light-field directory, rejecting irregular ones.
pub fn read_regular(dir: &Path) -> Result<LightField> {
    match read_lf_dir(dir)? {
        LfData::Regular(lf) => Ok(lf),
        LfData::Irregular(_) => Err(Error::invalid(format!(
            "{} holds an irregular light field",
            dir.display()
        ))),
    }
}

/// Writes a light-field directory. The directory is assembled under a
/// temporary name and renamed into place, replacing any previous content.
pub fn write_lf_dir(dir: &Path, lf: &LfData) -> Result<()> {
    let parent = parent_dir(dir);
    fs::create_dir_all(parent)?;
    let tmp = tempfile::Builder::new().prefix(".lfsr-tmp-").tempdir_in(parent)?;
    let (h, w) = lf.spatial();
    let (meta, views): (LfMeta, Vec<(AngularPosition, Image)>) = match lf {
        LfData::Regular(reg) => {
            let (m, n) = reg.angular();
            let views = reg
                .positions()
                .into_iter()
                .map(|p| Ok((p, reg.get_sai(p)?)))
                .collect::<Result<Vec<_>>>()?;
            (
                LfMeta { m, n, h, w, channels: reg.channels(), positions: None },
                views,
            )
        }
        LfData::Irregular(irr) => {
            let ps = irr.positions();
            let m = ps.iter().map(|p| p.u).max().unwrap_or(0).max(0) as usize + 1;
            let n = ps.iter().map(|p| p.v).max().unwrap_or(0).max(0) as usize + 1;
            let views = ps.iter().copied().zip(irr.views().iter().cloned()).collect();
            (
                LfMeta {
                    m,
                    n,
                    h,
                    w,
                    channels: irr.channels(),
                    positions: Some(ps.iter().map(|p| [p.u, p.v]).collect()),
                },
                views,
            )
        }
    };
    for (pos, img) in &views {
        let encoded = encode_png(img)?;
        encoded.save_with_format(tmp.path().join(view_file_name(*pos)), image::ImageFormat::Png)?;
    }
    fs::write(tmp.path().join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    let staged = tmp.keep();
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staged, dir)?;
    Ok(())
}

pub fn encode_disparity(map: &DisparityMap) -> Result<Vec<u8>> {
    let (h, w) = map.spatial();
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::invalid("disparity map too large for the LFD1 header"));
    }
    let mut out = Vec::with_capacity(8 + 4 * h * w);
    out.extend_from_slice(DISPARITY_MAGIC);
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_disparity(bytes: &[u8], position: AngularPosition) -> Result<DisparityMap> {
    if bytes.len() < 8 || &bytes[..4] != DISPARITY_MAGIC {
        return Err(Error::Format("missing LFD1 header".into()));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * h * w {
        return Err(Error::Format(format!(
            "disparity body has {} bytes, header implies {}",
            body.len(),
            4 * h * w
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    DisparityMap::new(h, w, position, data)
}

pub fn disparity_file_name(pos: AngularPosition) -> String {
    format!("disp_{:02}_{:02}.lfd", pos.u, pos.v)
}

pub fn write_disparity(path: &Path, map: &DisparityMap) -> Result<()> {
    write_atomic(path, &encode_disparity(map)?)
}

pub fn read_disparity(path: &Path, position: AngularPosition) -> Result<DisparityMap> {
    decode_disparity(&fs::read(path)?, position)
}
