use crate::error::{Error, Result};
use crate::lightfield::Image;

// BT.601 studio-swing rows, inputs and outputs scaled to [0, 1].
const Y_ROW: [f64; 3] = [65.481, 128.553, 24.966];
const CB_ROW: [f64; 3] = [-37.797, -74.203, 112.0];
const CR_ROW: [f64; 3] = [112.0, -93.786, -18.214];
const OFFSETS: [f64; 3] = [16.0, 128.0, 128.0];

fn require_rgb(img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!("expected RGB, got {} channels", img.channels())));
    }
    Ok(())
}

/// `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255`.
pub fn rgb_to_y(img: &Image) -> Result<Image> {
    require_rgb(img)?;
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..r.len())
        .map(|i| {
            ((Y_ROW[0] * r[i] as f64 + Y_ROW[1] * g[i] as f64 + Y_ROW[2] * b[i] as f64 + OFFSETS[0]) / 255.0)
                as f32
        })
        .collect();
    Image::new(img.height(), img.width(), 1, data)
}

pub fn rgb_to_ycbcr(img: &Image) -> Result<Image> {
    require_rgb(img)?;
    let plane = img.height() * img.width();
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let rgb = [img.data()[i] as f64, img.data()[plane + i] as f64, img.data()[2 * plane + i] as f64];
        for (c, row) in [Y_ROW, CB_ROW, CR_ROW].iter().enumerate() {
            let acc: f64 = row.iter().zip(&rgb).map(|(k, v)| k * v).sum();
            data[c * plane + i] = ((acc + OFFSETS[c]) / 255.0) as f32;
        }
    }
    Image::new(img.height(), img.width(), 3, data)
}

fn inverse3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, val) in row.iter_mut().enumerate() {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *val = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

/// Inverse of [`rgb_to_ycbcr`]; output is clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(img: &Image) -> Result<Image> {
    require_rgb(img)?;
    let inv = inverse3([Y_ROW, CB_ROW, CR_ROW]);
    let plane = img.height() * img.width();
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let ycc: Vec<f64> = (0..3)
            .map(|c| img.data()[c * plane + i] as f64 * 255.0 - OFFSETS[c])
            .collect();
        for c in 0..3 {
            let v: f64 = (0..3).map(|k| inv[c][k] * ycc[k]).sum();
            data[c * plane + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Image::new(img.height(), img.width(), 3, data)
}
