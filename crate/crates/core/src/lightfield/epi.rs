use super::{Image, LightField};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpiOrientation {
    /// Fixed `(y, v)`; rows run over `u`, columns over `x`. Extents `(M, W)`.
    Horizontal,
    /// Fixed `(x, u)`; rows run over `v`, columns over `y`. Extents `(N, H)`.
    Vertical,
}

/// Epipolar-plane image.
#[derive(Clone, Debug, PartialEq)]
pub struct Epi {
    pub orientation: EpiOrientation,
    /// `y` for horizontal EPIs, `x` for vertical ones.
    pub fixed_spatial: usize,
    /// `v` for horizontal EPIs, `u` for vertical ones.
    pub fixed_angular: usize,
    pub image: Image,
}

/// Slices one EPI out of `lf`.
///
/// Horizontal: `E(u, x) = L(u, fixed_b, y = fixed_a, x)`.
/// Vertical: `E(v, y) = L(fixed_b, v, y, x = fixed_a)`.
pub fn extract_epi(lf: &LightField, orientation: EpiOrientation, fixed_a: usize, fixed_b: usize) -> Result<Epi> {
    let (m, n) = lf.angular();
    let (h, w) = lf.spatial();
    let c = lf.channels();
    let image = match orientation {
        EpiOrientation::Horizontal => {
            if fixed_a >= h || fixed_b >= n {
                return Err(Error::invalid(format!(
                    "horizontal EPI at y={fixed_a}, v={fixed_b} outside {h}x{n}"
                )));
            }
            let mut data = Vec::with_capacity(c * m * w);
            for ch in 0..c {
                for u in 0..m {
                    for x in 0..w {
                        data.push(lf.at(u, fixed_b, ch, fixed_a, x));
                    }
                }
            }
            Image::new(m, w, c, data)?
        }
        EpiOrientation::Vertical => {
            if fixed_a >= w || fixed_b >= m {
                return Err(Error::invalid(format!(
                    "vertical EPI at x={fixed_a}, u={fixed_b} outside {w}x{m}"
                )));
            }
            let mut data = Vec::with_capacity(c * n * h);
            for ch in 0..c {
                for v in 0..n {
                    for y in 0..h {
                        data.push(lf.at(fixed_b, v, ch, y, fixed_a));
                    }
                }
            }
            Image::new(n, h, c, data)?
        }
    };
    Ok(Epi {
        orientation,
        fixed_spatial: fixed_a,
        fixed_angular: fixed_b,
        image,
    })
}

/// Every horizontal EPI followed by every vertical EPI.
pub(crate) fn all_epis(lf: &LightField) -> Vec<Epi> {
    let (m, n) = lf.angular();
    let (h, w) = lf.spatial();
    let mut out = Vec::with_capacity(h * n + w * m);
    for y in 0..h {
        for v in 0..n {
            out.push(extract_epi(lf, EpiOrientation::Horizontal, y, v).expect("in range"));
        }
    }
    for x in 0..w {
        for u in 0..m {
            out.push(extract_epi(lf, EpiOrientation::Vertical, x, u).expect("in range"));
        }
    }
    out
}
