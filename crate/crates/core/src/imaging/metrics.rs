use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lightfield::epi::all_epis;
use crate::lightfield::{Image, LightField};

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// `10 log10(peak^2 / mse)`; `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("psnr over {} vs {} samples", a.len(), b.len())));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

/// Arithmetic mean of the finite entries; `+inf` if there are none.
pub fn mean_finite(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with a `window x window` Gaussian of standard deviation
/// `sigma`, evaluated where the window fits entirely inside the image.
pub fn ssim_with_window(a: &Image, b: &Image, window: usize, sigma: f64) -> Result<f64> {
    if a.channels() != 1 || b.channels() != 1 {
        return Err(Error::invalid("ssim expects single-channel images"));
    }
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape("ssim over images of different size"));
    }
    let (h, w) = (a.height(), a.width());
    if window == 0 || window % 2 == 0 || h < window || w < window {
        return Err(Error::invalid(format!("{h}x{w} image cannot hold a {window}x{window} window")));
    }
    let k = gaussian_1d(window, sigma);
    let pa: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let pb: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&pa, h, w, &k);
    let mu_b = filter_valid(&pb, h, w, &k);
    let aa = filter_valid(&prod(&pa, &pa), h, w, &k);
    let bb = filter_valid(&prod(&pb, &pb), h, w, &k);
    let ab = filter_valid(&prod(&pa, &pb), h, w, &k);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Standard SSIM: 11x11 Gaussian window, sigma 1.5, peak 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with_window(a, b, SSIM_WINDOW, SSIM_SIGMA)
}

/// Largest odd window no bigger than 11 that fits an `h x w` image.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

fn ssim_fitted(a: &Image, b: &Image) -> Result<f64> {
    ssim_with_window(a, b, ssim_window(a.height(), a.width()), SSIM_SIGMA)
}

fn luma(lf: &LightField) -> Result<LightField> {
    lf.to_luma()
}

fn check_same_shape(a: &LightField, b: &LightField) -> Result<()> {
    if a.angular() != b.angular() || a.spatial() != b.spatial() || a.channels() != b.channels() {
        return Err(Error::shape("light fields differ in shape"));
    }
    Ok(())
}

/// PSNR of every view on the luma channel, as an `M x N` grid.
pub fn per_sai_psnr(a: &LightField, b: &LightField) -> Result<Vec<Vec<f64>>> {
    check_same_shape(a, b)?;
    let (a, b) = (luma(a)?, luma(b)?);
    let (m, n) = a.angular();
    let mut grid = vec![vec![0.0; n]; m];
    for p in a.positions() {
        grid[p.u as usize][p.v as usize] = psnr(a.view_slice(p)?, b.view_slice(p)?, 1.0)?;
    }
    Ok(grid)
}

/// `(EPI-PSNR, EPI-SSIM)` averaged over every horizontal and vertical EPI.
///
/// EPIs are narrower than the standard SSIM window along the angular axis,
/// so EPI-SSIM shrinks the Gaussian window to the largest odd size that fits.
pub fn epi_metrics(a: &LightField, b: &LightField) -> Result<(f64, f64)> {
    check_same_shape(a, b)?;
    let (a, b) = (luma(a)?, luma(b)?);
    let ea = all_epis(&a);
    let eb = all_epis(&b);
    let mut psnrs = Vec::with_capacity(ea.len());
    let mut ssims = Vec::with_capacity(ea.len());
    for (x, y) in ea.iter().zip(&eb) {
        psnrs.push(psnr(x.image.data(), y.image.data(), 1.0)?);
        ssims.push(ssim_fitted(&x.image, &y.image)?);
    }
    Ok((mean_finite(psnrs), ssims.iter().sum::<f64>() / ssims.len() as f64))
}

/// Quality summary of a reconstruction against its reference.
///
/// PSNR values of `+inf` (identical inputs) serialize as JSON `null`. Means
/// are taken over finite entries only and are `+inf` when none are finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(with = "inf_grid")]
    pub per_sai_psnr: Vec<Vec<f64>>,
    #[serde(with = "inf_null")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(with = "inf_null")]
    pub epi_psnr: f64,
    pub epi_ssim: f64,
}

pub fn evaluate(reference: &LightField, test: &LightField) -> Result<MetricReport> {
    check_same_shape(reference, test)?;
    let grid = per_sai_psnr(reference, test)?;
    let (ra, tb) = (luma(reference)?, luma(test)?);
    let mut ssims = Vec::new();
    for p in ra.positions() {
        ssims.push(ssim_fitted(&ra.get_sai(p)?, &tb.get_sai(p)?)?);
    }
    let (epi_psnr, epi_ssim) = epi_metrics(reference, test)?;
    Ok(MetricReport {
        mean_psnr: mean_finite(grid.iter().flatten().copied()),
        per_sai_psnr: grid,
        mean_ssim: ssims.iter().sum::<f64>() / ssims.len() as f64,
        epi_psnr,
        epi_ssim,
    })
}

mod inf_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

mod inf_grid {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(g: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Option<f64>>> = g
            .iter()
            .map(|r| r.iter().map(|v| v.is_finite().then_some(*v)).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let rows = Vec::<Vec<Option<f64>>>::deserialize(d)?;
        Ok(rows
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.unwrap_or(f64::INFINITY)).collect())
            .collect())
    }
}
