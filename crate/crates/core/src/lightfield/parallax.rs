use super::{sample_bilinear, AngularPosition, DisparityMap, LightField};
use crate::error::{Error, Result};

/// Mean absolute deviation from the parallax relation
/// `L_a(x) = L_b(x + d(x) * (b - a))`.
///
/// Warped samples are read bilinearly; pixels whose warped coordinate falls
/// outside view `b` are excluded rather than zero-filled.
pub fn parallax_residual(
    lf: &LightField,
    d: &DisparityMap,
    pos_a: AngularPosition,
    pos_b: AngularPosition,
) -> Result<f64> {
    let (h, w) = lf.spatial();
    if d.spatial() != (h, w) {
        return Err(Error::shape("disparity map does not match light-field extents"));
    }
    let a = lf.get_sai(pos_a)?;
    let b = lf.get_sai(pos_b)?;
    let du = (pos_b.u - pos_a.u) as f32;
    let dv = (pos_b.v - pos_a.v) as f32;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let disp = d.at(y, x);
            let wx = x as f32 + disp * du;
            let wy = y as f32 + disp * dv;
            for c in 0..lf.channels() {
                if let Some(s) = sample_bilinear(b.plane(c), h, w, wy, wx) {
                    sum += (a.get(c, y, x) - s).abs() as f64;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("no pixel warps inside the second view"));
    }
    Ok(sum / count as f64)
}
