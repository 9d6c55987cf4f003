//! End-to-end inference on light fields as they come off disk: color
//! handling, the optional disparity-aligned tiling, coarse super-resolution
//! and refinement.

use rayon::prelude::*;
use serde::Serialize;

use crate::coarse::CoarseSr;
use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, rgb_to_ycbcr, ycbcr_to_rgb, ResampleSpec};
use crate::lightfield::io::LfData;
use crate::lightfield::{
    estimate_disparity_epi, propagate_disparity, AngularPosition, DisparityMap, EstimatorConfig, Image,
    IrregularLightField, LightField,
};
use crate::selectors::{crop_with_disparity, patch_disparity, select_top_k, PatchWindow};
use crate::train::Model;

/// Inference switches.
#[derive(Clone, Debug)]
pub struct SrOptions {
    /// Requested upscaling factor; must match the model.
    pub scale: usize,
    /// Auxiliary views per target, target included; `None` uses all views.
    pub k: Option<usize>,
    /// Disparity-align per-view tiles before the coarse network.
    pub patch_selector: bool,
    /// Low-resolution tile side used with the patch selector.
    pub tile: usize,
    /// Known low-resolution disparity maps; missing views are filled by
    /// propagation, or estimation when none are given.
    pub disparity: Vec<DisparityMap>,
    /// Skip refinement. Required for irregular input.
    pub coarse_only: bool,
}

impl SrOptions {
    pub fn new(scale: usize) -> Self {
        SrOptions { scale, k: None, patch_selector: false, tile: 32, disparity: Vec::new(), coarse_only: false }
    }
}

/// Bicubic downscale of every view and channel.
pub fn degrade(lf: &LfData, scale: usize) -> Result<LfData> {
    lf.map_views(|_, v| bicubic_resize(v, &ResampleSpec::down(scale)))
}

/// Bicubic upscale of every view and channel.
pub fn bicubic_upscale(lf: &LfData, scale: usize) -> Result<LfData> {
    lf.map_views(|_, v| bicubic_resize(v, &ResampleSpec::up(scale)))
}

/// Luma planes plus upscaled chroma for three-channel input.
struct Split {
    luma: IrregularLightField,
    chroma: Option<Vec<(Image, Image)>>,
}

fn split(lf: &IrregularLightField, scale: usize) -> Result<Split> {
    match lf.channels() {
        1 => Ok(Split { luma: lf.clone(), chroma: None }),
        3 => {
            let mut luma = Vec::with_capacity(lf.len());
            let mut chroma = Vec::with_capacity(lf.len());
            for (&pos, view) in lf.positions().iter().zip(lf.views()) {
                let ycc = rgb_to_ycbcr(view)?;
                let up = |c| bicubic_resize(&ycc.channel(c)?, &ResampleSpec::up(scale));
                luma.push((pos, ycc.channel(0)?));
                chroma.push((up(1)?, up(2)?));
            }
            Ok(Split { luma: IrregularLightField::new(luma)?, chroma: Some(chroma) })
        }
        c => Err(Error::invalid(format!("expected 1 or 3 channels, got {c}"))),
    }
}

fn merge(luma: Vec<Image>, chroma: &Option<Vec<(Image, Image)>>) -> Result<Vec<Image>> {
    match chroma {
        None => Ok(luma.into_iter().map(Image::clamped).collect()),
        Some(ch) => luma
            .into_iter()
            .zip(ch)
            .map(|(y, (cb, cr))| Ok(ycbcr_to_rgb(&Image::stack_channels(&[y, cb.clone(), cr.clone()])?)?.clamped()))
            .collect(),
    }
}

/// One disparity map per view of `luma`, in its view order.
fn disparity_maps(luma: &IrregularLightField, regular: Option<&LightField>, known: &[DisparityMap]) -> Result<Vec<DisparityMap>> {
    let (h, w) = luma.spatial();
    for map in known {
        if map.spatial() != (h, w) {
            let (mh, mw) = map.spatial();
            return Err(Error::invalid(format!(
                "disparity map for {} is {mh}x{mw}, views are {h}x{w}",
                map.position()
            )));
        }
    }
    let source = match known.first() {
        Some(_) => None,
        None => {
            let lf = regular.ok_or_else(|| {
                Error::invalid("patch selector on an irregular light field needs disparity maps")
            })?;
            let est = estimate_disparity_epi(lf, &EstimatorConfig::default())?;
            if est.textureless {
                log::warn!("input is textureless; patch alignment falls back to zero disparity");
            }
            Some(est.map)
        }
    };
    let seed = source.as_ref().or_else(|| known.first()).expect("one of the two is set");
    Ok(luma
        .positions()
        .iter()
        .map(|&pos| match known.iter().find(|m| m.position() == pos) {
            Some(m) => m.clone(),
            None => propagate_disparity(seed, pos),
        })
        .collect())
}

/// Square windows of side `tile` covering an `h x w` image; the last row and
/// column of windows are pushed back against the border.
pub fn tile_windows(h: usize, w: usize, tile: usize) -> Vec<PatchWindow> {
    let size = tile.min(h).min(w).max(1);
    let starts = |len: usize| {
        let mut s: Vec<usize> = (0..len.saturating_sub(size) + 1).step_by(size).collect();
        if s.last() != Some(&(len - size)) {
            s.push(len - size);
        }
        s
    };
    let cols = starts(w);
    starts(h)
        .into_iter()
        .flat_map(|top| cols.iter().map(move |&left| PatchWindow::new(top, left, size)))
        .collect()
}

/// Coarse output for `targets` where each tile sees disparity-aligned crops
/// of every view. The residual of each tile is added to the matching part of
/// the whole-view bicubic upscale.
fn coarse_tiled(
    coarse: &CoarseSr,
    luma: &IrregularLightField,
    maps: &[DisparityMap],
    targets: &[AngularPosition],
    k: usize,
    tile: usize,
) -> Result<Vec<Image>> {
    let s = coarse.config().scale;
    let (h, w) = luma.spatial();
    let windows = tile_windows(h, w, tile);
    targets
        .par_iter()
        .map(|&t| {
            let ti = luma.index_of(t).ok_or_else(|| Error::invalid(format!("target {t} not among the views")))?;
            let upscaled = bicubic_resize(&luma.views()[ti], &ResampleSpec::up(s))?;
            let mut out = upscaled.clone();
            for &win in &windows {
                let d = patch_disparity(&maps[ti], win)?;
                let crops = crop_with_disparity(luma, t, d, win)?;
                let views: Vec<&Image> = crops.patches.iter().collect();
                let features = coarse.features(&views)?;
                let aux = coarse.choose_aux(&crops.positions, &views, ti, k)?;
                let base = upscaled.crop(win.top * s, win.left * s, win.size * s, win.size * s)?;
                let sr = coarse.predict(&views, &features, ti, &aux, &base)?;
                for y in 0..win.size * s {
                    for x in 0..win.size * s {
                        out.set(0, win.top * s + y, win.left * s + x, sr.get(0, y, x));
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// Super-resolves a light field read from disk.
///
/// Color input is processed as YCbCr: the network sees luma only and the
/// chroma planes are upscaled bicubically. Regular input is refined unless
/// `coarse_only` is set or the model has no refinement network; irregular
/// input must be run with `coarse_only`.
pub fn super_resolve(model: &Model, input: &LfData, opts: &SrOptions) -> Result<LfData> {
    if opts.scale != model.scale() {
        return Err(Error::invalid(format!(
            "checkpoint is for scale {}, asked for {}",
            model.scale(),
            opts.scale
        )));
    }
    let regular = match input {
        LfData::Regular(lf) => Some(lf),
        LfData::Irregular(_) if !opts.coarse_only => {
            return Err(Error::invalid("refinement needs a regular grid; use coarse-only for irregular input"))
        }
        LfData::Irregular(_) => None,
    };
    let stack = input.to_irregular();
    let Split { luma, chroma } = split(&stack, opts.scale)?;
    let targets = luma.positions().to_vec();
    let k = opts.k.unwrap_or(luma.len());
    let coarse = if opts.patch_selector {
        let luma_regular = match regular {
            Some(lf) if lf.channels() == 1 => Some(lf.clone()),
            Some(lf) => Some(lf.to_luma()?),
            None => None,
        };
        let maps = disparity_maps(&luma, luma_regular.as_ref(), &opts.disparity)?;
        coarse_tiled(&model.coarse, &luma, &maps, &targets, k, opts.tile)?
    } else {
        model.coarse.super_resolve(&luma, &targets, Some(k))?
    };
    let luma_out = match (regular, &model.refine, opts.coarse_only) {
        (Some(lf), Some(refiner), false) => {
            let (m, n) = lf.angular();
            let refined = refiner.refine(&LightField::from_views(m, n, &coarse)?)?;
            refined.positions().iter().map(|&p| refined.get_sai(p)).collect::<Result<Vec<_>>>()?
        }
        _ => coarse,
    };
    let views = merge(luma_out, &chroma)?;
    Ok(match regular {
        Some(lf) => {
            let (m, n) = lf.angular();
            LfData::Regular(LightField::from_views(m, n, &views)?)
        }
        None => LfData::Irregular(IrregularLightField::new(targets.into_iter().zip(views).collect())?),
    })
}

/// Selector scores and the chosen auxiliary views for one target.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewSelection {
    pub target: AngularPosition,
    pub k: usize,
    pub positions: Vec<AngularPosition>,
    /// Raw selector score per view; absent for models without a selector.
    pub scores: Option<Vec<f32>>,
    /// Chosen views in raster order, target included.
    pub chosen: Vec<AngularPosition>,
}

impl ViewSelection {
    /// `M x N` grid of scores (`None` where a view is missing or unscored).
    pub fn score_grid(&self, m: usize, n: usize) -> Vec<Vec<Option<f32>>> {
        let mut grid = vec![vec![None; n]; m];
        if let Some(scores) = &self.scores {
            for (p, &s) in self.positions.iter().zip(scores) {
                grid[p.u as usize][p.v as usize] = Some(s);
            }
        }
        grid
    }

    pub fn mask(&self, m: usize, n: usize) -> Vec<Vec<bool>> {
        let mut grid = vec![vec![false; n]; m];
        for p in &self.chosen {
            grid[p.u as usize][p.v as usize] = true;
        }
        grid
    }
}

/// Runs the model's view choice for `target` on the luma of `input`.
pub fn select_views(model: &Model, input: &LfData, target: AngularPosition, k: usize) -> Result<ViewSelection> {
    let stack = input.to_irregular();
    let luma = split(&stack, 2)?.luma;
    let ti = luma.index_of(target).ok_or_else(|| Error::invalid(format!("target {target} not among the views")))?;
    let views: Vec<&Image> = luma.views().iter().collect();
    let positions = luma.positions().to_vec();
    let aux = model.coarse.choose_aux(&positions, &views, ti, k)?;
    Ok(ViewSelection {
        target,
        k,
        scores: model.coarse.score_all(&views, ti)?,
        chosen: aux.iter().map(|&i| positions[i]).collect(),
        positions,
    })
}

/// Top-`k` positions straight from a score vector, for checking a
/// [`ViewSelection`] against [`select_top_k`].
pub fn top_k_positions(scores: &[f32], positions: &[AngularPosition], k: usize) -> Result<Vec<AngularPosition>> {
    let mut out: Vec<AngularPosition> = select_top_k(scores, positions, k)?.chosen.iter().map(|&i| positions[i]).collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse::CoarseConfig;
    use crate::lightfield::{make_irregular, render_constant_disparity, synthetic_texture};
    use crate::refine::RefineConfig;

    fn model(selector: bool) -> Model {
        let coarse = CoarseConfig {
            channels: 4,
            n1: 1,
            n2: 1,
            n3: 1,
            n4: 1,
            p: 2,
            scale: 2,
            selector,
            selector_channels: 2,
        };
        Model::new(coarse, Some(RefineConfig { channels: 2, layers: 2, lambda_epi: 1.0 }), 1).unwrap()
    }

    fn lr_field(channels: usize) -> LightField {
        let base = synthetic_texture(22, 22, 0.2, 3);
        let base = if channels == 1 {
            base
        } else {
            let g = base.data().iter().map(|v| 1.0 - v).collect();
            let g = Image::new(22, 22, 1, g).unwrap();
            Image::stack_channels(&[base.clone(), g, base]).unwrap()
        };
        render_constant_disparity(&base, 1.0, 3, 3).unwrap()
    }

    #[test]
    fn tiles_cover_the_image() {
        for (h, w, t) in [(20, 20, 8), (16, 24, 8), (5, 9, 32), (17, 17, 4)] {
            let mut hit = vec![0; h * w];
            for win in tile_windows(h, w, t) {
                assert!(win.top + win.size <= h && win.left + win.size <= w);
                for y in win.top..win.top + win.size {
                    for x in win.left..win.left + win.size {
                        hit[y * w + x] += 1;
                    }
                }
            }
            assert!(hit.iter().all(|&c| c > 0), "{h}x{w} tile {t}");
        }
    }

    #[test]
    fn fresh_model_reproduces_bicubic() {
        let lf = LfData::Regular(lr_field(1));
        let want = bicubic_upscale(&lf, 2).unwrap().map_views(|_, v| Ok(v.clone().clamped())).unwrap();
        for patch_selector in [false, true] {
            let opts = SrOptions { patch_selector, tile: 8, ..SrOptions::new(2) };
            let got = super_resolve(&model(true), &lf, &opts).unwrap();
            assert_eq!(got, want, "patch selector {patch_selector}");
        }
    }

    #[test]
    fn color_input_keeps_shape_and_chroma() {
        let lf = LfData::Regular(lr_field(3));
        let got = super_resolve(&model(false), &lf, &SrOptions::new(2)).unwrap();
        let want = bicubic_upscale(&lf, 2).unwrap();
        let (LfData::Regular(g), LfData::Regular(w)) = (&got, &want) else { panic!() };
        assert_eq!(g.spatial(), (40, 40));
        assert_eq!(g.channels(), 3);
        let err = g.data().iter().zip(w.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn option_errors() {
        let lf = LfData::Regular(lr_field(1));
        assert!(super_resolve(&model(false), &lf, &SrOptions::new(3)).is_err());
        let irregular = LfData::Irregular(
            make_irregular(&lr_field(1), &[AngularPosition::new(0, 0), AngularPosition::new(1, 1), AngularPosition::new(2, 0)])
                .unwrap(),
        );
        assert!(super_resolve(&model(false), &irregular, &SrOptions::new(2)).is_err());
        let opts = SrOptions { coarse_only: true, ..SrOptions::new(2) };
        let out = super_resolve(&model(false), &irregular, &opts).unwrap();
        assert!(matches!(out, LfData::Irregular(ref s) if s.len() == 3 && s.spatial() == (40, 40)));
        let aligned = SrOptions { patch_selector: true, ..opts };
        assert!(super_resolve(&model(false), &irregular, &aligned).is_err());
        let bad_k = SrOptions { k: Some(10), ..SrOptions::new(2) };
        assert!(super_resolve(&model(false), &lf, &bad_k).is_err());
    }

    #[test]
    fn k_all_matches_default() {
        let mut m = model(true);
        for t in m.coarse.store_mut().tensors_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = ((i * 7919 % 13) as f32 - 6.0) * 0.01;
            }
        }
        let lf = LfData::Regular(lr_field(1));
        let a = super_resolve(&m, &lf, &SrOptions::new(2)).unwrap();
        let b = super_resolve(&m, &lf, &SrOptions { k: Some(9), ..SrOptions::new(2) }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_mask_matches_top_k() {
        let m = model(true);
        let lf = LfData::Regular(lr_field(1));
        let target = AngularPosition::new(1, 1);
        for k in 2..=9 {
            let sel = select_views(&m, &lf, target, k).unwrap();
            let mask = sel.mask(3, 3);
            assert_eq!(mask.iter().flatten().filter(|&&b| b).count(), k);
            assert!(mask[1][1]);
            let scores = sel.scores.clone().unwrap();
            let (others, other_scores): (Vec<AngularPosition>, Vec<f32>) = sel
                .positions
                .iter()
                .zip(&scores)
                .filter(|(p, _)| **p != target)
                .map(|(p, s)| (*p, *s))
                .unzip();
            let mut want = top_k_positions(&other_scores, &others, k - 1).unwrap();
            want.push(target);
            want.sort();
            assert_eq!(sel.chosen, want);
        }
        let plain = select_views(&model(false), &lf, target, 3).unwrap();
        assert!(plain.scores.is_none());
        assert!(plain.score_grid(3, 3).iter().flatten().all(Option::is_none));
    }
}
