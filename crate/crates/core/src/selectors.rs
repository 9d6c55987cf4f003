//! View selection and disparity-driven patch alignment.
//!
//! The SAI selector scores every `(target, candidate)` pair with a small
//! convolutional stack; the top-scoring candidates become auxiliary views and
//! their features are gated by the squashed score, which keeps selection
//! trainable. The patch selector crops each view around the point that
//! corresponds to a window in the reference view, so that the network sees
//! nearly aligned content.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::lightfield::{AngularPosition, DisparityMap, Image, IrregularLightField};
use crate::nn::{Bound, Conv, ParamStore};

/// Number of conv + relu layers before the scoring head.
pub const SELECTOR_DEPTH: usize = 3;

/// Pairwise view scorer: `[target, candidate]` -> conv/relu x3 -> conv -> mean.
#[derive(Clone, Debug)]
pub struct SaiSelector {
    layers: Vec<Conv>,
    head: Conv,
}

impl SaiSelector {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(SELECTOR_DEPTH);
        let mut c_in = 2;
        for i in 0..SELECTOR_DEPTH {
            layers.push(Conv::new(store, &format!("{name}.conv{i}"), c_in, channels, 3, rng));
            c_in = channels;
        }
        let head = Conv::new(store, &format!("{name}.head"), channels, 1, 3, rng);
        SaiSelector { layers, head }
    }

    /// Raw scores `[K]` for a target `[1, 1, H, W]` against candidates
    /// `[K, 1, H, W]`.
    pub fn score(&self, tape: &mut Tape, p: &Bound, target: Var, candidates: Var) -> Result<Var> {
        let k = tape.shape(candidates)[0];
        if tape.shape(target)[0] != 1 || tape.shape(target)[1..] != tape.shape(candidates)[1..] {
            return Err(Error::shape(format!(
                "selector: target {:?} vs candidates {:?}",
                tape.shape(target),
                tape.shape(candidates)
            )));
        }
        let repeated = tape.gather_rows(target, &vec![0; k])?;
        let mut x = tape.concat(&[repeated, candidates], 1)?;
        for layer in &self.layers {
            x = layer.forward(tape, p, x)?;
            x = tape.relu(x);
        }
        let x = self.head.forward(tape, p, x)?;
        let pooled = tape.adaptive_avg_pool(x)?;
        tape.reshape(pooled, &[k])
    }
}

/// Stacks single-channel images into a `[K, 1, H, W]` tensor.
pub fn stack_images(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to stack"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.channels() != 1 || (img.height(), img.width()) != (h, w) {
            return Err(Error::shape("stacked images must be single-channel and equally sized"));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// Scores every candidate against `target` with frozen selector weights.
pub fn score_views(
    selector: &SaiSelector,
    store: &ParamStore,
    target: &Image,
    candidates: &[&Image],
) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let t = tape.constant(stack_images(&[target])?);
    let c = tape.constant(stack_images(candidates)?);
    let s = selector.score(&mut tape, &p, t, c)?;
    Ok(tape.value(s).data().to_vec())
}

/// Result of top-k selection over a candidate list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub k: usize,
    /// Chosen candidate indices, best first.
    pub chosen: Vec<usize>,
    /// Scores of every candidate, in candidate order.
    pub scores: Vec<f32>,
}

/// Indices of the `k` largest scores. `positions` gives each candidate's
/// angular position; equal scores are broken by raster order.
pub fn select_top_k(scores: &[f32], positions: &[AngularPosition], k: usize) -> Result<Selection> {
    if scores.len() != positions.len() {
        return Err(Error::shape("one position per score required"));
    }
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!("k = {k} outside [1, {}]", scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("selector produced a NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("no NaN")
            .then(positions[a].cmp(&positions[b]))
    });
    order.truncate(k);
    Ok(Selection { k, chosen: order, scores: scores.to_vec() })
}

/// `features[i] * sigmoid(scores[i])` for every row `i`.
pub fn gate_features(tape: &mut Tape, features: Var, scores: Var) -> Result<Var> {
    let gate = tape.sigmoid(scores);
    tape.mul_rows(features, gate)
}

/// Square crop window in reference-view pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl PatchWindow {
    pub fn new(top: usize, left: usize, size: usize) -> Self {
        PatchWindow { top, left, size }
    }

    /// Center as `[x, y]`; for even sizes the lower-right of the middle four.
    pub fn center(&self) -> [i64; 2] {
        [(self.left + self.size / 2) as i64, (self.top + self.size / 2) as i64]
    }

    fn fits(&self, height: usize, width: usize) -> bool {
        self.size > 0 && self.top + self.size <= height && self.left + self.size <= width
    }
}

/// Mean disparity inside `window`.
pub fn patch_disparity(map: &DisparityMap, window: PatchWindow) -> Result<f32> {
    let (h, w) = map.spatial();
    if !window.fits(h, w) {
        return Err(Error::invalid(format!("window {window:?} outside {h}x{w} disparity map")));
    }
    let mut sum = 0.0f64;
    for y in window.top..window.top + window.size {
        for x in window.left..window.left + window.size {
            sum += map.at(y, x) as f64;
        }
    }
    Ok((sum / (window.size * window.size) as f64) as f32)
}

/// `x_u = x_c + d (u_c - u)`, rounded per axis. Coordinates are `[x, y]`;
/// `x` pairs with the angular `u` index and `y` with `v`.
pub fn aligned_center(center: [i64; 2], d: f32, reference: AngularPosition, view: AngularPosition) -> [i64; 2] {
    let d = d as f64;
    [
        center[0] + (d * (reference.u - view.u) as f64).round() as i64,
        center[1] + (d * (reference.v - view.v) as f64).round() as i64,
    ]
}

/// Per-view crops around disparity-aligned centers.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPatches {
    pub reference: AngularPosition,
    /// Patch disparity used for alignment.
    pub disparity: f32,
    pub positions: Vec<AngularPosition>,
    /// Top-left `(y, x)` of each crop.
    pub origins: Vec<(usize, usize)>,
    /// Whether the crop had to be moved to stay inside its view.
    pub clamped: Vec<bool>,
    pub patches: Vec<Image>,
}

impl AlignedPatches {
    /// Mean absolute difference between each patch and the reference patch,
    /// averaged over the other views.
    pub fn cross_view_residual(&self) -> Result<f64> {
        let r = self
            .positions
            .iter()
            .position(|&p| p == self.reference)
            .ok_or_else(|| Error::invalid("reference view missing from patch stack"))?;
        let reference = self.patches[r].data();
        let mut total = 0.0;
        let mut count = 0;
        for (i, patch) in self.patches.iter().enumerate() {
            if i == r {
                continue;
            }
            let s: f64 = patch
                .data()
                .iter()
                .zip(reference)
                .map(|(a, b)| (a - b).abs() as f64)
                .sum();
            total += s / reference.len() as f64;
            count += 1;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }
}

/// Crops every view of `lf` around the point matching `window` in the
/// reference view `disparity.position()`, using the window's mean disparity.
///
/// Scene points move by `+d` pixels per `+1` angular step, so the crop for a
/// view at `u` is centered at `aligned_center(c, -d, u_c, u)`. Centers that
/// would push a crop out of its view are clamped and flagged.
pub fn crop_aligned_patches(
    lf: &IrregularLightField,
    disparity: &DisparityMap,
    window: PatchWindow,
) -> Result<AlignedPatches> {
    let d = patch_disparity(disparity, window)?;
    crop_with_disparity(lf, disparity.position(), d, window)
}

/// Same cropping with an explicit patch disparity; `d = 0` gives unaligned
/// crops at identical coordinates.
pub fn crop_with_disparity(
    lf: &IrregularLightField,
    reference: AngularPosition,
    d: f32,
    window: PatchWindow,
) -> Result<AlignedPatches> {
    let (h, w) = lf.spatial();
    if !window.fits(h, w) {
        return Err(Error::invalid(format!("window {window:?} outside {h}x{w} views")));
    }
    let center = window.center();
    let half = (window.size / 2) as i64;
    let mut out = AlignedPatches {
        reference,
        disparity: d,
        positions: lf.positions().to_vec(),
        origins: Vec::with_capacity(lf.len()),
        clamped: Vec::with_capacity(lf.len()),
        patches: Vec::with_capacity(lf.len()),
    };
    for (&pos, view) in lf.positions().iter().zip(lf.views()) {
        let [cx, cy] = aligned_center(center, -d, reference, pos);
        let top = (cy - half).clamp(0, (h - window.size) as i64) as usize;
        let left = (cx - half).clamp(0, (w - window.size) as i64) as usize;
        out.clamped
            .push(top as i64 != cy - half || left as i64 != cx - half);
        out.origins.push((top, left));
        out.patches.push(view.crop(top, left, window.size, window.size)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, random_tensor};
    use crate::lightfield::{render_constant_disparity, synthetic_texture, LightField};

    fn grid(m: i32, n: i32) -> Vec<AngularPosition> {
        (0..m).flat_map(|u| (0..n).map(move |v| AngularPosition::new(u, v))).collect()
    }

    #[test]
    fn top_k_examples() {
        let pos = grid(1, 3);
        let s = select_top_k(&[0.9, 0.1, 0.5], &pos, 2).unwrap();
        let mut chosen = s.chosen.clone();
        chosen.sort();
        assert_eq!(chosen, vec![0, 2]);
        assert_eq!(select_top_k(&[0.9, 0.1, 0.5], &pos, 3).unwrap().chosen.len(), 3);
        let pos = grid(2, 3);
        assert_eq!(select_top_k(&[0.2; 6], &pos, 3).unwrap().chosen, vec![0, 1, 2]);
        assert!(select_top_k(&[0.2; 6], &pos, 0).is_err());
        assert!(select_top_k(&[0.2; 6], &pos, 7).is_err());
        assert!(select_top_k(&[0.2, f32::NAN], &pos[..2], 1).is_err());
    }

    #[test]
    fn tie_break_uses_raster_order_not_list_order() {
        let pos = vec![AngularPosition::new(1, 0), AngularPosition::new(0, 1), AngularPosition::new(0, 0)];
        assert_eq!(select_top_k(&[1.0, 1.0, 1.0], &pos, 2).unwrap().chosen, vec![2, 1]);
    }

    fn selector_fixture(seed: u64) -> (SaiSelector, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sel = SaiSelector::new(&mut store, "sel", 4, &mut rng);
        (sel, store)
    }

    #[test]
    fn equal_pairs_score_equally() {
        let (sel, store) = selector_fixture(0);
        let img = synthetic_texture(8, 8, 0.3, 1);
        let scores = score_views(&sel, &store, &img, &[&img, &img, &img]).unwrap();
        assert_eq!(scores.len(), 3);
        assert!(scores.iter().all(|s| s.is_finite() && *s == scores[0]));
        let other = synthetic_texture(8, 8, 0.3, 2);
        let s2 = score_views(&sel, &store, &img, &[&img, &other]).unwrap();
        assert_eq!(s2[0], scores[0], "scores do not depend on batch neighbours");
    }

    #[test]
    fn selector_score_gradients() {
        let (sel, store) = selector_fixture(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut inputs = vec![random_tensor(&[1, 1, 8, 8], &mut rng), random_tensor(&[2, 1, 8, 8], &mut rng)];
        inputs.extend(store.tensors().iter().cloned());
        let rep = check_gradients(&inputs, 1e-3, 5, |tape, v| {
            let p = Bound::from_vars(v[2..].to_vec());
            sel.score(tape, &p, v[0], v[1])
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }

    #[test]
    fn gate_examples() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![2, 2], vec![2.0, 4.0, -1.0, 3.0]).unwrap());
        let s = tape.constant(Tensor::new(vec![2], vec![0.0, 40.0]).unwrap());
        let g = gate_features(&mut tape, f, s).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 2.0, -1.0, 3.0]);
    }

    #[test]
    fn gate_gradient_reaches_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![random_tensor(&[3, 2, 2], &mut rng), random_tensor(&[3], &mut rng)];
        let target = random_tensor(&[3, 2, 2], &mut rng);
        let rep = check_gradients(&inputs, 1e-3, 7, |tape, v| {
            let g = gate_features(tape, v[0], v[1])?;
            let t = tape.constant(target.clone());
            tape.l1(g, t)
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");

        let mut tape = Tape::new();
        let f = tape.constant(inputs[0].clone());
        let s = tape.param(inputs[1].clone());
        let g = gate_features(&mut tape, f, s).unwrap();
        let loss = tape.sum(g);
        tape.backward(loss).unwrap();
        assert!(tape.grad(s).data().iter().all(|&x| x != 0.0));
    }

    #[test]
    fn patch_disparity_examples() {
        let map = DisparityMap::new(2, 2, AngularPosition::new(0, 0), vec![1.0, 2.0, 3.0, 2.0]).unwrap();
        assert_eq!(patch_disparity(&map, PatchWindow::new(0, 0, 2)).unwrap(), 2.0);
        let c = DisparityMap::constant(5, 5, AngularPosition::new(0, 0), -1.5);
        assert_eq!(patch_disparity(&c, PatchWindow::new(1, 2, 3)).unwrap(), -1.5);
        assert!(patch_disparity(&c, PatchWindow::new(3, 3, 3)).is_err());
    }

    #[test]
    fn aligned_center_examples() {
        let c = AngularPosition::new(3, 3);
        assert_eq!(aligned_center([100, 100], 2.0, c, AngularPosition::new(0, 0)), [106, 106]);
        assert_eq!(aligned_center([100, 100], 2.0, c, c), [100, 100]);
        for u in 0..7 {
            for v in 0..7 {
                assert_eq!(aligned_center([40, 17], 0.0, c, AngularPosition::new(u, v)), [40, 17]);
            }
        }
        // u pairs with x, v with y; half-pixel shifts round away from zero
        assert_eq!(aligned_center([10, 10], 0.5, c, AngularPosition::new(2, 3)), [11, 10]);
        assert_eq!(aligned_center([10, 10], 1.25, c, AngularPosition::new(3, 5)), [10, 7]);
    }

    fn textured_lf(d: f32, m: usize, seed: u64) -> LightField {
        render_constant_disparity(&synthetic_texture(56, 56, 0.3, seed), d, m, m).unwrap()
    }

    #[test]
    fn zero_disparity_crops_share_coordinates() {
        let lf = IrregularLightField::from(&textured_lf(0.0, 3, 1));
        let map = DisparityMap::constant(56, 56, AngularPosition::new(1, 1), 0.0);
        let p = crop_aligned_patches(&lf, &map, PatchWindow::new(10, 12, 16)).unwrap();
        assert!(p.origins.iter().all(|&o| o == (10, 12)));
        assert!(p.clamped.iter().all(|c| !c));
        assert_eq!(p.cross_view_residual().unwrap(), 0.0);
    }

    #[test]
    fn alignment_removes_parallax() {
        for d in [-3.0f32, -2.0, 2.0, 3.0] {
            let lf = textured_lf(d, 3, 2);
            let (h, w) = lf.spatial();
            let irr = IrregularLightField::from(&lf);
            let map = DisparityMap::constant(h, w, lf.center(), d);
            let window = PatchWindow::new(12, 12, 20);
            let aligned = crop_aligned_patches(&irr, &map, window).unwrap();
            let plain = crop_with_disparity(&irr, lf.center(), 0.0, window).unwrap();
            let ra = aligned.cross_view_residual().unwrap();
            let rp = plain.cross_view_residual().unwrap();
            assert!(ra < 0.02, "d={d}: aligned residual {ra}");
            assert!(rp > ra, "d={d}: {rp} <= {ra}");
        }
    }

    #[test]
    fn crops_are_clamped_at_borders() {
        let lf = IrregularLightField::from(&textured_lf(3.0, 3, 3));
        let (h, w) = lf.spatial();
        let map = DisparityMap::constant(h, w, AngularPosition::new(1, 1), 3.0);
        let p = crop_aligned_patches(&lf, &map, PatchWindow::new(0, 0, 16)).unwrap();
        assert!(p.clamped.iter().any(|&c| c));
        for &(t, l) in &p.origins {
            assert!(t + 16 <= h && l + 16 <= w);
        }
    }

    proptest! {
        #[test]
        fn top_k_matches_sort_oracle(scores in prop::collection::vec(-3i32..3, 1..20), k_frac in 0.0f64..1.0) {
            let scores: Vec<f32> = scores.into_iter().map(|s| s as f32 * 0.5).collect();
            let pos = grid(4, 5)[..scores.len()].to_vec();
            let k = 1 + ((scores.len() - 1) as f64 * k_frac) as usize;
            let mut oracle: Vec<(f32, usize)> = scores.iter().copied().zip(0..).collect();
            // stable sort by descending score keeps raster order among ties
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let expect: Vec<usize> = oracle.iter().take(k).map(|e| e.1).collect();
            prop_assert_eq!(select_top_k(&scores, &pos, k).unwrap().chosen, expect);
        }

        #[test]
        fn top_k_is_affine_invariant(scores in prop::collection::vec(-1.0f32..1.0, 1..12), a in 0.1f32..4.0, b in -2.0f32..2.0) {
            let pos = grid(3, 4)[..scores.len()].to_vec();
            let k = scores.len().div_ceil(2);
            let t: Vec<f32> = scores.iter().map(|s| a * s + b).collect();
            let mut x = select_top_k(&scores, &pos, k).unwrap().chosen;
            let mut y = select_top_k(&t, &pos, k).unwrap().chosen;
            x.sort();
            y.sort();
            prop_assert_eq!(x, y);
        }

        #[test]
        fn aligned_center_is_translation_equivariant(tx in -50i64..50, ty in -50i64..50, d in -4.0f32..4.0, u in 0i32..7, v in 0i32..7) {
            let c = AngularPosition::new(3, 3);
            let p = AngularPosition::new(u, v);
            let a = aligned_center([60, 60], d, c, p);
            let b = aligned_center([60 + tx, 60 + ty], d, c, p);
            prop_assert_eq!([a[0] + tx, a[1] + ty], b);
        }

        #[test]
        fn patch_disparity_matches_brute_force(seed in 0u64..1000, top in 0usize..6, left in 0usize..6, size in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..100).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let map = DisparityMap::new(10, 10, AngularPosition::new(0, 0), data.clone()).unwrap();
            let mut vals = Vec::new();
            for y in top..top + size {
                for x in left..left + size {
                    vals.push(data[y * 10 + x] as f64);
                }
            }
            let expect = vals.iter().sum::<f64>() / vals.len() as f64;
            let got = patch_disparity(&map, PatchWindow::new(top, left, size)).unwrap();
            prop_assert!((got as f64 - expect).abs() < 1e-5);
        }
    }
}
