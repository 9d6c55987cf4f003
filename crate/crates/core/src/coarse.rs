//! Per-view coarse super-resolution by combinatorial embedding.
//!
//! Every low-resolution view passes through a shared feature extractor
//! (`f1`). The target's features are paired with each auxiliary view's
//! features and embedded by one shared correlation network (`f2`). The
//! embedded stack is max-pooled to `p` slices and fused (`f3`), then a
//! sub-pixel path predicts a residual over the bicubic upscale of the target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, ResampleSpec};
use crate::lightfield::{AngularPosition, Image, IrregularLightField};
use crate::nn::{res_stack, run_stack, Bound, Conv, ParamStore, ResBlock};
use crate::selectors::{gate_features, select_top_k, stack_images, SaiSelector};

/// Architecture of the coarse network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseConfig {
    /// Feature channels `c`.
    pub channels: usize,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub n4: usize,
    /// Slices kept by the max-pool over auxiliary views.
    pub p: usize,
    /// Upscaling factor.
    pub scale: usize,
    /// Score and gate auxiliary views with a learned selector.
    pub selector: bool,
    pub selector_channels: usize,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        CoarseConfig {
            channels: 64,
            n1: 5,
            n2: 5,
            n3: 3,
            n4: 3,
            p: 9,
            scale: 2,
            selector: true,
            selector_channels: 16,
        }
    }
}

impl CoarseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.p == 0 {
            return Err(Error::invalid("channels and p must be positive"));
        }
        if self.scale < 2 {
            return Err(Error::invalid(format!("scale must be at least 2, got {}", self.scale)));
        }
        if self.selector && self.selector_channels == 0 {
            return Err(Error::invalid("selector needs at least one channel"));
        }
        Ok(())
    }
}

/// How auxiliary features are weighted before pairing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    /// Features pass through untouched.
    Off,
    /// Multiply by `sigmoid(selector score)`.
    Learned,
    /// Multiply every row by a fixed factor.
    Constant(f32),
}

#[derive(Clone, Debug)]
pub struct CoarseSr {
    config: CoarseConfig,
    store: ParamStore,
    f1_head: Conv,
    f1_blocks: Vec<ResBlock>,
    f2_head: Conv,
    f2_blocks: Vec<ResBlock>,
    f3_blocks: Vec<ResBlock>,
    f3_merge: Conv,
    f3_channel: Vec<ResBlock>,
    up: Conv,
    f4: Conv,
    selector: Option<SaiSelector>,
}

impl CoarseSr {
    /// Fresh network. The final reconstruction conv starts at zero, so an
    /// untrained model reproduces the bicubic upscale.
    pub fn new(config: CoarseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let f1_head = Conv::new(&mut store, "coarse.f1.head", 1, c, 3, &mut rng);
        let f1_blocks = res_stack(&mut store, "coarse.f1.res", config.n1, c, &mut rng);
        let f2_head = Conv::new(&mut store, "coarse.f2.head", 2 * c, c, 3, &mut rng);
        let f2_blocks = res_stack(&mut store, "coarse.f2.res", config.n2, c, &mut rng);
        let f3_blocks = res_stack(&mut store, "coarse.f3.views", config.n3, config.p, &mut rng);
        let f3_merge = Conv::new(&mut store, "coarse.f3.merge", config.p, 1, 3, &mut rng);
        let f3_channel = res_stack(&mut store, "coarse.f3.channels", config.n4, c, &mut rng);
        let up = Conv::new(&mut store, "coarse.up", c, config.scale * config.scale * c, 3, &mut rng);
        let f4 = Conv::zeroed(&mut store, "coarse.f4", c, 1, 3);
        let selector = config
            .selector
            .then(|| SaiSelector::new(&mut store, "coarse.selector", config.selector_channels, &mut rng));
        Ok(CoarseSr {
            config,
            store,
            f1_head,
            f1_blocks,
            f2_head,
            f2_blocks,
            f3_blocks,
            f3_merge,
            f3_channel,
            up,
            f4,
            selector,
        })
    }

    pub fn config(&self) -> &CoarseConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn selector(&self) -> Option<&SaiSelector> {
        self.selector.as_ref()
    }

    /// `f1`: `[V, 1, H, W] -> [V, c, H, W]`, shared by every view.
    pub fn extract_features(&self, tape: &mut Tape, p: &Bound, views: Var) -> Result<Var> {
        let x = self.f1_head.forward(tape, p, views)?;
        run_stack(&self.f1_blocks, tape, p, x)
    }

    /// `f2`: embeds each auxiliary feature map into the target's,
    /// `[K, c, H, W] x [K, c, H, W] -> [K, c, H, W]`.
    pub fn embed_pairs(&self, tape: &mut Tape, p: &Bound, target: Var, aux: Var) -> Result<Var> {
        if tape.shape(target) != tape.shape(aux) {
            return Err(Error::shape(format!(
                "f2 inputs differ: {:?} vs {:?}",
                tape.shape(target),
                tape.shape(aux)
            )));
        }
        let x = tape.concat(&[target, aux], 1)?;
        let x = self.f2_head.forward(tape, p, x)?;
        run_stack(&self.f2_blocks, tape, p, x)
    }

    /// `f3`: max-pools `K >= p` embedded maps to `p` slices, fuses the `p`
    /// slices of each channel with kernels shared across channels, then mixes
    /// channels. `[K, c, H, W] -> [1, c, H, W]`.
    pub fn fuse(&self, tape: &mut Tape, p: &Bound, stack: Var) -> Result<Var> {
        let shape = tape.shape(stack).to_vec();
        let [k, c, h, w] = shape[..] else {
            return Err(Error::shape(format!("f3 expects [K, c, H, W], got {shape:?}")));
        };
        if k < self.config.p {
            return Err(Error::invalid(format!(
                "{k} auxiliary views cannot fill {} pooled slices",
                self.config.p
            )));
        }
        let pooled = tape.max_over_axis(stack, 0, self.config.p)?;
        let per_channel = tape.permute(pooled, &[1, 0, 2, 3])?;
        let x = run_stack(&self.f3_blocks, tape, p, per_channel)?;
        let x = self.f3_merge.forward(tape, p, x)?;
        let x = tape.reshape(x, &[1, c, h, w])?;
        run_stack(&self.f3_channel, tape, p, x)
    }

    /// Sub-pixel reconstruction: `[1, c, H, W]` -> residual
    /// `[1, 1, aH, aW]` added to `base`.
    pub fn reconstruct(&self, tape: &mut Tape, p: &Bound, fused: Var, base: Var) -> Result<Var> {
        let x = self.up.forward(tape, p, fused)?;
        let x = tape.pixel_shuffle(x, self.config.scale)?;
        let residual = self.f4.forward(tape, p, x)?;
        tape.add(residual, base)
    }

    /// Target `[1, c, H, W]` paired with `aux` features `[K, c, H, W]`;
    /// `scores` (`[K]`) are required for [`Gate::Learned`].
    pub fn forward_pairs(
        &self,
        tape: &mut Tape,
        p: &Bound,
        target: Var,
        aux: Var,
        gate: Gate,
        scores: Option<Var>,
        base: Var,
    ) -> Result<Var> {
        let k = tape.shape(aux)[0];
        let aux = match gate {
            Gate::Off => aux,
            Gate::Learned => {
                let s = scores.ok_or_else(|| Error::invalid("learned gating needs selector scores"))?;
                gate_features(tape, aux, s)?
            }
            Gate::Constant(g) => {
                let ones = tape.constant(Tensor::full(vec![k], g));
                tape.mul_rows(aux, ones)?
            }
        };
        let repeated = tape.gather_rows(target, &vec![0; k])?;
        let embedded = self.embed_pairs(tape, p, repeated, aux)?;
        let fused = self.fuse(tape, p, embedded)?;
        self.reconstruct(tape, p, fused, base)
    }

    /// Whole differentiable path for one target, as used in training:
    /// `views` is `[V, 1, H, W]`, `aux` indexes rows of `views` (the target
    /// included), `base` is the bicubic upscale of the target.
    pub fn forward_target(
        &self,
        tape: &mut Tape,
        p: &Bound,
        views: Var,
        target: usize,
        aux: &[usize],
        base: Var,
    ) -> Result<Var> {
        let feats = self.extract_features(tape, p, views)?;
        let t = tape.gather_rows(feats, &[target])?;
        let a = tape.gather_rows(feats, aux)?;
        let (gate, scores) = match &self.selector {
            Some(sel) => {
                let ti = tape.gather_rows(views, &[target])?;
                let ai = tape.gather_rows(views, aux)?;
                (Gate::Learned, Some(sel.score(tape, p, ti, ai)?))
            }
            None => (Gate::Off, None),
        };
        self.forward_pairs(tape, p, t, a, gate, scores, base)
    }

    /// Raw selector scores of every view against `views[target]`.
    pub fn score_all(&self, views: &[&Image], target: usize) -> Result<Option<Vec<f32>>> {
        let Some(sel) = &self.selector else { return Ok(None) };
        crate::selectors::score_views(sel, &self.store, views[target], views).map(Some)
    }

    /// Chooses `k` auxiliary rows (the target always among them) and returns
    /// them in raster order of `positions`.
    ///
    /// With a selector the other `k - 1` views are the top-scoring ones;
    /// without one they are the angularly nearest, ties in raster order.
    pub fn choose_aux(
        &self,
        positions: &[AngularPosition],
        views: &[&Image],
        target: usize,
        k: usize,
    ) -> Result<Vec<usize>> {
        let v = positions.len();
        if k < self.config.p || k > v {
            return Err(Error::invalid(format!(
                "k = {k} outside [{}, {v}]",
                self.config.p
            )));
        }
        let mut chosen = vec![target];
        if k > 1 {
            let others: Vec<usize> = (0..v).filter(|&i| i != target).collect();
            let other_pos: Vec<AngularPosition> = others.iter().map(|&i| positions[i]).collect();
            let keys: Vec<f32> = match self.score_all(views, target)? {
                Some(s) => others.iter().map(|&i| s[i]).collect(),
                None => {
                    let t = positions[target];
                    other_pos
                        .iter()
                        .map(|q| -(((q.u - t.u).pow(2) + (q.v - t.v).pow(2)) as f32))
                        .collect()
                }
            };
            let sel = select_top_k(&keys, &other_pos, k - 1)?;
            chosen.extend(sel.chosen.iter().map(|&i| others[i]));
        }
        chosen.sort_by_key(|&i| positions[i]);
        Ok(chosen)
    }

    /// Features of every view with frozen weights: `[V, c, H, W]`.
    pub fn features(&self, views: &[&Image]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(stack_images(views)?);
        let f = self.extract_features(&mut tape, &p, x)?;
        Ok(tape.value(f).clone())
    }

    /// Super-resolves `views[target]` from precomputed features, pairing it
    /// with the rows `aux` (duplicates allowed). `base` is the upscaled
    /// target the residual is added to.
    pub fn predict(
        &self,
        views: &[&Image],
        features: &Tensor,
        target: usize,
        aux: &[usize],
        base: &Image,
    ) -> Result<Image> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let t = tape.constant(gather(features, &[target])?);
        let a = tape.constant(gather(features, aux)?);
        let (gate, scores) = match &self.selector {
            Some(sel) => {
                let ti = tape.constant(stack_images(&[views[target]])?);
                let picked: Vec<&Image> = aux.iter().map(|&i| views[i]).collect();
                let ai = tape.constant(stack_images(&picked)?);
                (Gate::Learned, Some(sel.score(&mut tape, &p, ti, ai)?))
            }
            None => (Gate::Off, None),
        };
        let b = tape.constant(stack_images(&[base])?);
        let out = self.forward_pairs(&mut tape, &p, t, a, gate, scores, b)?;
        let (h, w) = (base.height(), base.width());
        Image::new(h, w, 1, tape.value(out).data().to_vec())
    }

    /// Coarse super-resolution of `targets` from the views of `lf` (single
    /// channel). `k = None` uses every view as auxiliary. Targets run in
    /// parallel and share one feature pass.
    pub fn super_resolve(
        &self,
        lf: &IrregularLightField,
        targets: &[AngularPosition],
        k: Option<usize>,
    ) -> Result<Vec<Image>> {
        if lf.channels() != 1 {
            return Err(Error::invalid("coarse super-resolution works on single-channel views"));
        }
        let views: Vec<&Image> = lf.views().iter().collect();
        let features = self.features(&views)?;
        let k = k.unwrap_or(lf.len());
        targets
            .par_iter()
            .map(|&t| {
                let ti = lf
                    .index_of(t)
                    .ok_or_else(|| Error::invalid(format!("target {t} not among the views")))?;
                let aux = self.choose_aux(lf.positions(), &views, ti, k)?;
                let base = bicubic_resize(views[ti], &ResampleSpec::up(self.config.scale))?;
                self.predict(&views, &features, ti, &aux, &base)
            })
            .collect()
    }
}

/// Rows `indices` of a tensor along axis 0.
pub(crate) fn gather(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let rows = t.shape()[0];
    let per = t.numel() / rows;
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        if i >= rows {
            return Err(Error::shape(format!("row {i} of {rows}")));
        }
        data.extend_from_slice(&t.data()[i * per..][..per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data)
}

/// Mean absolute error between a prediction and its ground truth.
pub fn coarse_loss(tape: &mut Tape, sr: Var, hr: Var) -> Result<Var> {
    tape.l1(sr, hr)
}
