//! Two-stage training: sample generation, Adam, the stage loops and the
//! checkpoint format.
//!
//! The coarse network is trained first on random crops, one target view per
//! step. The refinement network is then trained on the frozen coarse
//! network's output for every view of a crop.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::coarse::{CoarseConfig, CoarseSr};
use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, ResampleSpec};
use crate::lightfield::io::write_atomic;
use crate::lightfield::{
    estimate_disparity_epi, AngularPosition, DisparityMap, EstimatorConfig, Image, IrregularLightField, LightField,
};
use crate::refine::{lf_tensor, refine_loss, RefineConfig, Refiner};
use crate::selectors::{crop_aligned_patches, crop_with_disparity, stack_images, PatchWindow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Refine,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Coarse => "coarse",
            Stage::Refine => "refine",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Passes over the training items; one step per item per epoch.
    pub epochs: usize,
    pub lr0: f32,
    /// The learning rate is multiplied by `decay` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Low-resolution patch side; crops are `scale * patch` pixels wide.
    pub patch: usize,
    /// Inclusive range for the random auxiliary count; `None` means
    /// `[p, M * N]`.
    pub k_range: Option<(usize, usize)>,
    /// Disparity-align per-view crops (coarse stage only).
    pub patch_selector: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Coarse,
            epochs: 1,
            lr0: 1e-4,
            decay_every: 250,
            decay: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patch: 64,
            k_range: None,
            patch_selector: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self, epoch: usize) -> f32 {
        let halvings = (epoch / self.decay_every.max(1)) as i32;
        self.lr0 * self.decay.powi(halvings)
    }

    pub fn validate(&self, scale: usize) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr0)));
        }
        if self.patch == 0 || self.patch % scale != 0 {
            return Err(Error::invalid(format!(
                "patch {} must be a positive multiple of the scale {scale}",
                self.patch
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    steps: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Self {
        Adam { beta1, beta2, eps, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update of every tensor in `params` from the matching gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len()
            || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape())
        {
            return Err(Error::shape("one gradient of matching shape per parameter required"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::shape("optimizer state does not match the parameters"));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Adam::step`].
pub fn adam_step(state: &mut Adam, params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
    state.step(params, grads, lr)
}

/// One high-resolution training light field (single channel).
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub hr: LightField,
    /// Center-view disparity in high-resolution pixels, for patch alignment.
    pub disparity: Option<DisparityMap>,
}

impl TrainItem {
    pub fn new(hr: LightField) -> Result<Self> {
        let hr = if hr.channels() == 1 { hr } else { hr.to_luma()? };
        Ok(TrainItem { hr, disparity: None })
    }

    /// Fills in a disparity map from the structure-tensor estimator.
    pub fn with_estimated_disparity(mut self) -> Result<Self> {
        if self.disparity.is_none() {
            let est = estimate_disparity_epi(&self.hr, &EstimatorConfig::default())?;
            if est.textureless {
                log::warn!("training light field is textureless; using zero disparity");
            }
            self.disparity = Some(est.map);
        }
        Ok(self)
    }
}

/// One training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub lr: LightField,
    pub hr: LightField,
    pub target: AngularPosition,
    pub k: usize,
    /// Top-left `(y, x)` of every view's high-resolution crop.
    pub origins: Vec<(usize, usize)>,
}

/// Draws a random crop, target view and auxiliary count.
///
/// The crop is `scale * patch` pixels on a side in the high-resolution
/// views; its low-resolution counterpart is the bicubic downscale. With the
/// patch selector on, each view's crop is shifted by the item's disparity so
/// the stack is nearly aligned.
pub fn make_sample(
    item: &TrainItem,
    config: &TrainConfig,
    scale: usize,
    p: usize,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let hr = &item.hr;
    let (m, n) = hr.angular();
    let (h, w) = hr.spatial();
    let side = scale * config.patch;
    if h < side || w < side {
        return Err(Error::invalid(format!(
            "{h}x{w} light field is smaller than a {side}x{side} training crop"
        )));
    }
    let views = m * n;
    let (k_lo, k_hi) = config.k_range.unwrap_or((p, views));
    if k_lo < p.max(1) || k_hi > views || k_lo > k_hi {
        return Err(Error::invalid(format!("k range [{k_lo}, {k_hi}] invalid for p = {p} and {views} views")));
    }
    let top = rng.gen_range(0..=h - side);
    let left = rng.gen_range(0..=w - side);
    let target = hr.positions()[rng.gen_range(0..views)];
    let k = rng.gen_range(k_lo..=k_hi);

    let window = PatchWindow::new(top, left, side);
    let stack = IrregularLightField::from(hr);
    let crops = match (&item.disparity, config.patch_selector && config.stage == Stage::Coarse) {
        (Some(d), true) => crop_aligned_patches(&stack, d, window)?,
        (None, true) => return Err(Error::invalid("patch selector needs a disparity map")),
        (_, false) => crop_with_disparity(&stack, hr.center(), 0.0, window)?,
    };
    let lr_views = crops
        .patches
        .iter()
        .map(|v| bicubic_resize(v, &ResampleSpec::down(scale)))
        .collect::<Result<Vec<Image>>>()?;
    Ok(Sample {
        lr: LightField::from_views(m, n, &lr_views)?,
        hr: LightField::from_views(m, n, &crops.patches)?,
        target,
        k,
        origins: crops.origins,
    })
}

/// Coarse network plus the optional refinement network, with the number of
/// optimizer steps each has received.
#[derive(Clone, Debug)]
pub struct Model {
    pub coarse: CoarseSr,
    pub refine: Option<Refiner>,
    pub coarse_steps: u64,
    pub refine_steps: u64,
}

impl Model {
    pub fn new(coarse: CoarseConfig, refine: Option<RefineConfig>, seed: u64) -> Result<Self> {
        Ok(Model {
            coarse: CoarseSr::new(coarse, seed)?,
            refine: refine.map(|c| Refiner::new(c, seed.wrapping_add(1))).transpose()?,
            coarse_steps: 0,
            refine_steps: 0,
        })
    }

    pub fn scale(&self) -> usize {
        self.coarse.config().scale
    }

    /// CRC-32 over every parameter of both networks.
    pub fn digest(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        self.coarse.store().hash_into(&mut h);
        if let Some(r) = &self.refine {
            r.store().hash_into(&mut h);
        }
        h.finalize()
    }

    /// Coarse output for every view of a regular single-channel light field
    /// using all views as auxiliaries.
    pub fn coarse_lf(&self, lr: &LightField) -> Result<LightField> {
        let stack = IrregularLightField::from(lr);
        let out = self.coarse.super_resolve(&stack, stack.positions(), None)?;
        let (m, n) = lr.angular();
        LightField::from_views(m, n, &out)
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub stage: Stage,
    pub loss_l1: f32,
    /// EPI-gradient term; refinement only.
    pub loss_epi: Option<f32>,
    pub lr: f32,
}

/// CSV with header `step,stage,loss_l1,loss_epi,lr`; the EPI column is empty
/// for coarse steps.
pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,stage,loss_l1,loss_epi,lr\n");
    for r in records {
        let epi = r.loss_epi.map(|e| e.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.stage, r.loss_l1, epi, r.lr));
    }
    out
}

pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    write_atomic(path, loss_log_csv(records).as_bytes())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LossRecord>,
}

fn check_finite(loss: f32, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss became {loss} at step {step}")))
    }
}

/// Auxiliary rows for a coarse training step: the target plus `k - 1` others,
/// chosen by the selector when there is one and uniformly otherwise.
fn training_aux(
    model: &CoarseSr,
    positions: &[AngularPosition],
    views: &[&Image],
    target: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if model.selector().is_some() {
        return model.choose_aux(positions, views, target, k);
    }
    let others: Vec<usize> = (0..positions.len()).filter(|&i| i != target).collect();
    let mut aux: Vec<usize> = sample_indices(rng, others.len(), k - 1)
        .into_iter()
        .map(|i| others[i])
        .collect();
    aux.push(target);
    aux.sort_by_key(|&i| positions[i]);
    Ok(aux)
}

fn coarse_step(model: &mut CoarseSr, adam: &mut Adam, sample: &Sample, lr: f32, rng: &mut impl Rng) -> Result<f32> {
    let positions = sample.lr.positions();
    let views: Vec<Image> = positions.iter().map(|&p| sample.lr.get_sai(p)).collect::<Result<_>>()?;
    let refs: Vec<&Image> = views.iter().collect();
    let t = positions.iter().position(|&p| p == sample.target).expect("target from grid");
    let aux = training_aux(model, &positions, &refs, t, sample.k, rng)?;

    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape);
    let x = tape.constant(stack_images(&refs)?);
    let base = bicubic_resize(&views[t], &ResampleSpec::up(model.config().scale))?;
    let base = tape.constant(stack_images(&[&base])?);
    let hr = sample.hr.get_sai(sample.target)?;
    let hr = tape.constant(stack_images(&[&hr])?);
    let sr = model.forward_target(&mut tape, &bound, x, t, &aux, base)?;
    let loss = crate::coarse::coarse_loss(&mut tape, sr, hr)?;
    tape.backward(loss)?;
    let grads = model.store().grads(&tape, &bound);
    adam.step(model.store_mut().tensors_mut(), &grads, lr)?;
    tape.value(loss).item()
}

fn refine_step(
    refiner: &mut Refiner,
    coarse: &LightField,
    hr: &LightField,
    adam: &mut Adam,
    lr: f32,
) -> Result<(f32, f32)> {
    let (m, n) = coarse.angular();
    let mut tape = Tape::new();
    let bound = refiner.store().bind(&mut tape);
    let x = tape.constant(lf_tensor(coarse)?);
    let y = tape.constant(lf_tensor(hr)?);
    let out = refiner.forward(&mut tape, &bound, x, m, n)?;
    let losses = refine_loss(&mut tape, out, y, m, n, refiner.config().lambda_epi)?;
    tape.backward(losses.total)?;
    let grads = refiner.store().grads(&tape, &bound);
    adam.step(refiner.store_mut().tensors_mut(), &grads, lr)?;
    Ok((tape.value(losses.l1).item()?, tape.value(losses.epi).item()?))
}

/// Runs one training stage over `items` and returns the updated model with
/// its loss log.
///
/// The refinement stage needs a coarse network that has been trained and a
/// refinement network to train; the coarse weights stay frozen and are
/// verified unchanged afterwards.
pub fn train_stage(items: &[TrainItem], config: &TrainConfig, mut model: Model) -> Result<TrainOutcome> {
    let scale = model.scale();
    config.validate(scale)?;
    if items.is_empty() {
        return Err(Error::invalid("no training light fields"));
    }
    if config.stage == Stage::Refine {
        if model.coarse_steps == 0 {
            return Err(Error::invalid("refinement stage needs a trained coarse checkpoint"));
        }
        if model.refine.is_none() {
            return Err(Error::invalid("refinement stage needs a refinement network"));
        }
    }
    let prepared: Vec<TrainItem> = if config.patch_selector && config.stage == Stage::Coarse {
        items
            .iter()
            .cloned()
            .map(TrainItem::with_estimated_disparity)
            .collect::<Result<_>>()?
    } else {
        items.to_vec()
    };
    let p = model.coarse.config().p;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.beta1, config.beta2, config.eps);
    let frozen_digest = model.coarse.store().digest();
    let mut log = Vec::with_capacity(config.epochs * items.len());
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        for item in &prepared {
            let sample = make_sample(item, config, scale, p, &mut rng)?;
            let record = match config.stage {
                Stage::Coarse => {
                    let loss = coarse_step(&mut model.coarse, &mut adam, &sample, lr, &mut rng)?;
                    model.coarse_steps += 1;
                    check_finite(loss, model.coarse_steps)?;
                    LossRecord { step: model.coarse_steps, stage: Stage::Coarse, loss_l1: loss, loss_epi: None, lr }
                }
                Stage::Refine => {
                    let coarse = model.coarse_lf(&sample.lr)?;
                    let refiner = model.refine.as_mut().expect("checked above");
                    let (l1, epi) = refine_step(refiner, &coarse, &sample.hr, &mut adam, lr)?;
                    model.refine_steps += 1;
                    check_finite(l1 + epi, model.refine_steps)?;
                    LossRecord { step: model.refine_steps, stage: Stage::Refine, loss_l1: l1, loss_epi: Some(epi), lr }
                }
            };
            if record.step % 50 == 0 {
                log::info!("{} step {}: l1 {:.6} lr {:.2e}", record.stage, record.step, record.loss_l1, lr);
            }
            log.push(record);
        }
    }
    if config.stage == Stage::Refine && model.coarse.store().digest() != frozen_digest {
        return Err(Error::Numeric("coarse parameters changed during refinement".into()));
    }
    Ok(TrainOutcome { model, log })
}

/// Refined (or coarse, without a refinement network) reconstruction of a
/// regular single-channel light field.
pub fn reconstruct(model: &Model, lr: &LightField) -> Result<LightField> {
    let coarse = model.coarse_lf(lr)?;
    match &model.refine {
        Some(r) => r.refine(&coarse),
        None => Ok(coarse),
    }
}

// ---- checkpoints ---------------------------------------------------------

const MAGIC: &[u8; 5] = b"LFSR1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub coarse: CoarseConfig,
    pub refine: Option<RefineConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounts {
    pub coarse: u64,
    pub refine: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    config: ModelConfig,
    steps: StepCounts,
    digest: u32,
}

fn all_params(model: &Model) -> Vec<(&str, &Tensor)> {
    let mut out: Vec<(&str, &Tensor)> = model.coarse.store().iter().collect();
    if let Some(r) = &model.refine {
        out.extend(r.store().iter());
    }
    out
}

/// `LFSR1`, u32 header length, JSON header, f32 values in header order, then
/// the CRC-32 of everything before it; all integers little-endian.
pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let params = all_params(model);
    let header = Header {
        dtype: "f32".into(),
        names: params.iter().map(|(n, _)| n.to_string()).collect(),
        shapes: params.iter().map(|(_, t)| t.shape().to_vec()).collect(),
        config: ModelConfig {
            coarse: model.coarse.config().clone(),
            refine: model.refine.as_ref().map(|r| r.config().clone()),
        },
        steps: StepCounts { coarse: model.coarse_steps, refine: model.refine_steps },
        digest: model.digest(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;
    let values: usize = params.iter().map(|(_, t)| t.numel()).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 4 * values + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing LFSR1 magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(bad("checksum mismatch"));
    }
    let mut at = MAGIC.len();
    let len = u32::from_le_bytes(body[at..at + 4].try_into().expect("4 bytes")) as usize;
    at += 4;
    let json = body.get(at..at + len).ok_or_else(|| bad("truncated header"))?;
    at += len;
    let header: Header = serde_json::from_slice(json)?;
    if header.dtype != "f32" {
        return Err(bad(&format!("unsupported dtype {}", header.dtype)));
    }
    if header.names.len() != header.shapes.len() {
        return Err(bad("names and shapes differ in length"));
    }
    let mut tensors = Vec::with_capacity(header.names.len());
    for shape in &header.shapes {
        let count: usize = shape.iter().product();
        let raw = body.get(at..at + 4 * count).ok_or_else(|| bad("truncated values"))?;
        at += 4 * count;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    if at != body.len() {
        return Err(bad("trailing bytes after values"));
    }
    let mut model = Model::new(header.config.coarse.clone(), header.config.refine.clone(), 0)?;
    let entries: Vec<(&str, &Tensor)> = header.names.iter().map(String::as_str).zip(&tensors).collect();
    let (coarse_entries, refine_entries): (Vec<_>, Vec<_>) =
        entries.into_iter().partition(|(n, _)| n.starts_with("coarse."));
    model.coarse.store_mut().load_named(coarse_entries)?;
    match model.refine.as_mut() {
        Some(r) => r.store_mut().load_named(refine_entries)?,
        None if !refine_entries.is_empty() => return Err(bad("refinement weights without a refinement config")),
        None => {}
    }
    model.coarse_steps = header.steps.coarse;
    model.refine_steps = header.steps.refine;
    if model.digest() != header.digest {
        return Err(bad("parameter digest mismatch"));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lightfield::{render_constant_disparity, synthetic_texture};
    use crate::selectors::aligned_center;

    fn tiny_coarse(p: usize, selector: bool) -> CoarseConfig {
        CoarseConfig {
            channels: 4,
            n1: 1,
            n2: 1,
            n3: 1,
            n4: 1,
            p,
            scale: 2,
            selector,
            selector_channels: 2,
        }
    }

    fn scene(m: usize, size: usize, d: f32, seed: u64) -> LightField {
        let margin = (d.abs() * (m as f32 - 1.0) / 2.0).ceil() as usize;
        render_constant_disparity(&synthetic_texture(size + 2 * margin, size + 2 * margin, 0.15, seed), d, m, m).unwrap()
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate(0), 1e-4);
        assert_eq!(c.learning_rate(249), 1e-4);
        assert_eq!(c.learning_rate(250), 5e-5);
        assert_eq!(c.learning_rate(500), 2.5e-5);
        assert!(TrainConfig { lr0: 0.0, ..c.clone() }.validate(2).is_err());
        assert!(TrainConfig { patch: 63, ..c }.validate(2).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::full(vec![3], 0.7)];
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..10 {
            adam.step(&mut p, &[Tensor::zeros(vec![3])], 1e-2).unwrap();
        }
        assert!(p[0].data().iter().all(|&v| v == 0.7));
        assert!(adam.step(&mut p, &[Tensor::zeros(vec![2])], 1e-2).is_err());
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut prev = 1.0;
        for i in 0..200 {
            adam.step(&mut p, &[Tensor::scalar(0.3)], 1e-3).unwrap();
            let now = p[0].data()[0];
            if i > 100 {
                assert!(((prev - now) - 1e-3).abs() < 1e-5, "step {}", prev - now);
            }
            prev = now;
        }
    }

    #[test]
    fn adam_matches_reference_loop() {
        let grad = |x: f32| 2.0 * (x - 0.25) + 0.1 * x * x;
        let (b1, b2, eps, lr) = (0.9f32, 0.999f32, 1e-8f32, 1e-2f32);
        let (mut x, mut m, mut v) = (1.5f32, 0.0f32, 0.0f32);
        let mut p = vec![Tensor::scalar(1.5)];
        let mut adam = Adam::new(b1, b2, eps);
        for t in 1..=100 {
            let g = grad(x);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            let gp = grad(p[0].data()[0]);
            adam_step(&mut adam, &mut p, &[Tensor::scalar(gp)], lr).unwrap();
            assert!((p[0].data()[0] - x).abs() <= 1e-7, "step {t}");
        }
    }

    #[test]
    fn sample_shapes_and_determinism() {
        let item = TrainItem::new(scene(3, 40, 1.0, 1)).unwrap();
        let config = TrainConfig { patch: 16, ..TrainConfig::default() };
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let s1 = make_sample(&item, &config, 2, 4, &mut a).unwrap();
        let s2 = make_sample(&item, &config, 2, 4, &mut b).unwrap();
        assert_eq!(s1.lr.spatial(), (16, 16));
        assert_eq!(s1.hr.spatial(), (32, 32));
        assert_eq!(s1.lr, s2.lr);
        assert_eq!((s1.target, s1.k, &s1.origins), (s2.target, s2.k, &s2.origins));
        assert!((4..=9).contains(&s1.k));
        assert!(s1.origins.iter().all(|&o| o == s1.origins[0]));
        assert!(make_sample(&item, &TrainConfig { patch: 32, ..config }, 2, 4, &mut a).is_err());
    }

    #[test]
    fn aligned_samples_follow_disparity() {
        let lf = scene(3, 48, 2.0, 2);
        let (h, w) = lf.spatial();
        let item = TrainItem { disparity: Some(DisparityMap::constant(h, w, lf.center(), 2.0)), hr: lf };
        let config = TrainConfig { patch: 8, patch_selector: true, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let s = make_sample(&item, &config, 2, 1, &mut rng).unwrap();
            let c = item.hr.center();
            let ci = item.hr.positions().iter().position(|&p| p == c).unwrap();
            let (t0, l0) = s.origins[ci];
            let center = [(l0 + 8) as i64, (t0 + 8) as i64];
            for (pos, &(t, l)) in item.hr.positions().iter().zip(&s.origins) {
                let [x, y] = aligned_center(center, -2.0, c, *pos);
                let want_l = (x - 8).clamp(0, (w - 16) as i64) as usize;
                let want_t = (y - 8).clamp(0, (h - 16) as i64) as usize;
                assert_eq!((t, l), (want_t, want_l));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Model::new(tiny_coarse(2, true), Some(RefineConfig { channels: 2, layers: 2, lambda_epi: 1.0 }), 3)
            .unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.digest(), model.digest());

        let mut corrupt = bytes.clone();
        let mid = bytes.len() / 2;
        corrupt[mid] ^= 1;
        assert!(decode_checkpoint(&corrupt).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"nope").is_err());

        let coarse_only = Model::new(tiny_coarse(2, false), None, 4).unwrap();
        let b = encode_checkpoint(&coarse_only).unwrap();
        assert!(decode_checkpoint(&b).unwrap().refine.is_none());
    }

    #[test]
    fn loss_log_format() {
        let rows = vec![
            LossRecord { step: 1, stage: Stage::Coarse, loss_l1: 0.5, loss_epi: None, lr: 1e-4 },
            LossRecord { step: 1, stage: Stage::Refine, loss_l1: 0.25, loss_epi: Some(0.125), lr: 5e-5 },
        ];
        assert_eq!(
            loss_log_csv(&rows),
            "step,stage,loss_l1,loss_epi,lr\n1,coarse,0.5,,0.0001\n1,refine,0.25,0.125,0.00005\n"
        );
    }

    #[test]
    fn coarse_stage_reduces_loss_and_is_deterministic() {
        let item = TrainItem::new(scene(3, 16, 1.0, 7)).unwrap();
        let config = TrainConfig { patch: 8, epochs: 50, lr0: 1e-3, k_range: Some((9, 9)), seed: 1, ..TrainConfig::default() };
        let run = || train_stage(std::slice::from_ref(&item), &config, Model::new(tiny_coarse(4, false), None, 8).unwrap()).unwrap();
        let a = run();
        let b = run();
        let la: Vec<f32> = a.log.iter().map(|r| r.loss_l1).collect();
        let lb: Vec<f32> = b.log.iter().map(|r| r.loss_l1).collect();
        assert_eq!(la, lb);
        assert!(la[49] < la[0], "{} vs {}", la[49], la[0]);
        assert_eq!(a.model.coarse_steps, 50);
    }

    #[test]
    fn coarse_loss_strictly_decreases_on_one_sample() {
        let item = TrainItem::new(scene(3, 16, 1.0, 13)).unwrap();
        let config = TrainConfig { patch: 8, k_range: Some((9, 9)), ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sample = make_sample(&item, &config, 2, 4, &mut rng).unwrap();
        let mut model = CoarseSr::new(tiny_coarse(4, false), 15).unwrap();
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let losses: Vec<f32> = (0..51)
            .map(|_| coarse_step(&mut model, &mut adam, &sample, 1e-4, &mut rng).unwrap())
            .collect();
        for (i, w) in losses.windows(2).enumerate() {
            assert!(w[1] < w[0], "step {}: {} -> {}", i + 1, w[0], w[1]);
        }
    }

    #[test]
    fn refine_stage_freezes_coarse_weights() {
        let item = TrainItem::new(scene(3, 16, 1.0, 9)).unwrap();
        let coarse_cfg = TrainConfig { patch: 8, epochs: 3, ..TrainConfig::default() };
        let refine_cfg = TrainConfig { stage: Stage::Refine, ..coarse_cfg.clone() };
        let fresh = Model::new(tiny_coarse(4, true), Some(RefineConfig { channels: 2, layers: 2, lambda_epi: 1.0 }), 10)
            .unwrap();
        assert!(train_stage(std::slice::from_ref(&item), &refine_cfg, fresh.clone()).is_err());
        let trained = train_stage(std::slice::from_ref(&item), &coarse_cfg, fresh).unwrap().model;
        let before = trained.coarse.store().clone();
        let refined = train_stage(std::slice::from_ref(&item), &refine_cfg, trained).unwrap();
        assert_eq!(refined.model.coarse.store(), &before);
        assert_eq!(refined.model.refine_steps, 3);
        assert!(refined.log.iter().all(|r| r.loss_epi.is_some()));
    }

    #[test]
    fn refine_loss_decreases_on_toy_field() {
        // overfit one 3x3x16x16 instance with lr 1e-4 for 200 steps
        let hr = scene(3, 16, 1.0, 11);
        let lr_lf = hr
            .map_views(|_, v| bicubic_resize(v, &ResampleSpec::down(2)))
            .unwrap();
        let coarse = lr_lf
            .map_views(|_, v| bicubic_resize(v, &ResampleSpec::up(2)))
            .unwrap();
        let mut refiner = Refiner::new(RefineConfig { channels: 4, layers: 2, lambda_epi: 1.0 }, 12).unwrap();
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let (l1, _) = refine_step(&mut refiner, &coarse, &hr, &mut adam, 1e-4).unwrap();
            losses.push(l1);
        }
        let drops = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(losses[199] < losses[0] * 0.9, "{} -> {}", losses[0], losses[199]);
        assert!(drops >= 190, "{drops} of 199 steps decreased");
    }
}
