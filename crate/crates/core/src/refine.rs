//! Grid-wide refinement of a coarse light field.
//!
//! Features alternate between a spatial arrangement `[M*N, c, Y, X]` (one
//! image per view) and an angular arrangement `[Y*X, c, M, N]` (one angular
//! patch per pixel), with a 3x3 convolution in each. Every layer sees the
//! 1x1-projected concatenation of all earlier outputs, and the network
//! predicts a residual over its input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::lightfield::{Image, LightField};
use crate::lightfield::io::LfData;
use crate::nn::{Bound, Conv, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub channels: usize,
    /// Number of spatial-angular alternations.
    pub layers: usize,
    /// Weight of the EPI-gradient term in the training loss.
    pub lambda_epi: f32,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { channels: 64, layers: 10, lambda_epi: 1.0 }
    }
}

/// One spatial conv + relu, reshape, angular conv + relu, reshape back.
#[derive(Clone, Debug)]
pub struct SasLayer {
    /// 1x1 reduction of the dense concatenation; absent for the first layer.
    pub project: Option<Conv>,
    pub spatial: Conv,
    pub angular: Conv,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    config: RefineConfig,
    store: ParamStore,
    head: Conv,
    layers: Vec<SasLayer>,
    tail: Conv,
}

/// `[M*N, c, Y, X] -> [Y*X, c, M, N]`.
pub fn spatial_to_angular(tape: &mut Tape, x: Var, m: usize, n: usize) -> Result<Var> {
    let [views, c, y, w] = tape.shape(x)[..] else {
        return Err(Error::shape(format!("spatial stack must be rank 4, got {:?}", tape.shape(x))));
    };
    if views != m * n {
        return Err(Error::shape(format!("{views} views do not form a {m}x{n} grid")));
    }
    let r = tape.reshape(x, &[m, n, c, y, w])?;
    let r = tape.permute(r, &[3, 4, 2, 0, 1])?;
    tape.reshape(r, &[y * w, c, m, n])
}

/// `[Y*X, c, M, N] -> [M*N, c, Y, X]`.
pub fn angular_to_spatial(tape: &mut Tape, x: Var, height: usize, width: usize) -> Result<Var> {
    let [pixels, c, m, n] = tape.shape(x)[..] else {
        return Err(Error::shape(format!("angular stack must be rank 4, got {:?}", tape.shape(x))));
    };
    if pixels != height * width {
        return Err(Error::shape(format!("{pixels} pixels do not form a {height}x{width} image")));
    }
    let r = tape.reshape(x, &[height, width, c, m, n])?;
    let r = tape.permute(r, &[3, 4, 2, 0, 1])?;
    tape.reshape(r, &[m * n, c, height, width])
}

fn run_detached(t: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(t.clone());
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

/// Tensor form of [`spatial_to_angular`].
pub fn spatial_to_angular_tensor(t: &Tensor, m: usize, n: usize) -> Result<Tensor> {
    run_detached(t, |tape, x| spatial_to_angular(tape, x, m, n))
}

/// Tensor form of [`angular_to_spatial`].
pub fn angular_to_spatial_tensor(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    run_detached(t, |tape, x| angular_to_spatial(tape, x, height, width))
}

/// One alternation over a spatial stack of an `m x n` grid.
pub fn sas_layer(tape: &mut Tape, p: &Bound, layer: &SasLayer, x: Var, m: usize, n: usize) -> Result<Var> {
    let [_, _, h, w] = tape.shape(x)[..] else {
        return Err(Error::shape("sas layer expects a rank-4 spatial stack"));
    };
    let s = layer.spatial.forward(tape, p, x)?;
    let s = tape.relu(s);
    let a = spatial_to_angular(tape, s, m, n)?;
    let a = layer.angular.forward(tape, p, a)?;
    let a = tape.relu(a);
    angular_to_spatial(tape, a, h, w)
}

impl Refiner {
    /// Fresh network with a zero tail, so it starts as the identity.
    pub fn new(config: RefineConfig, seed: u64) -> Result<Self> {
        if config.channels == 0 {
            return Err(Error::invalid("refinement needs at least one channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let head = Conv::new(&mut store, "refine.head", 1, c, 3, &mut rng);
        let layers = (0..config.layers)
            .map(|i| SasLayer {
                project: (i > 0)
                    .then(|| Conv::new(&mut store, &format!("refine.l{i}.project"), (i + 1) * c, c, 1, &mut rng)),
                spatial: Conv::new(&mut store, &format!("refine.l{i}.spatial"), c, c, 3, &mut rng),
                angular: Conv::new(&mut store, &format!("refine.l{i}.angular"), c, c, 3, &mut rng),
            })
            .collect();
        let tail = Conv::zeroed(&mut store, "refine.tail", c, 1, 3);
        Ok(Refiner { config, store, head, layers, tail })
    }

    pub fn config(&self) -> &RefineConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layers(&self) -> &[SasLayer] {
        &self.layers
    }

    /// Outputs of the head and of every layer, in order.
    pub fn features(&self, tape: &mut Tape, p: &Bound, coarse: Var, m: usize, n: usize) -> Result<Vec<Var>> {
        let h0 = self.head.forward(tape, p, coarse)?;
        let mut outs = vec![h0];
        for layer in &self.layers {
            let input = match &layer.project {
                None => h0,
                Some(proj) => {
                    let cat = tape.concat(&outs, 1)?;
                    proj.forward(tape, p, cat)?
                }
            };
            outs.push(sas_layer(tape, p, layer, input, m, n)?);
        }
        Ok(outs)
    }

    /// `[M*N, 1, Y, X]` coarse views -> refined views of the same shape.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, coarse: Var, m: usize, n: usize) -> Result<Var> {
        let outs = self.features(tape, p, coarse, m, n)?;
        let last = *outs.last().expect("head output");
        let residual = self.tail.forward(tape, p, last)?;
        tape.add(residual, coarse)
    }

    /// Refines a regular single-channel light field with frozen weights.
    pub fn refine(&self, coarse: &LightField) -> Result<LightField> {
        if coarse.channels() != 1 {
            return Err(Error::invalid("refinement works on single-channel light fields"));
        }
        let (m, n) = coarse.angular();
        let (h, w) = coarse.spatial();
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(lf_tensor(coarse)?);
        let y = self.forward(&mut tape, &p, x, m, n)?;
        tensor_lf(tape.value(y), m, n, h, w)
    }

    /// [`Refiner::refine`] for on-disk data; irregular view sets have no
    /// angular grid to convolve over and are rejected.
    pub fn refine_data(&self, coarse: &LfData) -> Result<LightField> {
        match coarse {
            LfData::Regular(lf) => self.refine(lf),
            LfData::Irregular(_) => Err(Error::invalid(
                "refinement needs a full angular grid; irregular view sets are coarse-only",
            )),
        }
    }
}

/// Single-channel light field as a `[M*N, 1, Y, X]` tensor.
pub fn lf_tensor(lf: &LightField) -> Result<Tensor> {
    let (m, n) = lf.angular();
    let (h, w) = lf.spatial();
    if lf.channels() != 1 {
        return Err(Error::invalid("expected a single-channel light field"));
    }
    Tensor::new(vec![m * n, 1, h, w], lf.data().to_vec())
}

/// Inverse of [`lf_tensor`]; samples are clamped to `[0, 1]`.
pub fn tensor_lf(t: &Tensor, m: usize, n: usize, h: usize, w: usize) -> Result<LightField> {
    if t.shape() != [m * n, 1, h, w] {
        return Err(Error::shape(format!("tensor {:?} is not a {m}x{n} grid of {h}x{w} views", t.shape())));
    }
    let views: Vec<Image> = t
        .data()
        .chunks(h * w)
        .map(|c| Image::new(h, w, 1, c.to_vec()))
        .collect::<Result<_>>()?;
    LightField::from_views(m, n, &views)
}

/// EPI-gradient loss between two `[M*N, 1, Y, X]` stacks: the sum of mean
/// absolute differences of forward differences along `x` and `u`
/// (horizontal EPIs) and along `y` and `v` (vertical EPIs).
pub fn epi_gradient_loss(tape: &mut Tape, a: Var, b: Var, m: usize, n: usize) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!("epi loss: {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    let [views, 1, h, w] = tape.shape(a)[..] else {
        return Err(Error::shape(format!("epi loss expects [M*N, 1, Y, X], got {:?}", tape.shape(a))));
    };
    if views != m * n || m < 2 || n < 2 || h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "epi loss needs a grid of at least 2x2 views of at least 2x2 pixels, got {m}x{n} of {h}x{w}"
        )));
    }
    let a4 = tape.reshape(a, &[m, n, h, w])?;
    let b4 = tape.reshape(b, &[m, n, h, w])?;
    // axes: 3 = x, 0 = u (horizontal EPIs); 2 = y, 1 = v (vertical EPIs)
    let mut total: Option<Var> = None;
    for axis in [3, 0, 2, 1] {
        let da = tape.diff(a4, axis)?;
        let db = tape.diff(b4, axis)?;
        let term = tape.l1(da, db)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("four terms"))
}

/// Scalar losses of one refinement step.
#[derive(Clone, Copy, Debug)]
pub struct RefineLoss {
    pub total: Var,
    pub l1: Var,
    pub epi: Var,
}

/// `l1(refined, hr) + lambda_epi * epi_gradient_loss(refined, hr)`.
pub fn refine_loss(tape: &mut Tape, refined: Var, hr: Var, m: usize, n: usize, lambda_epi: f32) -> Result<RefineLoss> {
    let l1 = tape.l1(refined, hr)?;
    let epi = epi_gradient_loss(tape, refined, hr, m, n)?;
    let weighted = tape.scale(epi, lambda_epi);
    let total = tape.add(l1, weighted)?;
    Ok(RefineLoss { total, l1, epi })
}

/// EPI-gradient loss between two single-channel light fields.
pub fn epi_gradient_loss_lf(a: &LightField, b: &LightField) -> Result<f32> {
    if a.angular() != b.angular() || a.spatial() != b.spatial() {
        return Err(Error::shape("light fields differ in shape"));
    }
    let (m, n) = a.angular();
    let mut tape = Tape::new();
    let x = tape.constant(lf_tensor(a)?);
    let y = tape.constant(lf_tensor(b)?);
    let l = epi_gradient_loss(&mut tape, x, y, m, n)?;
    tape.value(l).item()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, random_tensor};
    use crate::lightfield::{extract_epi, render_constant_disparity, synthetic_texture, EpiOrientation};

    fn tiny(layers: usize) -> RefineConfig {
        RefineConfig { channels: 2, layers, lambda_epi: 1.0 }
    }

    fn randomize(r: &mut Refiner, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in r.store_mut().tensors_mut() {
            let shape = t.shape().to_vec();
            let fan_in = if shape.len() == 4 { shape[1..].iter().product() } else { 1 };
            *t = crate::nn::uniform_init(&shape, fan_in, &mut rng);
        }
    }

    fn toy_lf(m: usize, size: usize, seed: u64) -> LightField {
        render_constant_disparity(&synthetic_texture(size + 2 * m, size + 2 * m, 0.3, seed), 1.0, m, m)
            .unwrap()
            .crop(0, 0, size, size)
            .unwrap()
    }

    #[test]
    fn reshape_pair_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (m, n, c, h, w) in [(3, 2, 4, 5, 6), (1, 1, 2, 3, 3), (2, 2, 1, 4, 4)] {
            let t = random_tensor(&[m * n, c, h, w], &mut rng);
            let a = spatial_to_angular_tensor(&t, m, n).unwrap();
            assert_eq!(a.shape(), &[h * w, c, m, n]);
            assert_eq!(a.numel(), t.numel());
            assert_eq!(angular_to_spatial_tensor(&a, h, w).unwrap(), t);
            // element (view, ch, y, x) lands at (pixel, ch, u, v)
            let (u, v, ch, y, x) = (m - 1, n - 1, c - 1, h / 2, w - 1);
            let src = (((u * n + v) * c + ch) * h + y) * w + x;
            let dst = (((y * w + x) * c + ch) * m + u) * n + v;
            assert_eq!(t.data()[src], a.data()[dst]);
        }
    }

    #[test]
    fn sas_layer_shapes_and_zero_weights() {
        let mut r = Refiner::new(tiny(1), 1).unwrap();
        randomize(&mut r, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&[6, 2, 5, 4], &mut rng);
        let mut tape = Tape::new();
        let p = r.store().bind_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let y = sas_layer(&mut tape, &p, &r.layers()[0], x, 2, 3).unwrap();
        assert_eq!(tape.shape(y), &[6, 2, 5, 4]);

        r.store_mut().zero_all();
        let mut tape = Tape::new();
        let p = r.store().bind_frozen(&mut tape);
        let x = tape.constant(input);
        let y = sas_layer(&mut tape, &p, &r.layers()[0], x, 2, 3).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sas_layer_gradients() {
        let mut r = Refiner::new(tiny(1), 4).unwrap();
        randomize(&mut r, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut inputs = vec![random_tensor(&[4, 2, 8, 8], &mut rng)];
        let layer = r.layers()[0].clone();
        let names: Vec<String> = r.store().names().to_vec();
        let idx: Vec<usize> = names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("refine.l0"))
            .map(|(i, _)| i)
            .collect();
        inputs.extend(idx.iter().map(|&i| r.store().tensors()[i].clone()));
        let rep = check_gradients(&inputs[1..], 1e-3, 7, |tape, v| {
            let mut vars = Vec::new();
            for (i, t) in r.store().tensors().iter().enumerate() {
                match idx.iter().position(|&j| j == i) {
                    Some(k) => vars.push(v[k]),
                    None => vars.push(tape.constant(t.clone())),
                }
            }
            let p = Bound::from_vars(vars);
            let x = tape.constant(inputs[0].clone());
            sas_layer(tape, &p, &layer, x, 2, 2)
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");

        // input gradient through one alternation on a 2x2x1x8x8 toy field
        let toy = vec![random_tensor(&[4, 1, 8, 8], &mut rng)];
        let mut single = Refiner::new(RefineConfig { channels: 1, layers: 1, lambda_epi: 1.0 }, 8).unwrap();
        randomize(&mut single, 9);
        let rep = check_gradients(&toy, 1e-3, 10, |tape, v| {
            let p = single.store().bind_frozen(tape);
            sas_layer(tape, &p, &single.layers()[0], v[0], 2, 2)
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }

    #[test]
    fn zero_weights_are_identity() {
        let mut r = Refiner::new(tiny(3), 11).unwrap();
        randomize(&mut r, 12);
        r.store_mut().zero_all();
        let lf = toy_lf(3, 6, 13);
        assert_eq!(r.refine(&lf).unwrap(), lf);
        // an untrained model is the identity too, thanks to the zero tail
        let fresh = Refiner::new(tiny(3), 14).unwrap();
        assert_eq!(fresh.refine(&lf).unwrap(), lf);
    }

    #[test]
    fn irregular_input_is_rejected() {
        let r = Refiner::new(tiny(1), 15).unwrap();
        let lf = toy_lf(3, 4, 16);
        let irr = crate::lightfield::make_irregular(&lf, &lf.positions()[..4]).unwrap();
        assert!(r.refine_data(&LfData::Irregular(irr)).is_err());
        assert_eq!(r.refine_data(&LfData::Regular(lf.clone())).unwrap(), lf);
    }

    #[test]
    fn dense_connections_reach_later_layers() {
        let mut r = Refiner::new(tiny(3), 17).unwrap();
        randomize(&mut r, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let input = random_tensor(&[4, 1, 6, 6], &mut rng);
        let last_layer = |r: &Refiner| {
            let mut tape = Tape::new();
            let p = r.store().bind_frozen(&mut tape);
            let x = tape.constant(input.clone());
            let outs = r.features(&mut tape, &p, x, 2, 2).unwrap();
            tape.value(outs[3]).clone()
        };
        let base = last_layer(&r);
        for prefix in ["refine.head", "refine.l0.spatial", "refine.l1.angular"] {
            let mut changed = r.clone();
            let i = changed.store().names().iter().position(|n| n.starts_with(prefix)).unwrap();
            changed.store_mut().tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v += 0.05);
            assert!(last_layer(&changed).max_abs_diff(&base) > 0.0, "{prefix}");
        }
    }

    /// Direct loop over every horizontal and vertical EPI.
    fn epi_loss_oracle(a: &LightField, b: &LightField) -> f64 {
        let (m, n) = a.angular();
        let (h, w) = a.spatial();
        let mut sums = [0.0f64; 4];
        let mut counts = [0usize; 4];
        for (orient, fixed_s, fixed_a) in [(EpiOrientation::Horizontal, h, n), (EpiOrientation::Vertical, w, m)] {
            for s in 0..fixed_s {
                for t in 0..fixed_a {
                    let ea = extract_epi(a, orient, s, t).unwrap().image;
                    let eb = extract_epi(b, orient, s, t).unwrap().image;
                    let (rows, cols) = (ea.height(), ea.width());
                    let base = if orient == EpiOrientation::Horizontal { 0 } else { 2 };
                    for r in 0..rows {
                        for c in 0..cols {
                            if c + 1 < cols {
                                let ga = ea.get(0, r, c + 1) as f64 - ea.get(0, r, c) as f64;
                                let gb = eb.get(0, r, c + 1) as f64 - eb.get(0, r, c) as f64;
                                sums[base] += (ga - gb).abs();
                                counts[base] += 1;
                            }
                            if r + 1 < rows {
                                let ga = ea.get(0, r + 1, c) as f64 - ea.get(0, r, c) as f64;
                                let gb = eb.get(0, r + 1, c) as f64 - eb.get(0, r, c) as f64;
                                sums[base + 1] += (ga - gb).abs();
                                counts[base + 1] += 1;
                            }
                        }
                    }
                }
            }
        }
        (0..4).map(|i| sums[i] / counts[i] as f64).sum()
    }

    #[test]
    fn epi_loss_matches_oracle() {
        for seed in 0..5 {
            let a = toy_lf(2, 4, seed);
            let b = toy_lf(2, 4, seed + 100);
            let got = epi_gradient_loss_lf(&a, &b).unwrap() as f64;
            assert!((got - epi_loss_oracle(&a, &b)).abs() < 1e-6);
        }
        let a = toy_lf(3, 5, 7);
        assert_eq!(epi_gradient_loss_lf(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v * 0.5 + 0.25);
        let offset = shifted.map(|v| v + 0.125);
        assert!(epi_gradient_loss_lf(&shifted, &offset).unwrap() < 1e-6);
    }

    #[test]
    fn epi_loss_rejects_small_grids() {
        let lf = LightField::constant(1, 3, 4, 4, 1, 0.5).unwrap();
        assert!(epi_gradient_loss_lf(&lf, &lf).is_err());
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let inputs = vec![random_tensor(&[4, 1, 4, 4], &mut rng), random_tensor(&[4, 1, 4, 4], &mut rng)];
        let rep = check_gradients(&inputs, 1e-3, 21, |tape, v| epi_gradient_loss(tape, v[0], v[1], 2, 2)).unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
        let rep = check_gradients(&inputs, 1e-3, 22, |tape, v| {
            Ok(refine_loss(tape, v[0], v[1], 2, 2, 1.0)?.total)
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }

    #[test]
    fn refine_loss_examples() {
        let a = toy_lf(2, 4, 23);
        let b = toy_lf(2, 4, 24);
        let mut tape = Tape::new();
        let x = tape.constant(lf_tensor(&a).unwrap());
        let y = tape.constant(lf_tensor(&b).unwrap());
        let same = refine_loss(&mut tape, x, x, 2, 2, 1.0).unwrap();
        assert_eq!(tape.value(same.total).item().unwrap(), 0.0);
        let plain = refine_loss(&mut tape, x, y, 2, 2, 0.0).unwrap();
        let l1 = tape.l1(x, y).unwrap();
        assert_eq!(tape.value(plain.total).item().unwrap(), tape.value(l1).item().unwrap());
    }
}
