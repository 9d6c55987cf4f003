//! Parameter storage and the small layer vocabulary shared by the networks.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every tensor in a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles that line up one-to-one with a store's tensors.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Registers every tensor as a constant (inference or frozen use).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Gradients for every tensor after `tape.backward`.
    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        bound.0.iter().map(|&v| tape.grad(v)).collect()
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }

    /// Overwrites values from `(name, tensor)` pairs; every name must exist
    /// with a matching shape, and every parameter must be provided.
    pub fn load_named<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, tensor) in entries {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name}")))?;
            if self.tensors[idx].shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    self.tensors[idx].shape(),
                    tensor.shape()
                )));
            }
            self.tensors[idx] = tensor.clone();
            seen[idx] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("missing parameter {}", self.names[i])));
        }
        Ok(())
    }

    /// CRC-32 over names, shapes and little-endian values.
    pub fn digest(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        self.hash_into(&mut h);
        h.finalize()
    }

    /// Feeds names, shapes and values into a running CRC-32.
    pub fn hash_into(&self, h: &mut crc32fast::Hasher) {
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update(&(s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
    }
}

/// Uniform `[-s, s]` with `s = sqrt(1 / fan_in)`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let s = (1.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-s..=s))
}

/// Square convolution with zero padding that preserves spatial size.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(&[c_out, c_in, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Conv { weight, bias, c_in, c_out, kernel }
    }

    /// Same layer with all-zero weights.
    pub fn zeroed(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::zeros(vec![c_out, c_in, kernel, kernel]),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Conv { weight, bias, c_in, c_out, kernel }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.get(self.weight), p.get(self.bias))
    }
}

/// Pre-activation residual block with a single convolution:
/// `y = x + conv(relu(x))`.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            conv: Conv::new(store, &format!("{name}.conv"), channels, channels, 3, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let a = tape.relu(x);
        let y = self.conv.forward(tape, p, a)?;
        tape.add(x, y)
    }
}

pub(crate) fn res_stack(
    store: &mut ParamStore,
    name: &str,
    count: usize,
    channels: usize,
    rng: &mut impl Rng,
) -> Vec<ResBlock> {
    (0..count)
        .map(|i| ResBlock::new(store, &format!("{name}.{i}"), channels, rng))
        .collect()
}

pub(crate) fn run_stack(blocks: &[ResBlock], tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, p, x)?;
    }
    Ok(x)
}
