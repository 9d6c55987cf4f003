use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, f32),
    /// `x[k, ...] * g[k]`
    MulRows { x: Var, gate: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    /// `map[i]` is the source index of output element `i`.
    Gather { x: Var, map: Vec<usize> },
    MaxPool { x: Var, argmax: Vec<usize> },
    MeanLast2 { x: Var, area: usize },
    Diff { x: Var, axis: usize },
    L1 { a: Var, b: Var },
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, weights: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward pass and replays it in reverse.
///
/// Nodes are appended in creation order, so every op's inputs precede it and
/// a single reverse sweep visits each node after all of its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize) -> &mut [f32] {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite() || !self.inputs_finite(&op), "non-finite forward value");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        let check = |v: &Var| self.nodes[v.0].value.is_finite();
        match op {
            Op::Leaf => false,
            Op::Conv2d { input, weight, bias, .. } => check(input) && check(weight) && check(bias),
            Op::Relu(x) | Op::Sigmoid(x) | Op::Scale(x, _) | Op::Reshape(x) | Op::Sum(x) | Op::Mean(x) => {
                check(x)
            }
            Op::Add(a, b) | Op::L1 { a, b } => check(a) && check(b),
            Op::MulRows { x, gate } => check(x) && check(gate),
            Op::Concat { parts, .. } => parts.iter().all(check),
            Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::MaxPool { x, .. }
            | Op::MeanLast2 { x, .. }
            | Op::Diff { x, .. }
            | Op::WeightedSum { x, .. } => check(x),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`; zeros when no gradient reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient shape mirrors value"),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.consumed = false;
    }

    /// Fingerprint of every branch taken by the piecewise-linear ops (relu
    /// masks, max-pool winners, l1 signs). Two forward passes with equal
    /// signatures lie on the same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::L1 { a, b } => {
                    for (p, q) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        p.partial_cmp(q).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    // ---- ops -------------------------------------------------------------

    /// 2D convolution with an odd square kernel and zero padding `k/2`.
    ///
    /// `input` is `[B, C_in, H, W]` or `[C_in, H, W]`; the output keeps the
    /// same rank with `C_out` channels and unchanged spatial extents.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let (batch, c_in, height, width) = match ishape.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => return Err(Error::shape(format!("conv2d input must be rank 3 or 4, got {ishape:?}"))),
        };
        let [c_out, w_in, kh, kw] = wshape[..] else {
            return Err(Error::shape(format!("conv2d weight must be rank 4, got {wshape:?}")));
        };
        if w_in != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels, weight expects {w_in}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel must be odd and square, got {kh}x{kw}")));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape(format!(
                "conv2d bias must be [{c_out}], got {:?}",
                self.shape(bias)
            )));
        }
        let geom = ConvGeom { batch, c_in, c_out, height, width, kernel: kh };
        let out = kernels::conv2d_forward(
            geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let shape = if ishape.len() == 3 {
            vec![c_out, height, width]
        } else {
            vec![batch, c_out, height, width]
        };
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Multiplies every slice `x[i, ...]` by the scalar `gate[i]`.
    pub fn mul_rows(&mut self, x: Var, gate: Var) -> Result<Var> {
        let rows = self.shape(x)[0];
        if self.value(gate).numel() != rows {
            return Err(Error::shape(format!(
                "mul_rows: {rows} rows but gate has {} entries",
                self.value(gate).numel()
            )));
        }
        let per = self.value(x).numel() / rows;
        let g = self.value(gate).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(per)
            .zip(&g)
            .flat_map(|(row, &s)| row.iter().map(move |a| a * s))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(out, Op::MulRows { x, gate }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat: ragged parts {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis)?;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let chunk = ext * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, ext, inner) = kernels::split_axis(&shape, axis)?;
        if len == 0 || start + len > ext {
            return Err(Error::shape(format!(
                "slice [{start}, {}) out of range for extent {ext}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * ext + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (map, shape) = kernels::permute_map(self.shape(x), perm)?;
        self.gather_map(x, map, shape)
    }

    /// Selects slices along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let per: usize = shape[1..].iter().product();
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        let mut map = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape(format!("gather_rows: row {i} of {rows}")));
            }
            map.extend(i * per..(i + 1) * per);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        self.gather_map(x, map, out_shape)
    }

    /// `[B, C*r*r, H, W] -> [B, C, rH, rW]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (map, shape) = kernels::pixel_shuffle_map(self.shape(x), r)?;
        self.gather_map(x, map, shape)
    }

    fn gather_map(&mut self, x: Var, map: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather { x, map }, rg))
    }

    /// Max-pools the slices along `axis` into `groups` windows
    /// (see [`super::pool_windows`]). Ties route to the lowest index.
    pub fn max_over_axis(&mut self, x: Var, axis: usize, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, k, inner) = kernels::split_axis(&shape, axis)?;
        let windows = kernels::pool_windows(k, groups)?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * groups * inner);
        let mut argmax = Vec::with_capacity(outer * groups * inner);
        for o in 0..outer {
            for &(s, e) in &windows {
                for i in 0..inner {
                    let mut best = (o * k + s) * inner + i;
                    for j in s + 1..e {
                        let idx = (o * k + j) * inner + i;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = groups;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Mean over the last two axes: `[..., C, H, W] -> [..., C]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::shape(format!("adaptive_avg_pool needs rank >= 3, got {shape:?}")));
        }
        let area = shape[shape.len() - 2] * shape[shape.len() - 1];
        let data = self
            .value(x)
            .data()
            .chunks(area)
            .map(|c| c.iter().sum::<f32>() / area as f32)
            .collect();
        let out = Tensor::new(shape[..shape.len() - 2].to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanLast2 { x, area }, rg))
    }

    /// Forward difference `x[i+1] - x[i]` along `axis`.
    pub fn diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, ext, inner) = kernels::split_axis(&shape, axis)?;
        if ext < 2 {
            return Err(Error::shape(format!("diff along axis {axis} of extent {ext}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (ext - 1) * inner);
        for o in 0..outer {
            for j in 0..ext - 1 {
                let a = &src[(o * ext + j) * inner..][..inner];
                let b = &src[(o * ext + j + 1) * inner..][..inner];
                data.extend(a.iter().zip(b).map(|(p, q)| q - p));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = ext - 1;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Diff { x, axis }, rg))
    }

    /// Mean absolute difference; the subgradient at a tie is 0.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "l1: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let sum: f32 = va.iter().zip(vb).map(|(x, y)| (x - y).abs()).sum();
        let out = Tensor::scalar(sum / va.len() as f32);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::L1 { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f32>() / v.numel() as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `sum(x * weights)` with fixed weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::shape("weighted_sum: weight count mismatch"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, w)| a * w)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.to_vec() }, rg))
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Accumulates `d loss / d node` into every node that requires gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else { continue };
            backprop(before, node, g);
        }
        Ok(())
    }
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f32]) {
    macro_rules! slot {
        ($v:expr) => {{
            let n = &mut nodes[$v.0];
            let len = n.value.numel();
            accumulate(&mut n.grad, len)
        }};
    }
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { input, weight, bias, geom } => {
            if nodes[input.0].requires_grad {
                let gi = kernels::conv2d_backward_input(*geom, g, nodes[weight.0].value.data());
                add_into(slot!(input), &gi);
            }
            if nodes[weight.0].requires_grad || nodes[bias.0].requires_grad {
                let (gw, gb) = kernels::conv2d_backward_params(*geom, g, nodes[input.0].value.data());
                if nodes[weight.0].requires_grad {
                    add_into(slot!(weight), &gw);
                }
                if nodes[bias.0].requires_grad {
                    add_into(slot!(bias), &gb);
                }
            }
        }
        Op::Relu(x) => {
            if nodes[x.0].requires_grad {
                let mask: Vec<f32> = nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&a, &gi)| if a > 0.0 { gi } else { 0.0 })
                    .collect();
                add_into(slot!(x), &mask);
            }
        }
        Op::Sigmoid(x) => {
            if nodes[x.0].requires_grad {
                let d: Vec<f32> = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gi)| gi * s * (1.0 - s))
                    .collect();
                add_into(slot!(x), &d);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if nodes[v.0].requires_grad {
                    add_into(slot!(v), g);
                }
            }
        }
        Op::Scale(x, f) => {
            if nodes[x.0].requires_grad {
                let f = *f;
                for (d, gi) in slot!(x).iter_mut().zip(g) {
                    *d += f * gi;
                }
            }
        }
        Op::MulRows { x, gate } => {
            let rows = nodes[gate.0].value.numel();
            let per = g.len() / rows;
            if nodes[x.0].requires_grad {
                let gate_v = nodes[gate.0].value.data().to_vec();
                let dst = slot!(x);
                for (r, s) in gate_v.iter().enumerate() {
                    for (d, gi) in dst[r * per..][..per].iter_mut().zip(&g[r * per..][..per]) {
                        *d += s * gi;
                    }
                }
            }
            if nodes[gate.0].requires_grad {
                let xv = nodes[x.0].value.data();
                let dg: Vec<f32> = (0..rows)
                    .map(|r| {
                        xv[r * per..][..per]
                            .iter()
                            .zip(&g[r * per..][..per])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                add_into(slot!(gate), &dg);
            }
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let chunk = nodes[p.0].value.shape()[*axis] * inner;
                if nodes[p.0].requires_grad {
                    let dst = slot!(p);
                    for o in 0..outer {
                        add_into(&mut dst[o * chunk..][..chunk], &g[o * total + offset..][..chunk]);
                    }
                }
                offset += chunk;
            }
        }
        Op::Slice { x, axis, start } => {
            if nodes[x.0].requires_grad {
                let in_shape = nodes[x.0].value.shape().to_vec();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let ext = in_shape[*axis];
                let len = node.value.shape()[*axis];
                let dst = slot!(x);
                for (o, gchunk) in g.chunks(len * inner).enumerate() {
                    add_into(&mut dst[(o * ext + start) * inner..][..len * inner], gchunk);
                }
            }
        }
        Op::Reshape(x) => {
            if nodes[x.0].requires_grad {
                add_into(slot!(x), g);
            }
        }
        Op::Gather { x, map } => {
            if nodes[x.0].requires_grad {
                let dst = slot!(x);
                for (&src, gi) in map.iter().zip(g) {
                    dst[src] += gi;
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if nodes[x.0].requires_grad {
                let dst = slot!(x);
                for (&src, gi) in argmax.iter().zip(g) {
                    dst[src] += gi;
                }
            }
        }
        Op::MeanLast2 { x, area } => {
            if nodes[x.0].requires_grad {
                let inv = 1.0 / *area as f32;
                let dst = slot!(x);
                for (chunk, gi) in dst.chunks_mut(*area).zip(g) {
                    for d in chunk {
                        *d += gi * inv;
                    }
                }
            }
        }
        Op::Diff { x, axis } => {
            if nodes[x.0].requires_grad {
                let in_shape = nodes[x.0].value.shape().to_vec();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let ext = in_shape[*axis];
                let dst = slot!(x);
                for (o, gblock) in g.chunks((ext - 1) * inner).enumerate() {
                    for j in 0..ext - 1 {
                        let gj = &gblock[j * inner..][..inner];
                        let base = (o * ext + j) * inner;
                        for (i, gi) in gj.iter().enumerate() {
                            dst[base + i] -= gi;
                            dst[base + inner + i] += gi;
                        }
                    }
                }
            }
        }
        Op::L1 { a, b } => {
            let n = nodes[a.0].value.numel() as f32;
            let scale = g[0] / n;
            let sign: Vec<f32> = nodes[a.0]
                .value
                .data()
                .iter()
                .zip(nodes[b.0].value.data())
                .map(|(x, y)| {
                    let d = x - y;
                    if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                })
                .collect();
            if nodes[a.0].requires_grad {
                add_into(slot!(a), &sign);
            }
            if nodes[b.0].requires_grad {
                for (d, s) in slot!(b).iter_mut().zip(&sign) {
                    *d -= s;
                }
            }
        }
        Op::Sum(x) => {
            if nodes[x.0].requires_grad {
                for d in slot!(x).iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(x) => {
            if nodes[x.0].requires_grad {
                let s = g[0] / nodes[x.0].value.numel() as f32;
                for d in slot!(x).iter_mut() {
                    *d += s;
                }
            }
        }
        Op::WeightedSum { x, weights } => {
            if nodes[x.0].requires_grad {
                for (d, w) in slot!(x).iter_mut().zip(weights) {
                    *d += g[0] * w;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
