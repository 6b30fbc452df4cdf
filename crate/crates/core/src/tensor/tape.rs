use super::kernels::{col2im, im2col, mm_nn, mm_nt, mm_tn, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitive set. Attributes that are not
/// differentiated (labels, targets, strides) live on the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `a + b`, identical shapes.
    Add,
    /// `a ⊙ b`, identical shapes.
    Mul,
    /// `x[c, ..] * w[c]` for `x` of shape `C×…` and `w` of length `C`.
    ChannelMul,
    /// `x + b` where `b` has length `x.shape[axis]`, broadcast over every
    /// other axis.
    BiasAdd {
        axis: usize,
    },
    /// 2-D matrix product.
    MatMul,
    /// Square-kernel convolution of a single `C×H×W` image by an
    /// `O×C×k×k` weight with optional length-`O` bias, via im2col.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    Relu,
    Sigmoid,
    Softmax {
        axis: usize,
    },
    /// Mean over every axis but the first: `C×…` to `C`.
    GlobalAvgPool,
    /// Rectangular sub-block `start[i]..start[i]+len[i]` on every axis.
    Crop {
        start: Vec<usize>,
        len: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    Sum,
    Mean,
    /// `scale * x + shift`.
    Affine {
        scale: f64,
        shift: f64,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// 2-D transpose.
    Transpose,
    /// Mean softmax cross-entropy of `K×C` logits against class labels.
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
    /// `Σ wᵢ · bce(σ(zᵢ), tᵢ)` over all elements of the logits.
    BceWithLogits {
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    /// `Σ wᵢ · smoothL1_β(xᵢ − tᵢ)` over all elements.
    SmoothL1 {
        targets: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
    },
    /// Pairwise margin ranking loss over foreground probabilities `s` with
    /// binary labels; the per-proposal and pairwise sums are multiplied by
    /// `unary_scale` and `pair_scale` (both 1 for the plain sum).
    MarginRanking {
        labels: Vec<u8>,
        m_plus: f64,
        m_minus: f64,
        unary_scale: f64,
        pair_scale: f64,
    },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::ChannelMul => "channel_mul",
            Primitive::BiasAdd { .. } => "bias_add",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax { .. } => "softmax",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Crop { .. } => "crop",
            Primitive::Concat { .. } => "concat",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Affine { .. } => "affine",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Primitive::BceWithLogits { .. } => "bce_with_logits",
            Primitive::SmoothL1 { .. } => "smooth_l1",
            Primitive::MarginRanking { .. } => "margin_ranking",
        }
    }
}

struct Node {
    value: Tensor,
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    /// Intermediates kept for backward (im2col columns, softmax probabilities).
    saved: Vec<f64>,
    requires_grad: bool,
}

/// A single-threaded recording of primitive applications in topological
/// order. Values are never mutated once recorded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_same(prim: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{prim}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Visits every multi-index of a crop region and yields (src offset,
/// dst offset, run length) for contiguous runs along the last axis.
fn crop_runs(
    shape: &[usize],
    start: &[usize],
    len: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 1);
        return;
    }
    let run = len[rank - 1];
    let outer: usize = len[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut off = 0;
        for a in 0..rank - 1 {
            off = off * shape[a] + start[a] + idx[a];
        }
        off = off * shape[rank - 1] + start[rank - 1];
        f(off, o * run, run);
        for a in (0..rank - 1).rev() {
            idx[a] += 1;
            if idx[a] < len[a] {
                break;
            }
            idx[a] = 0;
        }
    }
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

    fn push(
        &mut self,
        value: Tensor,
        prim: Option<Primitive>,
        inputs: Vec<Var>,
        saved: Vec<f64>,
        rg: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            prim,
            inputs,
            saved,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients in
    /// [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        t.ensure_finite("leaf")?;
        Ok(self.push(t, None, Vec::new(), Vec::new(), requires_grad))
    }

    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Applies one primitive; the output requires a gradient iff any input does.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match &prim {
            Primitive::Add
            | Primitive::Mul
            | Primitive::ChannelMul
            | Primitive::BiasAdd { .. }
            | Primitive::MatMul => Some(2),
            Primitive::Conv2d { .. } => None,
            Primitive::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::usage(format!(
                    "{} takes {n} inputs, got {}",
                    prim.name(),
                    inputs.len()
                )));
            }
        }
        if let Some(v) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::usage(format!(
                "{}: unknown var {}",
                prim.name(),
                v.0
            )));
        }
        let (value, saved) = self.forward(&prim, inputs)?;
        value.ensure_finite(prim.name())?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Some(prim), inputs.to_vec(), saved, rg))
    }

    fn forward(&self, prim: &Primitive, inputs: &[Var]) -> Result<(Tensor, Vec<f64>)> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let name = prim.name();
        let out = match prim {
            Primitive::Add | Primitive::Mul => {
                let (a, b) = (val(0), val(1));
                check_same(name, a, b)?;
                let data = if matches!(prim, Primitive::Add) {
                    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
                } else {
                    a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
                };
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Primitive::ChannelMul => {
                let (x, w) = (val(0), val(1));
                if x.rank() < 1 || w.rank() != 1 || w.numel() != x.shape()[0] {
                    return Err(Error::dim(format!(
                        "{name}: weights {:?} do not match channels of {:?}",
                        w.shape(),
                        x.shape()
                    )));
                }
                let inner = x.numel() / x.shape()[0];
                let mut data = x.data().to_vec();
                for (c, chunk) in data.chunks_mut(inner).enumerate() {
                    let s = w.data()[c];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Primitive::BiasAdd { axis } => {
                let (x, b) = (val(0), val(1));
                if *axis >= x.rank() || b.rank() != 1 || b.numel() != x.shape()[*axis] {
                    return Err(Error::dim(format!(
                        "{name}: bias {:?} does not match axis {axis} of {:?}",
                        b.shape(),
                        x.shape()
                    )));
                }
                let (outer, d, inner) = dims(x.shape(), *axis);
                let mut data = x.data().to_vec();
                for o in 0..outer {
                    for k in 0..d {
                        let bk = b.data()[k];
                        let base = (o * d + k) * inner;
                        data[base..base + inner].iter_mut().for_each(|v| *v += bk);
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Error::dim(format!(
                        "{name}: cannot multiply {:?} by {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut c = vec![0.0; m * n];
                mm_nn(a.data(), b.data(), &mut c, m, k, n);
                Tensor::from_parts(vec![m, n], c)
            }
            Primitive::Conv2d { stride, padding } => {
                if inputs.len() != 2 && inputs.len() != 3 {
                    return Err(Error::usage(format!("{name} takes 2 or 3 inputs")));
                }
                let (x, w) = (val(0), val(1));
                let g = self.conv_geom(x, w, *stride, *padding)?;
                let o = w.shape()[0];
                if inputs.len() == 3 && (val(2).rank() != 1 || val(2).numel() != o) {
                    return Err(Error::dim(format!(
                        "{name}: bias {:?} does not match {o} output channels",
                        val(2).shape()
                    )));
                }
                let (oh, ow) = g.out_hw();
                let l = oh * ow;
                let cols = im2col(x.data(), &g);
                let mut y = vec![0.0; o * l];
                if inputs.len() == 3 {
                    for (oc, row) in y.chunks_mut(l).enumerate() {
                        row.fill(val(2).data()[oc]);
                    }
                }
                mm_nn(w.data(), &cols, &mut y, o, g.col_rows(), l);
                return Ok((Tensor::from_parts(vec![o, oh, ow], y), cols));
            }
            Primitive::Relu => {
                let x = val(0);
                Tensor::from_parts(
                    x.shape().to_vec(),
                    x.data().iter().map(|v| v.max(0.0)).collect(),
                )
            }
            Primitive::Sigmoid => {
                let x = val(0);
                Tensor::from_parts(
                    x.shape().to_vec(),
                    x.data().iter().map(|&v| sigmoid(v)).collect(),
                )
            }
            Primitive::Softmax { axis } => {
                let x = val(0);
                if *axis >= x.rank() {
                    return Err(Error::dim(format!(
                        "{name}: axis {axis} out of range for {:?}",
                        x.shape()
                    )));
                }
                let (outer, d, inner) = dims(x.shape(), *axis);
                let mut y = vec![0.0; x.numel()];
                let xd = x.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * d + k) * inner + i;
                        let mx = (0..d).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for k in 0..d {
                            let e = (xd[at(k)] - mx).exp();
                            y[at(k)] = e;
                            z += e;
                        }
                        for k in 0..d {
                            y[at(k)] /= z;
                        }
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), y)
            }
            Primitive::GlobalAvgPool => {
                let x = val(0);
                if x.rank() < 2 {
                    return Err(Error::dim(format!(
                        "{name}: need rank >= 2, got {:?}",
                        x.shape()
                    )));
                }
                let c = x.shape()[0];
                let inner = x.numel() / c;
                let data = x
                    .data()
                    .chunks(inner)
                    .map(|ch| ch.iter().sum::<f64>() / inner as f64)
                    .collect();
                Tensor::from_parts(vec![c], data)
            }
            Primitive::Crop { start, len } => {
                let x = val(0);
                if start.len() != x.rank() || len.len() != x.rank() {
                    return Err(Error::dim(format!(
                        "{name}: region rank does not match {:?}",
                        x.shape()
                    )));
                }
                for a in 0..x.rank() {
                    if len[a] == 0 || start[a] + len[a] > x.shape()[a] {
                        return Err(Error::dim(format!(
                            "{name}: region {start:?}+{len:?} outside {:?}",
                            x.shape()
                        )));
                    }
                }
                let mut out = vec![0.0; len.iter().product()];
                crop_runs(x.shape(), start, len, |src, dst, run| {
                    out[dst..dst + run].copy_from_slice(&x.data()[src..src + run]);
                });
                Tensor::from_parts(len.clone(), out)
            }
            Primitive::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(Error::usage("concat of zero tensors"));
                }
                let first = val(0);
                if *axis >= first.rank() {
                    return Err(Error::dim(format!(
                        "{name}: axis {axis} out of range for {:?}",
                        first.shape()
                    )));
                }
                let mut total = 0;
                for i in 0..inputs.len() {
                    let s = val(i).shape();
                    let ok = s.len() == first.rank()
                        && s.iter()
                            .zip(first.shape())
                            .enumerate()
                            .all(|(a, (p, q))| a == *axis || p == q);
                    if !ok {
                        return Err(Error::dim(format!(
                            "{name}: {:?} incompatible with {:?} along axis {axis}",
                            s,
                            first.shape()
                        )));
                    }
                    total += s[*axis];
                }
                let mut shape = first.shape().to_vec();
                shape[*axis] = total;
                let (outer, _, inner) = dims(&shape, *axis);
                let mut out = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for i in 0..inputs.len() {
                        let t = val(i);
                        let chunk = t.shape()[*axis] * inner;
                        out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                Tensor::from_parts(shape, out)
            }
            Primitive::Sum => Tensor::scalar(val(0).data().iter().sum()),
            Primitive::Mean => {
                let x = val(0);
                Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
            }
            Primitive::Affine { scale, shift } => {
                let x = val(0);
                Tensor::from_parts(
                    x.shape().to_vec(),
                    x.data().iter().map(|v| scale * v + shift).collect(),
                )
            }
            Primitive::Reshape { shape } => {
                let x = val(0);
                Tensor::new(shape.clone(), x.data().to_vec()).map_err(|_| {
                    Error::dim(format!("{name}: cannot view {:?} as {shape:?}", x.shape()))
                })?
            }
            Primitive::Transpose => {
                let x = val(0);
                if x.rank() != 2 {
                    return Err(Error::dim(format!(
                        "{name}: need a matrix, got {:?}",
                        x.shape()
                    )));
                }
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = x.data()[i * c + j];
                    }
                }
                Tensor::from_parts(vec![c, r], out)
            }
            Primitive::SoftmaxCrossEntropy { labels } => {
                let x = val(0);
                if x.rank() != 2 || x.shape()[0] != labels.len() {
                    return Err(Error::dim(format!(
                        "{name}: logits {:?} vs {} labels",
                        x.shape(),
                        labels.len()
                    )));
                }
                let (k, c) = (x.shape()[0], x.shape()[1]);
                if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(Error::dim(format!(
                        "{name}: label {bad} out of range for {c} classes"
                    )));
                }
                let mut probs = vec![0.0; k * c];
                let mut loss = 0.0;
                for i in 0..k {
                    let row = &x.data()[i * c..(i + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    let lse = mx + z.ln();
                    loss += lse - row[labels[i]];
                    for j in 0..c {
                        probs[i * c + j] = (row[j] - lse).exp();
                    }
                }
                return Ok((Tensor::scalar(loss / k as f64), probs));
            }
            Primitive::BceWithLogits { targets, weights } => {
                let x = val(0);
                if targets.len() != x.numel() || weights.len() != x.numel() {
                    return Err(Error::dim(format!(
                        "{name}: {} logits vs {} targets / {} weights",
                        x.numel(),
                        targets.len(),
                        weights.len()
                    )));
                }
                let loss = x
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
                    .sum();
                Tensor::scalar(loss)
            }
            Primitive::SmoothL1 {
                targets,
                weights,
                beta,
            } => {
                let x = val(0);
                if targets.len() != x.numel() || weights.len() != x.numel() {
                    return Err(Error::dim(format!(
                        "{name}: {} predictions vs {} targets / {} weights",
                        x.numel(),
                        targets.len(),
                        weights.len()
                    )));
                }
                if *beta <= 0.0 {
                    return Err(Error::usage(format!("{name}: beta must be positive")));
                }
                let loss = x
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&p, &t), &w)| {
                        let d = (p - t).abs();
                        w * if d < *beta {
                            0.5 * d * d / beta
                        } else {
                            d - 0.5 * beta
                        }
                    })
                    .sum();
                Tensor::scalar(loss)
            }
            Primitive::MarginRanking {
                labels,
                m_plus,
                m_minus,
                unary_scale,
                pair_scale,
            } => {
                let s = val(0);
                if s.numel() != labels.len() {
                    return Err(Error::dim(format!(
                        "{name}: {} scores vs {} labels",
                        s.numel(),
                        labels.len()
                    )));
                }
                let (u, p) = margin_ranking_parts(s.data(), labels, *m_plus, *m_minus);
                Tensor::scalar(unary_scale * u + pair_scale * p)
            }
        };
        Ok((out, Vec::new()))
    }

    fn conv_geom(&self, x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
        if x.rank() != 3
            || w.rank() != 4
            || w.shape()[1] != x.shape()[0]
            || w.shape()[2] != w.shape()[3]
        {
            return Err(Error::dim(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::usage("conv2d: stride must be positive"));
        }
        let g = ConvGeom {
            channels: x.shape()[0],
            height: x.shape()[1],
            width: x.shape()[2],
            kernel: w.shape()[2],
            stride,
            padding,
        };
        if g.height + 2 * padding < g.kernel || g.width + 2 * padding < g.kernel {
            return Err(Error::dim(format!(
                "conv2d: kernel {} larger than padded input {:?}",
                g.kernel,
                x.shape()
            )));
        }
        Ok(g)
    }

    /// Reverse sweep from a scalar loss. Gradients of values used more than
    /// once are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::usage("backward: unknown var"))?;
        if !node.value.is_scalar() {
            return Err(Error::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if node.prim.is_none() || !node.requires_grad {
            return Err(Error::usage(
                "backward: loss was not produced by a recorded graph with trainable inputs",
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(node.value.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].prim.is_some() && self.nodes[i].requires_grad {
                self.backward_node(i, g.data(), &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let prim = node.prim.as_ref().expect("recorded node");
        let inp = &node.inputs;
        let val = |i: usize| &self.nodes[inp[i].0].value;
        let y = node.value.data();

        // Zero-initialized gradient buffer of input `i`, or None when that
        // input does not need one.
        macro_rules! gbuf {
            ($i:expr) => {{
                let v = inp[$i];
                if self.nodes[v.0].requires_grad {
                    let t = &self.nodes[v.0].value;
                    Some(
                        grads[v.0]
                            .get_or_insert_with(|| Tensor::zeros(t.shape()))
                            .data_mut(),
                    )
                } else {
                    None
                }
            }};
        }

        match prim {
            Primitive::Add => {
                for i in 0..2 {
                    if let Some(ga) = gbuf!(i) {
                        ga.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Primitive::Mul => {
                let (a, b) = (val(0).data().to_vec(), val(1).data().to_vec());
                if let Some(ga) = gbuf!(0) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * b[k];
                    }
                }
                if let Some(gb) = gbuf!(1) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * a[k];
                    }
                }
            }
            Primitive::ChannelMul => {
                let x = val(0);
                let w = val(1);
                let inner = x.numel() / x.shape()[0];
                if let Some(gx) = gbuf!(0) {
                    for (k, gv) in gx.iter_mut().enumerate() {
                        *gv += g[k] * w.data()[k / inner];
                    }
                }
                let xd = x.data();
                if let Some(gw) = gbuf!(1) {
                    for (c, gv) in gw.iter_mut().enumerate() {
                        let r = c * inner..(c + 1) * inner;
                        *gv += g[r.clone()]
                            .iter()
                            .zip(&xd[r])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            Primitive::BiasAdd { axis } => {
                let shape = val(0).shape().to_vec();
                if let Some(gx) = gbuf!(0) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = gbuf!(1) {
                    let (outer, d, inner) = dims(&shape, *axis);
                    for o in 0..outer {
                        for k in 0..d {
                            let base = (o * d + k) * inner;
                            gb[k] += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if let Some(ga) = gbuf!(0) {
                    mm_nt(g, b.data(), ga, m, n, k);
                }
                if let Some(gb) = gbuf!(1) {
                    mm_tn(a.data(), g, gb, k, m, n);
                }
            }
            Primitive::Conv2d { stride, padding } => {
                let (x, w) = (val(0), val(1));
                let geom = self
                    .conv_geom(x, w, *stride, *padding)
                    .expect("validated in forward");
                let o = w.shape()[0];
                let rows = geom.col_rows();
                let l = g.len() / o;
                let cols = &node.saved;
                if let Some(gw) = gbuf!(1) {
                    mm_nt(g, cols, gw, o, l, rows);
                }
                if inp.len() == 3 {
                    if let Some(gb) = gbuf!(2) {
                        for (oc, row) in g.chunks(l).enumerate() {
                            gb[oc] += row.iter().sum::<f64>();
                        }
                    }
                }
                if self.nodes[inp[0].0].requires_grad {
                    let mut gcols = vec![0.0; rows * l];
                    mm_tn(w.data(), g, &mut gcols, rows, o, l);
                    if let Some(gx) = gbuf!(0) {
                        col2im(&gcols, &geom, gx);
                    }
                }
            }
            Primitive::Relu => {
                if let Some(gx) = gbuf!(0) {
                    for k in 0..g.len() {
                        if y[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Primitive::Sigmoid => {
                if let Some(gx) = gbuf!(0) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Primitive::Softmax { axis } => {
                let (outer, d, inner) = dims(node.value.shape(), *axis);
                if let Some(gx) = gbuf!(0) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * d + k) * inner + i;
                            let dot: f64 = (0..d).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..d {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Primitive::GlobalAvgPool => {
                let x = val(0);
                let inner = x.numel() / x.shape()[0];
                if let Some(gx) = gbuf!(0) {
                    for (k, gv) in gx.iter_mut().enumerate() {
                        *gv += g[k / inner] / inner as f64;
                    }
                }
            }
            Primitive::Crop { start, len } => {
                let shape = val(0).shape().to_vec();
                if let Some(gx) = gbuf!(0) {
                    crop_runs(&shape, start, len, |src, dst, run| {
                        for k in 0..run {
                            gx[src + k] += g[dst + k];
                        }
                    });
                }
            }
            Primitive::Concat { axis } => {
                let shape = node.value.shape().to_vec();
                let (outer, _, inner) = dims(&shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for i in 0..inp.len() {
                    let chunk = val(i).shape()[*axis] * inner;
                    if let Some(gx) = gbuf!(i) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gx[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += chunk;
                }
            }
            Primitive::Sum | Primitive::Mean => {
                let n = val(0).numel();
                let scale = if matches!(prim, Primitive::Mean) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                if let Some(gx) = gbuf!(0) {
                    gx.iter_mut().for_each(|v| *v += scale);
                }
            }
            Primitive::Affine { scale, .. } => {
                if let Some(gx) = gbuf!(0) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
                }
            }
            Primitive::Reshape { .. } => {
                if let Some(gx) = gbuf!(0) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Primitive::Transpose => {
                let (r, c) = (val(0).shape()[0], val(0).shape()[1]);
                if let Some(gx) = gbuf!(0) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Primitive::SoftmaxCrossEntropy { labels } => {
                let (k, c) = (val(0).shape()[0], val(0).shape()[1]);
                let probs = &node.saved;
                let scale = g[0] / k as f64;
                if let Some(gx) = gbuf!(0) {
                    for i in 0..k {
                        for j in 0..c {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            gx[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Primitive::BceWithLogits { targets, weights } => {
                let z = val(0).data().to_vec();
                if let Some(gx) = gbuf!(0) {
                    for k in 0..z.len() {
                        gx[k] += g[0] * weights[k] * (sigmoid(z[k]) - targets[k]);
                    }
                }
            }
            Primitive::SmoothL1 {
                targets,
                weights,
                beta,
            } => {
                let p = val(0).data().to_vec();
                if let Some(gx) = gbuf!(0) {
                    for k in 0..p.len() {
                        let d = p[k] - targets[k];
                        let dd = if d.abs() < *beta {
                            d / beta
                        } else {
                            d.signum()
                        };
                        gx[k] += g[0] * weights[k] * dd;
                    }
                }
            }
            Primitive::MarginRanking {
                labels,
                m_plus,
                m_minus,
                unary_scale,
                pair_scale,
            } => {
                let s = val(0).data().to_vec();
                let mut local = vec![0.0; s.len()];
                margin_ranking_grad(
                    &s,
                    labels,
                    *m_plus,
                    *m_minus,
                    *unary_scale,
                    *pair_scale,
                    &mut local,
                );
                if let Some(gx) = gbuf!(0) {
                    for k in 0..s.len() {
                        gx[k] += g[0] * local[k];
                    }
                }
            }
        }
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
fn margin_ranking_value(s: &[f64], y: &[u8], m_plus: f64, m_minus: f64) -> f64 {
    let (u, p) = margin_ranking_parts(s, y, m_plus, m_minus);
    u + p
}

/// Per-proposal and pairwise hinge sums.
fn margin_ranking_parts(s: &[f64], y: &[u8], m_plus: f64, m_minus: f64) -> (f64, f64) {
    let k = s.len();
    let mut unary = 0.0;
    let mut pairs = 0.0;
    for i in 0..k {
        unary += if y[i] == 1 {
            (m_plus - s[i]).max(0.0)
        } else {
            (s[i] - m_minus).max(0.0)
        };
        for j in i + 1..k {
            let gap = (s[i] - s[j]).abs();
            pairs += if y[i] == y[j] {
                (gap - m_minus).max(0.0)
            } else {
                (m_plus - gap).max(0.0)
            };
        }
    }
    (unary, pairs)
}

// Subgradient with value 0 on every hinge kink and at s_i == s_j.
fn margin_ranking_grad(
    s: &[f64],
    y: &[u8],
    m_plus: f64,
    m_minus: f64,
    us: f64,
    ps: f64,
    out: &mut [f64],
) {
    let k = s.len();
    for i in 0..k {
        if y[i] == 1 {
            if m_plus - s[i] > 0.0 {
                out[i] -= us;
            }
        } else if s[i] - m_minus > 0.0 {
            out[i] += us;
        }
        for j in i + 1..k {
            let d = s[i] - s[j];
            let dir = ps * sgn(d);
            if y[i] == y[j] {
                if d.abs() - m_minus > 0.0 {
                    out[i] += dir;
                    out[j] -= dir;
                }
            } else if m_plus - d.abs() > 0.0 {
                out[i] -= dir;
                out[j] += dir;
            }
        }
    }
}

// Convenience wrappers; each is a single primitive application.
impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn channel_mul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.apply(Primitive::ChannelMul, &[x, w])
    }
    pub fn bias_add(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::BiasAdd { axis }, &[x, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let prim = Primitive::Conv2d { stride, padding };
        match b {
            Some(b) => self.apply(prim, &[x, w, b]),
            None => self.apply(prim, &[x, w]),
        }
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[x])
    }
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }
    pub fn crop(&mut self, x: Var, start: &[usize], len: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Crop {
                start: start.to_vec(),
                len: len.to_vec(),
            },
            &[x],
        )
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, xs)
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Primitive::Affine { scale, shift }, &[x])
    }
    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[x])
    }
}
