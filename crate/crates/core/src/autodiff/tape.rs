use crate::error::{Error, Result};
use crate::tensor::{dims4, Tensor};

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeometry};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operators accepted by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Operator {
    MatMul,
    /// Stride-1 convolution with symmetric zero padding; inputs `x, weight`.
    Conv2d { pad: usize },
    Upsample2x,
    AvgPool2x,
    Add,
    Sub,
    Mul,
    Scale(f32),
    ConcatChannels,
    LeakyRelu(f32),
    Silu,
    Sigmoid,
    /// Inputs `x, gamma, beta`.
    GroupNorm { groups: usize },
    /// Sums table rows per bag; input `table`.
    EmbeddingSum { bags: Vec<Vec<usize>> },
    Mse,
    Bce { targets: Vec<f32> },
    CrossEntropy { labels: Vec<usize> },
    AddChannelBias,
    AddChannelVec,
    AddRowBias,
    Reshape(Vec<usize>),
    Sum,
    Mean,
    MeanSpatial,
    Clamp(f32, f32),
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, pad: usize },
    Upsample2x(Var),
    AvgPool2x(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ConcatChannels(Var, Var),
    LeakyRelu(Var, f32),
    Silu(Var),
    Sigmoid(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    EmbeddingSum { table: Var, bags: Vec<Vec<usize>> },
    Mse(Var, Var),
    Bce { p: Var, targets: Vec<f32> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    AddChannelBias(Var, Var),
    AddChannelVec(Var, Var),
    AddRowBias(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    Clamp(Var, f32, f32),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. Nodes are appended in evaluation order, so every node's inputs
/// precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Values the loss does not
    /// depend on, and constants, yield `None`.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materialises zeros when no gradient flowed.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f32> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records an input that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Applies `op` to `inputs`, checking arity.
    pub fn apply(&mut self, op: Operator, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Operator::MatMul
            | Operator::Conv2d { .. }
            | Operator::Add
            | Operator::Sub
            | Operator::Mul
            | Operator::ConcatChannels
            | Operator::Mse
            | Operator::AddChannelBias
            | Operator::AddChannelVec
            | Operator::AddRowBias => 2,
            Operator::GroupNorm { .. } => 3,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(
                "apply",
                format!("{op:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        let i = inputs;
        match op {
            Operator::MatMul => self.matmul(i[0], i[1]),
            Operator::Conv2d { pad } => self.conv2d(i[0], i[1], pad),
            Operator::Upsample2x => self.upsample2x(i[0]),
            Operator::AvgPool2x => self.avg_pool2x(i[0]),
            Operator::Add => self.add(i[0], i[1]),
            Operator::Sub => self.sub(i[0], i[1]),
            Operator::Mul => self.mul(i[0], i[1]),
            Operator::Scale(s) => Ok(self.scale(i[0], s)),
            Operator::ConcatChannels => self.concat_channels(i[0], i[1]),
            Operator::LeakyRelu(slope) => Ok(self.leaky_relu(i[0], slope)),
            Operator::Silu => Ok(self.silu(i[0])),
            Operator::Sigmoid => Ok(self.sigmoid(i[0])),
            Operator::GroupNorm { groups } => self.group_norm(i[0], i[1], i[2], groups),
            Operator::EmbeddingSum { bags } => self.embedding_sum(i[0], bags),
            Operator::Mse => self.mse(i[0], i[1]),
            Operator::Bce { targets } => self.bce(i[0], targets),
            Operator::CrossEntropy { labels } => self.cross_entropy(i[0], labels),
            Operator::AddChannelBias => self.add_channel_bias(i[0], i[1]),
            Operator::AddChannelVec => self.add_channel_vec(i[0], i[1]),
            Operator::AddRowBias => self.add_row_bias(i[0], i[1]),
            Operator::Reshape(shape) => self.reshape(i[0], &shape),
            Operator::Sum => Ok(self.sum(i[0])),
            Operator::Mean => Ok(self.mean(i[0])),
            Operator::MeanSpatial => self.mean_spatial(i[0]),
            Operator::Clamp(lo, hi) => Ok(self.clamp(i[0], lo, hi)),
        }
    }

    /// `[M, K] · [K, N] -> [M, N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => {
                return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
            }
        };
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Stride-1 convolution. `x: [N, C, H, W]`, `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(w));
        let (n, c, h, wd) = dims4("conv2d", tx.shape())?;
        let (o, c2, k, k2) = dims4("conv2d", tw.shape())?;
        if c != c2 || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} with kernel {:?}", tx.shape(), tw.shape()),
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{wd}"),
            ));
        }
        let g = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            pad,
        };
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut col = vec![0.0; g.col_rows() * g.col_cols()];
        let mut out = vec![0.0; n * o * oh * ow];
        let in_per = c * h * wd;
        let out_per = o * oh * ow;
        for s in 0..n {
            im2col(&tx.data()[s * in_per..(s + 1) * in_per], g, &mut col);
            gemm_nn(
                o,
                g.col_rows(),
                oh * ow,
                tw.data(),
                &col,
                &mut out[s * out_per..(s + 1) * out_per],
            );
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![n, o, oh, ow], out)?,
            Op::Conv2d { x, w, pad },
            rg,
        ))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let (n, c, h, w) = dims4("upsample2x", t.shape())?;
        let mut out = vec![0.0; n * c * 4 * h * w];
        let d = t.data();
        for p in 0..n * c {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c, 2 * h, 2 * w], out)?,
            Op::Upsample2x(x),
            rg,
        ))
    }

    /// 2×2 average pooling; spatial dims must be even.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let (n, c, h, w) = dims4("avg_pool2x", t.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2x", format!("odd spatial size {h}x{w}")));
        }
        let out = avg_pool2x_data(t.data(), n * c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c, h / 2, w / 2], out)?,
            Op::AvgPool2x(x),
            rg,
        ))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn map(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same element count");
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.map(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (n, ca, h, w) = dims4("concat_channels", ta.shape())?;
        let (n2, cb, h2, w2) = dims4("concat_channels", tb.shape())?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} with {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for s in 0..n {
            out.extend_from_slice(&ta.data()[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&tb.data()[s * pb..(s + 1) * pb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![n, ca + cb, h, w], out)?,
            Op::ConcatChannels(a, b),
            rg,
        ))
    }

    /// Group normalisation with per-channel affine `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let (n, c, h, w) = dims4("group_norm", tx.shape())?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::shape(
                "group_norm",
                format!("affine {:?}/{:?} for {c} channels", tg.shape(), tb.shape()),
            ));
        }
        let cg = c / groups;
        let hw = h * w;
        let m = (cg * hw) as f64;
        let mut out = vec![0.0; tx.numel()];
        let mut stats = Vec::with_capacity(n * groups);
        for s in 0..n {
            for g in 0..groups {
                let start = (s * c + g * cg) * hw;
                let block = &tx.data()[start..start + cg * hw];
                let mean = block.iter().map(|v| *v as f64).sum::<f64>() / m;
                let var = block.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / m;
                let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                stats.push((mean, rstd));
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (ga, be) = (tg.data()[ch] as f64, tb.data()[ch] as f64);
                    for i in 0..hw {
                        let idx = start + ci * hw + i;
                        out[idx] = ((tx.data()[idx] as f64 - mean) * rstd * ga + be) as f32;
                    }
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    /// For each bag of token ids, sums the corresponding rows of `table: [V, E]`.
    /// Output is `[bags.len(), E]`.
    pub fn embedding_sum(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.val(table);
        let (v, e) = match *t.shape() {
            [v, e] => (v, e),
            _ => return Err(Error::shape("embedding_sum", format!("table {:?}", t.shape()))),
        };
        let mut out = vec![0.0; bags.len() * e];
        for (b, bag) in bags.iter().enumerate() {
            let mut acc = vec![0.0f64; e];
            for &id in bag {
                if id >= v {
                    return Err(Error::shape(
                        "embedding_sum",
                        format!("token id {id} outside table of {v} rows"),
                    ));
                }
                for (a, x) in acc.iter_mut().zip(&t.data()[id * e..(id + 1) * e]) {
                    *a += *x as f64;
                }
            }
            for (o, a) in out[b * e..(b + 1) * e].iter_mut().zip(acc) {
                *o = a as f32;
            }
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![bags.len(), e], out)?,
            Op::EmbeddingSum { table, bags },
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape("mse", ta, tb)?;
        let n = ta.numel() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar((s / n) as f32), Op::Mse(a, b), rg))
    }

    /// Mean binary cross-entropy of probabilities `p` against constant targets.
    pub fn bce(&mut self, p: Var, targets: Vec<f32>) -> Result<Var> {
        let tp = self.val(p);
        if targets.len() != tp.numel() {
            return Err(Error::shape(
                "bce",
                format!("{} targets for {:?}", targets.len(), tp.shape()),
            ));
        }
        if let Some(bad) = tp.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Domain {
                op: "bce",
                detail: format!("probability {bad} not in (0, 1)"),
            });
        }
        if let Some(bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain {
                op: "bce",
                detail: format!("target {bad} not in [0, 1]"),
            });
        }
        let n = tp.numel() as f64;
        let s: f64 = tp
            .data()
            .iter()
            .zip(&targets)
            .map(|(p, t)| {
                let (p, t) = (*p as f64, *t as f64);
                t * p.ln() + (1.0 - t) * (1.0 - p).ln()
            })
            .sum();
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor::scalar((-s / n) as f32), Op::Bce { p, targets }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let t = self.val(logits);
        let (n, k) = match *t.shape() {
            [n, k] => (n, k),
            _ => return Err(Error::shape("cross_entropy", format!("logits {:?}", t.shape()))),
        };
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        let mut total = 0.0f64;
        for (row, &label) in t.data().chunks_exact(k).zip(&labels) {
            if label >= k {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("label {label} with {k} classes"),
                ));
            }
            total += log_sum_exp(row) - row[label] as f64;
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar((total / n as f64) as f32),
            Op::CrossEntropy { logits, labels },
            rg,
        ))
    }

    /// `x: [N, C, H, W] + b: [C]` broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(b));
        let (n, c, h, w) = dims4("add_channel_bias", tx.shape())?;
        if tb.shape() != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for {c} channels", tb.shape()),
            ));
        }
        let mut out = tx.data().to_vec();
        for s in 0..n {
            for ch in 0..c {
                let bv = tb.data()[ch];
                let start = (s * c + ch) * h * w;
                out[start..start + h * w].iter_mut().for_each(|v| *v += bv);
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(
            Tensor::new(tx.shape().to_vec(), out)?,
            Op::AddChannelBias(x, b),
            rg,
        ))
    }

    /// `x: [N, C, H, W] + v: [N, C]` broadcast over space.
    pub fn add_channel_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.val(x), self.val(v));
        let (n, c, h, w) = dims4("add_channel_vec", tx.shape())?;
        if tv.shape() != [n, c] {
            return Err(Error::shape(
                "add_channel_vec",
                format!("vector {:?} for input {:?}", tv.shape(), tx.shape()),
            ));
        }
        let mut out = tx.data().to_vec();
        for p in 0..n * c {
            let bv = tv.data()[p];
            out[p * h * w..(p + 1) * h * w].iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(
            Tensor::new(tx.shape().to_vec(), out)?,
            Op::AddChannelVec(x, v),
            rg,
        ))
    }

    /// `x: [N, F] + b: [F]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(b));
        let f = match *tx.shape() {
            [_, f] if tb.shape() == [f] => f,
            _ => {
                return Err(Error::shape(
                    "add_row_bias",
                    format!("{:?} + {:?}", tx.shape(), tb.shape()),
                ))
            }
        };
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(f) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(
            Tensor::new(tx.shape().to_vec(), out)?,
            Op::AddRowBias(x, b),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x).clone();
        let mut t = t.reshape(shape)?;
        t.clear_grad();
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.val(x).data().iter().map(|v| *v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s: f64 = t.data().iter().map(|v| *v as f64).sum();
        let m = (s / t.numel() as f64) as f32;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Global average pool: `[N, C, H, W] -> [N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let (n, c, h, w) = dims4("mean_spatial", t.shape())?;
        let hw = h * w;
        let out = t
            .data()
            .chunks_exact(hw)
            .map(|p| (p.iter().map(|v| *v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::MeanSpatial(x), rg))
    }

    /// Reverse pass from a scalar `loss`. Each recorded node is visited once,
    /// in reverse order; fan-out gradients accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        // Only gradients of grad-requiring nodes are meaningful.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contribution: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(contribution)
                .for_each(|(a, b)| *a += b),
            slot => *slot = Some(contribution),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, g, tb.data(), &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, ta.data(), g, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, pad } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (n, c, h, wd) = dims4("conv2d", tx.shape())?;
                let (o, _, k, _) = dims4("conv2d", tw.shape())?;
                let geo = ConvGeometry {
                    channels: c,
                    height: h,
                    width: wd,
                    kernel: k,
                    pad: *pad,
                };
                let (rows, cols) = (geo.col_rows(), geo.col_cols());
                let in_per = c * h * wd;
                let out_per = o * cols;
                let mut col = vec![0.0; rows * cols];
                let need_w = self.needs(*w);
                let need_x = self.needs(*x);
                let mut dw = vec![0.0; tw.numel()];
                let mut dw_sample = vec![0.0; tw.numel()];
                let mut dx = vec![0.0; if need_x { tx.numel() } else { 0 }];
                let mut dcol = vec![0.0; if need_x { rows * cols } else { 0 }];
                for s in 0..n {
                    let gs = &g[s * out_per..(s + 1) * out_per];
                    if need_w {
                        im2col(&tx.data()[s * in_per..(s + 1) * in_per], geo, &mut col);
                        dw_sample.iter_mut().for_each(|v| *v = 0.0);
                        gemm_nt(o, cols, rows, gs, &col, &mut dw_sample);
                        dw.iter_mut().zip(&dw_sample).for_each(|(a, b)| *a += b);
                    }
                    if need_x {
                        dcol.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn(rows, o, cols, tw.data(), gs, &mut dcol);
                        col2im(&dcol, geo, &mut dx[s * in_per..(s + 1) * in_per]);
                    }
                }
                if need_w {
                    self.accumulate(grads, *w, dw);
                }
                if need_x {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = dims4("upsample2x", self.val(*x).shape())?;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2x(x) => {
                let (n, c, h, w) = dims4("avg_pool2x", self.val(*x).shape())?;
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[p * h * w + y * w + xx] = 0.25 * g[p * oh * ow + (y / 2) * ow + xx / 2];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    let da = g.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * s).collect());
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = dims4("concat_channels", self.val(*a).shape())?;
                let cb = self.val(*b).shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * pa);
                let mut db = Vec::with_capacity(n * pb);
                for s in 0..n {
                    let chunk = &g[s * (pa + pb)..(s + 1) * (pa + pb)];
                    da.extend_from_slice(&chunk[..pa]);
                    db.extend_from_slice(&chunk[pa..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::LeakyRelu(x, slope) => {
                let dx = g
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Silu(x) => {
                let dx = g
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(g, v)| {
                        let s = sigmoid(*v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp(x, lo, hi) => {
                let dx = g
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let tx = self.val(*x);
                let tg = self.val(*gamma);
                let (n, c, h, w) = dims4("group_norm", tx.shape())?;
                let cg = c / groups;
                let hw = h * w;
                let m = (cg * hw) as f64;
                let mut dx = vec![0.0; tx.numel()];
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for s in 0..n {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[s * groups + gi];
                        let start = (s * c + gi * cg) * hw;
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let ga = tg.data()[ch] as f64;
                            for k in 0..hw {
                                let idx = start + ci * hw + k;
                                let xhat = (tx.data()[idx] as f64 - mean) * rstd;
                                let dy = g[idx] as f64;
                                dgamma[ch] += dy * xhat;
                                dbeta[ch] += dy;
                                s1 += dy * ga;
                                s2 += dy * ga * xhat;
                            }
                        }
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let ga = tg.data()[ch] as f64;
                            for k in 0..hw {
                                let idx = start + ci * hw + k;
                                let xhat = (tx.data()[idx] as f64 - mean) * rstd;
                                let dyg = g[idx] as f64 * ga;
                                dx[idx] = (rstd * (dyg - s1 / m - xhat * s2 / m)) as f32;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma.into_iter().map(|v| v as f32).collect());
                self.accumulate(grads, *beta, dbeta.into_iter().map(|v| v as f32).collect());
            }
            Op::EmbeddingSum { table, bags } => {
                let t = self.val(*table);
                let e = t.shape()[1];
                let mut dt = vec![0.0f64; t.numel()];
                for (b, bag) in bags.iter().enumerate() {
                    for &id in bag {
                        for (d, gv) in dt[id * e..(id + 1) * e].iter_mut().zip(&g[b * e..(b + 1) * e]) {
                            *d += *gv as f64;
                        }
                    }
                }
                self.accumulate(grads, *table, dt.into_iter().map(|v| v as f32).collect());
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let scale = 2.0 * g[0] as f64 / ta.numel() as f64;
                let da: Vec<f32> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| ((*x as f64 - *y as f64) * scale) as f32)
                    .collect();
                if self.needs(*b) {
                    self.accumulate(grads, *b, da.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, da);
            }
            Op::Bce { p, targets } => {
                let tp = self.val(*p);
                let scale = g[0] as f64 / tp.numel() as f64;
                let dp = tp
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| {
                        let (p, t) = (*p as f64, *t as f64);
                        ((p - t) / (p * (1.0 - p)) * scale) as f32
                    })
                    .collect();
                self.accumulate(grads, *p, dp);
            }
            Op::CrossEntropy { logits, labels } => {
                let t = self.val(*logits);
                let (n, k) = (t.shape()[0], t.shape()[1]);
                let scale = g[0] as f64 / n as f64;
                let mut dl = vec![0.0; n * k];
                for (r, (row, &label)) in t.data().chunks_exact(k).zip(labels).enumerate() {
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        let p = (row[j] as f64 - lse).exp();
                        let target = if j == label { 1.0 } else { 0.0 };
                        dl[r * k + j] = ((p - target) * scale) as f32;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::AddChannelBias(x, b) => {
                let (n, c, h, w) = dims4("add_channel_bias", self.val(*x).shape())?;
                if self.needs(*b) {
                    let mut db = vec![0.0f64; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let start = (s * c + ch) * h * w;
                            db[ch] += g[start..start + h * w].iter().map(|v| *v as f64).sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, db.into_iter().map(|v| v as f32).collect());
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::AddChannelVec(x, v) => {
                let (n, c, h, w) = dims4("add_channel_vec", self.val(*x).shape())?;
                if self.needs(*v) {
                    let dv = (0..n * c)
                        .map(|p| g[p * h * w..(p + 1) * h * w].iter().map(|v| *v as f64).sum::<f64>() as f32)
                        .collect();
                    self.accumulate(grads, *v, dv);
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::AddRowBias(x, b) => {
                let f = self.val(*b).numel();
                if self.needs(*b) {
                    let mut db = vec![0.0f64; f];
                    for row in g.chunks_exact(f) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += *v as f64);
                    }
                    self.accumulate(grads, *b, db.into_iter().map(|v| v as f32).collect());
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.val(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.val(*x).numel();
                self.accumulate(grads, *x, vec![(g[0] as f64 / n as f64) as f32; n]);
            }
            Op::MeanSpatial(x) => {
                let (n, c, h, w) = dims4("mean_spatial", self.val(*x).shape())?;
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    let v = (g[p] as f64 / hw as f64) as f32;
                    dx[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d = v);
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
    max + row.iter().map(|v| (*v as f64 - max).exp()).sum::<f64>().ln()
}

pub(crate) fn avg_pool2x_data(data: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let s = src[2 * y * w + 2 * x]
                    + src[2 * y * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1];
                out[p * oh * ow + y * ow + x] = 0.25 * s;
            }
        }
    }
    out
}
