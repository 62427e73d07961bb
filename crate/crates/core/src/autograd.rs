//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape, except model parameters, which are borrowed from a [`ParamStore`] so
//! large weight matrices are never copied. [`Tape::backward`] consumes the
//! tape and returns the accumulated [`Gradients`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::real::{self, Real};
use crate::tensor::{self, gemm, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensor owned by a model. Non-trainable entries hold state such as
/// batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

/// Name-indexed parameter registry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Parameter {
            name,
            value,
            trainable,
            grad: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad = None;
        }
    }

    /// Copies gradients for every trainable parameter out of `grads`.
    pub fn store_grads(&mut self, grads: &Gradients) {
        for (i, p) in self.entries.iter_mut().enumerate() {
            p.grad = if p.trainable {
                grads.param(ParamId(i)).cloned()
            } else {
                None
            };
        }
    }
}

/// Geometry of a 2-D convolution over channel-last input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<Real>),
    Scale(Var, Real),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<Real>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Normalize {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        layout: NormLayout,
        batch_stats: bool,
    },
    MeanAxis {
        input: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Sum(Var),
    Bce {
        probs: Var,
        targets: Vec<Real>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<Real>,
    },
}

/// Which elements share a normalization statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormLayout {
    /// One statistic per channel (last axis), pooled over all other axes.
    PerChannel { channels: usize },
    /// One statistic per row of length `width` (the last axis).
    PerRow { width: usize },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics produced by a training-mode batch normalization, returned
/// so the caller can fold them into running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

/// Operation recorder for one forward pass.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reachable.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.by_node.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// True when no gradient at all was produced.
    pub fn is_empty(&self) -> bool {
        self.by_node.iter().all(|g| g.is_none())
    }
}

const BCE_CLAMP: Real = 1e-7;

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        match &self.nodes[var.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param without store").value(*id),
        }
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let trainable = store.get(id).trainable;
        self.nodes.push(Node {
            value: Value::Param(id),
            requires_grad: trainable,
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// Batched product over a shared leading axis: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::mismatch("batch_matmul", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(Error::mismatch("batch_matmul", sa, sb));
        }
        let mut out = vec![0.0; g * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..],
                    false,
                    &db[i * k * n..],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        let t = Tensor::new(&[g, m, n], out)?;
        Ok(self.push(t, rg, Op::BatchMatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::mismatch("add", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`
    /// (bias vectors, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::mismatch("add_broadcast", sa, sb));
        }
        let mut out = ta.clone();
        let w = tb.len();
        for chunk in out.data_mut().chunks_mut(w) {
            for (o, x) in chunk.iter_mut().zip(tb.data()) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::AddBroadcast(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::mismatch("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// Elementwise product with a fixed mask (no gradient to the mask).
    pub fn mul_const(&mut self, a: Var, mask: Vec<Real>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(Error::dim("mul_const", "mask length differs from input"));
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::MulConst(a, mask)))
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).gelu();
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::sigmoid_scalar);
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Sigmoid(a))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_lastdim()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Softmax(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Permute(a, perm.to_vec())))
    }

    /// Convolution of `[B,H,W,C]` input with a `[k,k,C,C']` kernel and `[C']`
    /// bias. `same` selects zero padding that keeps `ceil(H/stride)` rows.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        same: bool,
    ) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                alloc::format!("expected [B,H,W,C] input, got {xs:?}"),
            ));
        }
        if ws.len() != 4 || ws[0] != ws[1] {
            return Err(Error::dim(
                "conv2d",
                alloc::format!("kernel must be [k,k,Cin,Cout], got {ws:?}"),
            ));
        }
        if xs[3] != ws[2] {
            return Err(Error::dim(
                "conv2d",
                alloc::format!("input has {} channels but kernel expects {}", xs[3], ws[2]),
            ));
        }
        if b.shape() != [ws[3]] {
            return Err(Error::mismatch("conv2d bias", b.shape(), &ws[3..]));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        let k = ws[0];
        let (h, wd) = (xs[1], xs[2]);
        let (out_h, out_w, pad_top, pad_left) = if same {
            let oh = h.div_ceil(stride);
            let ow = wd.div_ceil(stride);
            let ph = ((oh - 1) * stride + k).saturating_sub(h);
            let pw = ((ow - 1) * stride + k).saturating_sub(wd);
            (oh, ow, ph / 2, pw / 2)
        } else {
            if h < k || wd < k {
                return Err(Error::dim(
                    "conv2d",
                    "input smaller than kernel with valid padding",
                ));
            }
            ((h - k) / stride + 1, (wd - k) / stride + 1, 0, 0)
        };
        let geom = ConvGeometry {
            batch: xs[0],
            in_h: h,
            in_w: wd,
            in_c: xs[3],
            out_h,
            out_w,
            out_c: ws[3],
            kernel: k,
            stride,
            pad_top,
            pad_left,
        };
        let cols = im2col(x.data(), &geom);
        let mut out = vec![0.0; geom.rows() * geom.out_c];
        gemm(
            geom.rows(),
            geom.patch_len(),
            geom.out_c,
            &cols,
            false,
            w.data(),
            false,
            &mut out,
            false,
        );
        for row in out.chunks_mut(geom.out_c) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        let t = Tensor::new(&[geom.batch, out_h, out_w, geom.out_c], out)?;
        let rg = self.rg(&[input, weight, bias]);
        let cols = if self.rg(&[weight]) { cols } else { Vec::new() };
        Ok(self.push(
            t,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// 2×2 max pooling with stride 2 over `[B,H,W,C]`.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::dim(
                "maxpool2d",
                alloc::format!("expected [B,H,W,C], got {s:?}"),
            ));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(
                "maxpool2d",
                alloc::format!("spatial dims {h}x{w} must be even"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * oh * ow * c);
        let mut argmax = Vec::with_capacity(b * oh * ow * c);
        let xd = x.data();
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = Real::NEG_INFINITY;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = ((bi * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                                // strict comparison keeps the first row-major index on ties
                                if best == usize::MAX || xd[idx] > best_v {
                                    best = idx;
                                    best_v = xd[idx];
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let t = Tensor::new(&[b, oh, ow, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, rg, Op::MaxPool2 { input, argmax }))
    }

    /// Batch normalization in training mode: statistics over every axis but
    /// the last. Returns the output and the batch statistics (biased variance).
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: Real,
    ) -> Result<(Var, BatchStats)> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::dim(
                "batchnorm",
                "input needs a batch and a channel axis",
            ));
        }
        if s[0] < 2 {
            return Err(Error::contract(
                "batchnorm",
                "training mode needs a batch of at least 2",
            ));
        }
        let c = *s.last().unwrap();
        self.check_affine("batchnorm", gamma, beta, c)?;
        let count = (x.len() / c) as Real;
        let mut mean = vec![0.0; c];
        for row in x.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for row in x.data().chunks(c) {
            for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / real::sqrt(v + eps)).collect();
        let var_out = self.normalize(
            input,
            gamma,
            beta,
            &mean,
            inv_std,
            NormLayout::PerChannel { channels: c },
            true,
        )?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[Real],
        running_var: &[Real],
        eps: Real,
    ) -> Result<Var> {
        let c = *self.value(input).shape().last().unwrap_or(&0);
        self.check_affine("batchnorm", gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim(
                "batchnorm",
                "running statistics length differs from channels",
            ));
        }
        let inv_std = running_var
            .iter()
            .map(|v| 1.0 / real::sqrt(v + eps))
            .collect();
        self.normalize(
            input,
            gamma,
            beta,
            running_mean,
            inv_std,
            NormLayout::PerChannel { channels: c },
            false,
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: Real) -> Result<Var> {
        let x = self.value(input);
        let d = *x.shape().last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::dim(
                "layer_norm",
                "normalized dimension must be at least 2",
            ));
        }
        self.check_affine("layer_norm", gain, bias, d)?;
        let rows = x.len() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        for row in x.data().chunks(d) {
            let m = row.iter().sum::<Real>() / d as Real;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<Real>() / d as Real;
            mean.push(m);
            inv_std.push(1.0 / real::sqrt(v + eps));
        }
        self.normalize(
            input,
            gain,
            bias,
            &mean,
            inv_std,
            NormLayout::PerRow { width: d },
            true,
        )
    }

    fn check_affine(&self, op: &'static str, g: Var, b: Var, n: usize) -> Result<()> {
        let (gs, bs) = (self.value(g).shape(), self.value(b).shape());
        if gs != [n] || bs != [n] {
            return Err(Error::dim(
                op,
                alloc::format!("affine parameters {gs:?}/{bs:?} do not match width {n}"),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        input: Var,
        gain: Var,
        bias: Var,
        mean: &[Real],
        inv_std: Vec<Real>,
        layout: NormLayout,
        batch_stats: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        match layout {
            NormLayout::PerChannel { channels } => {
                for row in x.data().chunks(channels) {
                    for c in 0..channels {
                        let h = (row[c] - mean[c]) * inv_std[c];
                        xhat.push(h);
                        out.push(g[c] * h + b[c]);
                    }
                }
            }
            NormLayout::PerRow { width } => {
                for (r, row) in x.data().chunks(width).enumerate() {
                    for c in 0..width {
                        let h = (row[c] - mean[r]) * inv_std[r];
                        xhat.push(h);
                        out.push(g[c] * h + b[c]);
                    }
                }
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        let rg = self.rg(&[input, gain, bias]);
        Ok(self.push(
            t,
            rg,
            Op::Normalize {
                input,
                gain,
                bias,
                xhat,
                inv_std,
                layout,
                batch_stats,
            },
        ))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.value(input).shape().to_vec();
        if axis >= s.len() {
            return Err(Error::dim(
                "mean_axis",
                alloc::format!("axis {axis} out of range for {s:?}"),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value(input).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d /= len as Real);
        }
        let mut shape: Vec<usize> = s[..axis].iter().chain(&s[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            t,
            rg,
            Op::MeanAxis {
                input,
                outer,
                axis: len,
                inner,
            },
        ))
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), rg, Op::Sum(input))
    }

    /// Mean binary cross-entropy of probabilities against already smoothed
    /// targets. Probabilities are clamped to `[1e-7, 1-1e-7]`; the clamp
    /// blocks the gradient outside that band.
    pub fn bce(&mut self, probs: Var, targets: Vec<Real>) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != targets.len() {
            return Err(Error::dim(
                "bce",
                alloc::format!("{} probabilities vs {} targets", p.len(), targets.len()),
            ));
        }
        let n = targets.len() as Real;
        let loss = p
            .data()
            .iter()
            .zip(&targets)
            .map(|(&p, &y)| bce_term(p, y))
            .sum::<Real>()
            / n;
        let rg = self.rg(&[probs]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::Bce { probs, targets }))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` computed from the
    /// logits directly, so saturated outputs keep a gradient of `p - y`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<Real>) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::dim(
                "bce_with_logits",
                alloc::format!("{} logits vs {} targets", z.len(), targets.len()),
            ));
        }
        let n = targets.len() as Real;
        let loss = z
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| bce_logit_term(z, y))
            .sum::<Real>()
            / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::BceLogits { logits, targets }))
    }

    /// Runs the reverse pass from a one-element `loss` and frees the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(
                "backward",
                alloc::format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            by_node: grads,
            param_vars: self.param_vars,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(ta.shape(), da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(tb.shape(), db).unwrap());
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        // dA = dC · op(B)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..],
                            false,
                            &tb.data()[i * k * n..],
                            !*trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape(), da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n,k]: dB = dCᵀ · A
                            gemm(
                                n,
                                m,
                                k,
                                &g.data()[i * m * n..],
                                true,
                                &ta.data()[i * m * k..],
                                false,
                                dst,
                                false,
                            );
                        } else {
                            // B is [k,n]: dB = Aᵀ · dC
                            gemm(
                                k,
                                m,
                                n,
                                &ta.data()[i * m * k..],
                                true,
                                &g.data()[i * m * n..],
                                false,
                                dst,
                                false,
                            );
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let tb = self.value(*b);
                    let mut db = vec![0.0; tb.len()];
                    for chunk in g.data().chunks(tb.len()) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape(), db).unwrap());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape(), d).unwrap());
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::new(tb.shape(), d).unwrap());
                }
            }
            Op::MulConst(a, mask) => {
                let d = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| g * tensor::gelu_grad(*x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Softmax(a) => {
                let w = *out.shape().last().unwrap();
                let mut d = Vec::with_capacity(out.len());
                for (gr, yr) in g.data().chunks(w).zip(out.data().chunks(w)) {
                    let dot: Real = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                self.accumulate(grads, *a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape));
            }
            Op::Permute(a, perm) => {
                let inv = tensor::inverse_permutation(perm);
                self.accumulate(grads, *a, tensor::permute_data(g, &inv));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let (rows, plen, oc) = (geom.rows(), geom.patch_len(), geom.out_c);
                if self.requires_grad(*weight) {
                    let mut dw = vec![0.0; plen * oc];
                    gemm(plen, rows, oc, cols, true, g.data(), false, &mut dw, false);
                    let ws = self.value(*weight).shape().to_vec();
                    self.accumulate(grads, *weight, Tensor::new(&ws, dw).unwrap());
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; oc];
                    for row in g.data().chunks(oc) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[oc], db).unwrap());
                }
                if self.requires_grad(*input) {
                    let mut dcols = vec![0.0; rows * plen];
                    gemm(
                        rows,
                        oc,
                        plen,
                        g.data(),
                        false,
                        self.value(*weight).data(),
                        true,
                        &mut dcols,
                        false,
                    );
                    let dx = col2im(&dcols, geom);
                    let xs = self.value(*input).shape().to_vec();
                    self.accumulate(grads, *input, Tensor::new(&xs, dx).unwrap());
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let xs = self.value(*input).shape();
                let mut dx = vec![0.0; xs.iter().product()];
                for (&idx, gv) in argmax.iter().zip(g.data()) {
                    dx[idx] += gv;
                }
                self.accumulate(grads, *input, Tensor::new(xs, dx).unwrap());
            }
            Op::Normalize {
                input,
                gain,
                bias,
                xhat,
                inv_std,
                layout,
                batch_stats,
            } => self.normalize_backward(
                g,
                *input,
                *gain,
                *bias,
                xhat,
                inv_std,
                *layout,
                *batch_stats,
                grads,
            ),
            Op::MeanAxis {
                input,
                outer,
                axis,
                inner,
            } => {
                let mut dx = Vec::with_capacity(outer * axis * inner);
                let scale = 1.0 / *axis as Real;
                for o in 0..*outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..*axis {
                        dx.extend(src.iter().map(|x| x * scale));
                    }
                }
                let xs = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, Tensor::new(&xs, dx).unwrap());
            }
            Op::Sum(a) => {
                let xs = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&xs, g.item()));
            }
            Op::Bce { probs, targets } => {
                let p = self.value(*probs);
                let n = targets.len() as Real;
                let scale = g.item() / n;
                let d = p
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                            0.0
                        } else {
                            scale * (-(y / p) + (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                self.accumulate(grads, *probs, Tensor::new(p.shape(), d).unwrap());
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits);
                let scale = g.item() / targets.len() as Real;
                let d = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| scale * (tensor::sigmoid_scalar(z) - y))
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(z.shape(), d).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_backward(
        &self,
        g: &Tensor,
        input: Var,
        gain: Var,
        bias: Var,
        xhat: &[Real],
        inv_std: &[Real],
        layout: NormLayout,
        batch_stats: bool,
        grads: &mut [Option<Tensor>],
    ) {
        let gamma = self.value(gain).data();
        let width = match layout {
            NormLayout::PerChannel { channels } => channels,
            NormLayout::PerRow { width } => width,
        };
        if self.requires_grad(gain) || self.requires_grad(bias) {
            let mut dg = vec![0.0; width];
            let mut db = vec![0.0; width];
            for (gr, hr) in g.data().chunks(width).zip(xhat.chunks(width)) {
                for c in 0..width {
                    dg[c] += gr[c] * hr[c];
                    db[c] += gr[c];
                }
            }
            self.accumulate(grads, gain, Tensor::new(&[width], dg).unwrap());
            self.accumulate(grads, bias, Tensor::new(&[width], db).unwrap());
        }
        if !self.requires_grad(input) {
            return;
        }
        let mut dx = vec![0.0; g.len()];
        match (layout, batch_stats) {
            (NormLayout::PerChannel { channels }, true) => {
                let count = (g.len() / channels) as Real;
                let mut sum_dh = vec![0.0; channels];
                let mut sum_dh_h = vec![0.0; channels];
                for (gr, hr) in g.data().chunks(channels).zip(xhat.chunks(channels)) {
                    for c in 0..channels {
                        let dh = gr[c] * gamma[c];
                        sum_dh[c] += dh;
                        sum_dh_h[c] += dh * hr[c];
                    }
                }
                for ((dr, gr), hr) in dx
                    .chunks_mut(channels)
                    .zip(g.data().chunks(channels))
                    .zip(xhat.chunks(channels))
                {
                    for c in 0..channels {
                        let dh = gr[c] * gamma[c];
                        dr[c] = inv_std[c] / count * (count * dh - sum_dh[c] - hr[c] * sum_dh_h[c]);
                    }
                }
            }
            (NormLayout::PerChannel { channels }, false) => {
                for (dr, gr) in dx.chunks_mut(channels).zip(g.data().chunks(channels)) {
                    for c in 0..channels {
                        dr[c] = gr[c] * gamma[c] * inv_std[c];
                    }
                }
            }
            (NormLayout::PerRow { width }, _) => {
                let n = width as Real;
                for (r, ((dr, gr), hr)) in dx
                    .chunks_mut(width)
                    .zip(g.data().chunks(width))
                    .zip(xhat.chunks(width))
                    .enumerate()
                {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..width {
                        let dh = gr[c] * gamma[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                    }
                    for c in 0..width {
                        let dh = gr[c] * gamma[c];
                        dr[c] = inv_std[r] / n * (n * dh - sum_dh - hr[c] * sum_dh_h);
                    }
                }
            }
        }
        let xs = self.value(input).shape().to_vec();
        self.accumulate(grads, input, Tensor::new(&xs, dx).unwrap());
    }
}

/// Single BCE term with the probability clamped away from 0 and 1.
pub(crate) fn bce_term(p: Real, y: Real) -> Real {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * real::ln(p) + (1.0 - y) * real::ln(1.0 - p))
}

/// `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub(crate) fn bce_logit_term(z: Real, y: Real) -> Real {
    z.max(0.0) - z * y + real::ln_1p(real::exp(-z.abs()))
}

fn im2col(x: &[Real], g: &ConvGeometry) -> Vec<Real> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.rows() * plen];
    let c = g.in_c;
    for b in 0..g.batch {
        for oi in 0..g.out_h {
            for oj in 0..g.out_w {
                let row = ((b * g.out_h + oi) * g.out_w + oj) * plen;
                for m in 0..g.kernel {
                    let ii = (oi * g.stride + m) as isize - g.pad_top as isize;
                    if ii < 0 || ii >= g.in_h as isize {
                        continue;
                    }
                    for n in 0..g.kernel {
                        let jj = (oj * g.stride + n) as isize - g.pad_left as isize;
                        if jj < 0 || jj >= g.in_w as isize {
                            continue;
                        }
                        let src = ((b * g.in_h + ii as usize) * g.in_w + jj as usize) * c;
                        let dst = row + (m * g.kernel + n) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[Real], g: &ConvGeometry) -> Vec<Real> {
    let plen = g.patch_len();
    let c = g.in_c;
    let mut x = vec![0.0; g.batch * g.in_h * g.in_w * c];
    for b in 0..g.batch {
        for oi in 0..g.out_h {
            for oj in 0..g.out_w {
                let row = ((b * g.out_h + oi) * g.out_w + oj) * plen;
                for m in 0..g.kernel {
                    let ii = (oi * g.stride + m) as isize - g.pad_top as isize;
                    if ii < 0 || ii >= g.in_h as isize {
                        continue;
                    }
                    for n in 0..g.kernel {
                        let jj = (oj * g.stride + n) as isize - g.pad_left as isize;
                        if jj < 0 || jj >= g.in_w as isize {
                            continue;
                        }
                        let dst = ((b * g.in_h + ii as usize) * g.in_w + jj as usize) * c;
                        let src = row + (m * g.kernel + n) * c;
                        for (d, s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_loss_writes_nothing() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let z = tape.leaf(Tensor::scalar(5.0), true);
        let y = tape.scale(x, 2.0);
        let _unused = tape.scale(z, 3.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
        assert!(grads.wrt(z).is_none());
    }

    #[test]
    fn matmul_sum_gradient_is_row_sums_of_b() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0, 6.0, 1.0], &[7.0, 8.0, -2.0]]);
        let mut tape = Tape::new();
        let va = tape.leaf(a, true);
        let vb = tape.constant(b.clone());
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        let ga = grads.wrt(va).unwrap();
        for i in 0..2 {
            for t in 0..2 {
                let want: Real = (0..3).map(|j| b.at(&[t, j])).sum();
                assert_eq!(ga.at(&[i, t]), want);
            }
        }
    }

    #[test]
    fn maxpool_ties_route_to_first_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2, 1], 7.0), true);
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn params_are_borrowed_and_deduplicated() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0), true);
        let mut tape = Tape::with_params(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.param(w).unwrap().item(), 4.0);
    }
}
