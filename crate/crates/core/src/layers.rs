//! Neural building blocks. Every layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and records its forward computation on a [`Tape`].
//!
//! Tensors are channel-last: images and feature maps are `[B,H,W,C]`, token
//! sequences are `[B,N,d]`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, ParamId, ParamStore, Tape, Var};
use crate::real::{self, Real};
use crate::{Error, Mode, Result, Rng, Tensor};

/// Batch-norm running-average momentum.
pub const BN_MOMENTUM: Real = 0.9;
/// Variance guard shared by batch and layer normalization.
pub const NORM_EPS: Real = 1e-5;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-√(6/fan_in), √(6/fan_in))`, for layers followed by ReLU.
    HeUniform {
        fan_in: usize,
    },
    /// `U(-√(3/fan_in), √(3/fan_in))`.
    LecunUniform {
        fan_in: usize,
    },
    Normal {
        std: Real,
    },
    Zeros,
    Ones,
}

impl Init {
    pub fn tensor(self, shape: &[usize], rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<Real> = match self {
            Init::HeUniform { fan_in } => uniform(n, real::sqrt(6.0 / fan_in as Real), rng),
            Init::LecunUniform { fan_in } => uniform(n, real::sqrt(3.0 / fan_in as Real), rng),
            Init::Normal { std } => {
                let d = Normal::new(0.0, std as f64).expect("finite std");
                (0..n).map(|_| d.sample(rng) as Real).collect()
            }
            Init::Zeros => alloc::vec![0.0; n],
            Init::Ones => alloc::vec![1.0; n],
        };
        Tensor::new(shape, data).expect("init shape")
    }
}

fn uniform(n: usize, bound: Real, rng: &mut Rng) -> Vec<Real> {
    let d = Uniform::new_inclusive(-bound as f64, bound as f64);
    (0..n).map(|_| d.sample(rng) as Real).collect()
}

/// Per-forward-pass state: mode, the dropout generator and the pending
/// batch-norm running-statistic updates.
pub struct Context<'r> {
    pub mode: Mode,
    rng: &'r mut Rng,
    updates: Vec<RunningUpdate>,
}

/// Running statistics to fold in after a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

impl<'r> Context<'r> {
    pub fn new(mode: Mode, rng: &'r mut Rng) -> Self {
        Context {
            mode,
            rng,
            updates: Vec::new(),
        }
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }

    pub fn take_updates(&mut self) -> Vec<RunningUpdate> {
        core::mem::take(&mut self.updates)
    }
}

/// Applies batch-norm running averages: `r ← m·r + (1−m)·batch`.
pub fn apply_running_updates(store: &mut ParamStore, updates: &[RunningUpdate]) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            let p = store.get_mut(id);
            for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
}

/// Spatial padding policy of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// 2-D convolution with a `[k,k,C_in,C_out]` kernel and per-channel bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
    pub stride: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        padding: Padding,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let w =
            Init::HeUniform { fan_in }.tensor(&[kernel, kernel, in_channels, out_channels], rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true);
        ConvLayer {
            weight,
            bias,
            kernel,
            in_channels,
            out_channels,
            padding,
            stride,
        }
    }

    /// Accepts `[B,H,W,C]` or a single `[H,W,C]` image.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let x = batched(tape, x, 3)?;
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.conv2d(x, w, b, self.stride, self.padding == Padding::Same)
    }

    /// Output `(H', W')` for an input of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        match self.padding {
            Padding::Same => Some((h.div_ceil(self.stride), w.div_ceil(self.stride))),
            Padding::Valid => (h >= self.kernel && w >= self.kernel).then(|| {
                (
                    (h - self.kernel) / self.stride + 1,
                    (w - self.kernel) / self.stride + 1,
                )
            }),
        }
    }
}

/// Lifts a rank-`inner` tensor to a batch of one.
fn batched(tape: &mut Tape<'_>, x: Var, inner: usize) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s.len() == inner {
        let mut shape = alloc::vec![1];
        shape.extend_from_slice(&s);
        tape.reshape(x, &shape)
    } else {
        Ok(x)
    }
}

/// 2×2 max pooling with stride 2.
pub fn maxpool2d(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let x = batched(tape, x, 3)?;
    tape.maxpool2(x)
}

/// Global average pooling: `[B,H,W,C] → [B,C]`, `[B,N,d] → [B,d]`, and the
/// unbatched `[H,W,C] → [C]`.
pub fn global_average_pool(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    match s.len() {
        4 => {
            let flat = tape.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
            tape.mean_axis(flat, 1)
        }
        3 => tape.mean_axis(x, 1),
        _ => Err(Error::dim(
            "global_average_pool",
            format!("unsupported shape {s:?}"),
        )),
    }
}

/// Unbatched global average pooling of an `[H,W,C]` map into `[C]`.
pub fn global_average_pool_image(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::dim(
            "global_average_pool",
            format!("expected [H,W,C], got {s:?}"),
        ));
    }
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    tape.mean_axis(flat, 0)
}

/// Batch normalization over the channel (last) axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                false,
            ),
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, ctx: &mut Context<'_>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, NORM_EPS)?;
                ctx.updates.push(RunningUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Infer => {
                let rm = tape.param(self.running_mean);
                let rv = tape.param(self.running_var);
                let (rm, rv) = (
                    tape.value(rm).data().to_vec(),
                    tape.value(rv).data().to_vec(),
                );
                tape.batch_norm_infer(x, g, b, &rm, &rv, NORM_EPS)
            }
        }
    }
}

/// Affine map over the last axis: `[.., in] → [.., out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.tensor(&[inputs, outputs], rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true));
        Dense {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        if s.last() != Some(&self.inputs) {
            return Err(Error::dim(
                "dense",
                format!("input {s:?} does not end in {} features", self.inputs),
            ));
        }
        let rows = tape.value(x).len() / self.inputs;
        let flat = tape.reshape(x, &[rows, self.inputs])?;
        let w = tape.param(self.weight);
        let mut y = tape.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(b);
            y = tape.add_broadcast(y, b)?;
        }
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = self.outputs;
        tape.reshape(y, &out_shape)
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim]), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, NORM_EPS)
    }
}

/// Inverted dropout: survivors are scaled by `1/(1-rate)` so the expectation
/// is unchanged; inference mode is the identity.
pub fn dropout(tape: &mut Tape<'_>, ctx: &mut Context<'_>, x: Var, rate: Real) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(
            "dropout",
            format!("rate {rate} outside [0,1)"),
        ));
    }
    if ctx.mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let n = tape.value(x).len();
    let keep = 1.0 / (1.0 - rate);
    let rng = ctx.rng();
    let mask = (0..n)
        .map(|_| {
            if (rng.gen::<f64>() as Real) < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    tape.mul_const(x, mask)
}

/// Splits `[H,W,C]` maps into non-overlapping `p×p` patches, projects each
/// flattened patch to `d` and adds a learnable positional table.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub dim: usize,
    pub projection: Dense,
    pub positional: ParamId,
}

impl PatchEmbedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: [usize; 3],
        patch: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let [h, w, c] = input;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::dim(
                "patch_embed",
                format!("{h}x{w} input is not divisible into {patch}x{patch} patches"),
            ));
        }
        let (grid_h, grid_w) = (h / patch, w / patch);
        let flat = patch * patch * c;
        let projection = Dense::new(
            store,
            &format!("{name}.projection"),
            flat,
            dim,
            true,
            Init::LecunUniform { fan_in: flat },
            rng,
        );
        let positional = store.add(
            format!("{name}.positional"),
            Init::Normal { std: 0.02 }.tensor(&[grid_h * grid_w, dim], rng),
            true,
        );
        Ok(PatchEmbedding {
            patch,
            grid_h,
            grid_w,
            channels: c,
            dim,
            projection,
            positional,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn flatten_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// `[B,H,W,C] → [B,N,d]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let x = batched(tape, x, 3)?;
        let flat = self.patches(tape, x)?;
        let y = self.projection.forward(tape, flat)?;
        let pos = tape.param(self.positional);
        tape.add_broadcast(y, pos)
    }

    /// Row-major patch flattening before projection: `[B,H,W,C] → [B,N,p²C]`.
    pub fn patches(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        let p = self.patch;
        if s.len() != 4
            || s[1] != self.grid_h * p
            || s[2] != self.grid_w * p
            || s[3] != self.channels
        {
            return Err(Error::dim(
                "patch_embed",
                format!(
                    "expected [B,{},{},{}], got {s:?}",
                    self.grid_h * p,
                    self.grid_w * p,
                    self.channels
                ),
            ));
        }
        let b = s[0];
        let split = tape.reshape(x, &[b, self.grid_h, p, self.grid_w, p, self.channels])?;
        let grouped = tape.permute(split, &[0, 1, 3, 2, 4, 5])?;
        tape.reshape(grouped, &[b, self.num_patches(), self.flatten_dim()])
    }
}

/// Divisor applied to attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
#[derive(Default)]
pub enum AttnScale {
    /// `√d_k` of each head.
    #[default]
    HeadDim,
    /// `√c` for a fixed constant `c` (32 gives the fixed √32 divisor).
    Fixed(Real),
}

/// Pre-norm multi-head self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
    pub head_dim: usize,
    pub dim: usize,
    pub scale: AttnScale,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        head_dim: usize,
        scale: AttnScale,
        rng: &mut Rng,
    ) -> Self {
        let inner = heads * head_dim;
        let proj =
            |store: &mut ParamStore, part: &str, i: usize, o: usize, bias: bool, rng: &mut Rng| {
                Dense::new(
                    store,
                    &format!("{name}.{part}"),
                    i,
                    o,
                    bias,
                    Init::Normal { std: 0.02 },
                    rng,
                )
            };
        AttentionBlock {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            query: proj(store, "query", dim, inner, false, rng),
            key: proj(store, "key", dim, inner, false, rng),
            value: proj(store, "value", dim, inner, false, rng),
            output: proj(store, "output", inner, dim, true, rng),
            heads,
            head_dim,
            dim,
            scale,
        }
    }

    fn logit_scale(&self) -> Real {
        match self.scale {
            AttnScale::HeadDim => 1.0 / real::sqrt(self.head_dim as Real),
            AttnScale::Fixed(c) => 1.0 / real::sqrt(c),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.forward_with_weights(tape, x).map(|(y, _)| y)
    }

    /// Returns the block output `[B,N,d]` and the attention weights
    /// `[B·h,N,N]`.
    pub fn forward_with_weights(&self, tape: &mut Tape<'_>, x: Var) -> Result<(Var, Var)> {
        let x = batched(tape, x, 2)?;
        let s = tape.value(x).shape().to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::dim(
                "multi_head_attention",
                format!("expected [B,N,{}], got {s:?}", self.dim),
            ));
        }
        let (b, n) = (s[0], s[1]);
        let (h, dk) = (self.heads, self.head_dim);
        let xn = self.norm.forward(tape, x)?;
        let split = |tape: &mut Tape<'_>, proj: &Dense| -> Result<Var> {
            let y = proj.forward(tape, xn)?;
            let y = tape.reshape(y, &[b, n, h, dk])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[b * h, n, dk])
        };
        let q = split(tape, &self.query)?;
        let k = split(tape, &self.key)?;
        let v = split(tape, &self.value)?;
        let logits = tape.batch_matmul(q, k, true)?;
        let logits = tape.scale(logits, self.logit_scale());
        let weights = tape.softmax_lastdim(logits)?;
        let ctx = tape.batch_matmul(weights, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, n, dk])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, h * dk])?;
        let out = self.output.forward(tape, ctx)?;
        Ok((tape.add(x, out)?, weights))
    }
}

/// Pre-norm feed-forward block: `x + W2·dropout(GELU(W1·LN(x) + b1)) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForwardBlock {
    pub norm: LayerNorm,
    pub fc1: Dense,
    pub fc2: Dense,
    pub dropout: Real,
}

impl FeedForwardBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: Real,
        rng: &mut Rng,
    ) -> Self {
        FeedForwardBlock {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            fc1: Dense::new(
                store,
                &format!("{name}.fc1"),
                dim,
                hidden,
                true,
                Init::LecunUniform { fan_in: dim },
                rng,
            ),
            fc2: Dense::new(
                store,
                &format!("{name}.fc2"),
                hidden,
                dim,
                true,
                Init::LecunUniform { fan_in: hidden },
                rng,
            ),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, ctx: &mut Context<'_>, x: Var) -> Result<Var> {
        let xn = self.norm.forward(tape, x)?;
        let hdn = self.fc1.forward(tape, xn)?;
        let hdn = tape.gelu(hdn);
        let hdn = dropout(tape, ctx, hdn, self.dropout)?;
        let y = self.fc2.forward(tape, hdn)?;
        tape.add(x, y)
    }
}

/// Human-readable shape for diagnostics.
pub fn shape_label(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| format!("{d}")).collect();
    parts.join("x")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn store_rng() -> (ParamStore, Rng) {
        (ParamStore::new(), rng_from_seed(3))
    }

    #[test]
    fn identity_kernel_conv() {
        let (mut store, mut rng) = store_rng();
        let conv = ConvLayer::new(&mut store, "c", 1, 1, 1, Padding::Same, 1, &mut rng);
        store.get_mut(conv.weight).value = Tensor::ones(&[1, 1, 1, 1]);
        let input = Tensor::new(&[3, 3, 1], (0..9).map(|x| x as Real).collect()).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(input.clone());
        let y = conv.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), input.data());
    }

    #[test]
    fn all_ones_kernel_on_constant_input() {
        let (mut store, mut rng) = store_rng();
        let conv = ConvLayer::new(&mut store, "c", 3, 2, 1, Padding::Valid, 1, &mut rng);
        store.get_mut(conv.weight).value = Tensor::ones(&[3, 3, 2, 1]);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::full(&[5, 5, 2], 0.5));
        let y = conv.forward(&mut tape, x).unwrap();
        // 9 taps · v · C_in
        assert_eq!(tape.value(y).shape(), &[1, 3, 3, 1]);
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 9.0 * 0.5 * 2.0).abs() < 1e-12));
    }

    #[test]
    fn conv_channel_mismatch() {
        let (mut store, mut rng) = store_rng();
        let conv = ConvLayer::new(&mut store, "c", 3, 3, 4, Padding::Same, 1, &mut rng);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(&[4, 4, 2]));
        assert!(matches!(
            conv.forward(&mut tape, x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn same_padding_full_size_conv_shape() {
        let (mut store, mut rng) = store_rng();
        let conv = ConvLayer::new(&mut store, "c", 3, 3, 32, Padding::Same, 1, &mut rng);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(&[128, 128, 3]));
        let y = conv.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 128, 128, 32]);
        let p = maxpool2d(&mut tape, y).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 64, 64, 32]);
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2, 1], alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = maxpool2d(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let c = tape.constant(Tensor::full(&[4, 4, 2], 0.3));
        let y = maxpool2d(&mut tape, c).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.3));
        let odd = tape.constant(Tensor::zeros(&[3, 4, 1]));
        assert!(matches!(
            maxpool2d(&mut tape, odd),
            Err(Error::Dimension { .. })
        ));
    }

    fn bn_run(input: Tensor, beta: Real, mode: Mode) -> Tensor {
        let mut store = ParamStore::new();
        let c = *input.shape().last().unwrap();
        let bn = BatchNorm::new(&mut store, "bn", c);
        store.get_mut(bn.beta).value = Tensor::full(&[c], beta);
        let mut rng = rng_from_seed(0);
        let mut ctx = Context::new(mode, &mut rng);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(input);
        let y = bn.forward(&mut tape, &mut ctx, x).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn batchnorm_examples() {
        let out = bn_run(Tensor::full(&[4, 3], 2.0), 0.5, Mode::Train);
        assert!(out.data().iter().all(|&v| v == 0.5));

        let out = bn_run(
            Tensor::new(&[2, 1], alloc::vec![-1.0, 1.0]).unwrap(),
            0.0,
            Mode::Train,
        );
        // x̂ = ±1/√(1+1e-5)
        let expect = 1.0 / (1.0 + 1e-5 as Real).sqrt();
        assert!((out.data()[0] + expect).abs() < 1e-12);
        assert!((out.data()[1] - expect).abs() < 1e-12);

        // fresh running stats are mean 0 / var 1: affine only (up to ε)
        let x = Tensor::new(&[1, 2], alloc::vec![3.0, -2.0]).unwrap();
        let out = bn_run(x, 0.25, Mode::Infer);
        let s = 1.0 / (1.0 + 1e-5 as Real).sqrt();
        assert!((out.data()[0] - (3.0 * s + 0.25)).abs() < 1e-12);
        assert!((out.data()[1] - (-2.0 * s + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_rejects_single_sample_training() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut rng = rng_from_seed(0);
        let mut ctx = Context::new(Mode::Train, &mut rng);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(&[1, 4, 4, 2]));
        assert!(matches!(
            bn.forward(&mut tape, &mut ctx, x),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut rng = rng_from_seed(0);
        let mut ctx = Context::new(Mode::Train, &mut rng);
        let updates = {
            let mut tape = Tape::with_params(&store);
            let x = tape.constant(Tensor::new(&[2, 1], alloc::vec![1.0, 3.0]).unwrap());
            bn.forward(&mut tape, &mut ctx, x).unwrap();
            ctx.take_updates()
        };
        apply_running_updates(&mut store, &updates);
        assert!((store.value(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((store.value(bn.running_var).data()[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn gap_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2, 1], alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = global_average_pool_image(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let x = tape.constant(Tensor::full(&[32, 32, 256], 0.7));
        let y = global_average_pool_image(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[256]);
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-12));
    }

    fn ln_run(values: alloc::vec::Vec<Real>) -> Tensor {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", values.len());
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::new(&[values.len()], values).unwrap());
        let y = ln.forward(&mut tape, x).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn layer_norm_examples() {
        assert!(ln_run(alloc::vec![4.0; 5]).data().iter().all(|&v| v == 0.0));
        let y = ln_run(alloc::vec![1.0, 3.0]);
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);
        let mut rng = rng_from_seed(11);
        for _ in 0..100 {
            let v: alloc::vec::Vec<Real> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let y = ln_run(v);
            let mean = y.sum() / 16.0;
            let var = y
                .data()
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .sum::<Real>()
                / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn patch_counts() {
        let mut rng = rng_from_seed(1);
        let mut store = ParamStore::new();
        let vit = PatchEmbedding::new(&mut store, "p", [128, 128, 3], 16, 32, &mut rng).unwrap();
        assert_eq!((vit.grid_h, vit.grid_w, vit.num_patches()), (8, 8, 64));
        let hyb = PatchEmbedding::new(&mut store, "h", [32, 32, 256], 16, 256, &mut rng).unwrap();
        assert_eq!((hyb.num_patches(), hyb.flatten_dim()), (4, 65536));
        let one = PatchEmbedding::new(&mut store, "o", [8, 8, 2], 8, 4, &mut rng).unwrap();
        assert_eq!(one.num_patches(), 1);
        assert!(PatchEmbedding::new(&mut store, "bad", [30, 32, 3], 16, 4, &mut rng).is_err());
    }

    #[test]
    fn single_patch_equals_whole_image() {
        let mut rng = rng_from_seed(1);
        let mut store = ParamStore::new();
        let pe = PatchEmbedding::new(&mut store, "p", [4, 4, 2], 4, 3, &mut rng).unwrap();
        let img = Tensor::new(&[4, 4, 2], (0..32).map(|x| x as Real).collect()).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(img.clone().reshape(&[1, 4, 4, 2]).unwrap());
        let p = pe.patches(&mut tape, x).unwrap();
        assert_eq!(tape.value(p).data(), img.data());
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut rng = rng_from_seed(5);
        let mut store = ParamStore::new();
        let blk = AttentionBlock::new(&mut store, "a", 8, 2, 4, AttnScale::HeadDim, &mut rng);
        store.get_mut(blk.query.weight).value = Tensor::zeros(&[8, 8]);
        store.get_mut(blk.key.weight).value = Tensor::zeros(&[8, 8]);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Init::Normal { std: 1.0 }.tensor(&[2, 5, 8], &mut rng));
        let (_, w) = blk.forward_with_weights(&mut tape, x).unwrap();
        assert!(tape
            .value(w)
            .data()
            .iter()
            .all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn single_token_attention() {
        let mut rng = rng_from_seed(6);
        let mut store = ParamStore::new();
        let blk = AttentionBlock::new(&mut store, "a", 4, 2, 2, AttnScale::HeadDim, &mut rng);
        let input = Init::Normal { std: 1.0 }.tensor(&[1, 4], &mut rng);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(input.clone());
        let (y, w) = blk.forward_with_weights(&mut tape, x).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v == 1.0));
        // residual + output projection of the value vector
        let xn = tape.value(x).clone();
        let mut t2 = Tape::with_params(&store);
        let xv = t2.constant(xn.reshape(&[1, 1, 4]).unwrap());
        let n = blk.norm.forward(&mut t2, xv).unwrap();
        let v = blk.value.forward(&mut t2, n).unwrap();
        let o = blk.output.forward(&mut t2, v).unwrap();
        let expected: Vec<Real> = input
            .data()
            .iter()
            .zip(t2.value(o).data())
            .map(|(a, b)| a + b)
            .collect();
        let got = tape.value(y).data();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_hidden_ffn_adds_output_bias() {
        let mut rng = rng_from_seed(8);
        let mut store = ParamStore::new();
        let ffn = FeedForwardBlock::new(&mut store, "f", 4, 6, 0.5, &mut rng);
        store.get_mut(ffn.fc1.weight).value = Tensor::zeros(&[4, 6]);
        store.get_mut(ffn.fc2.bias.unwrap()).value = Tensor::full(&[4], 0.75);
        let input = Init::Normal { std: 1.0 }.tensor(&[1, 3, 4], &mut rng);
        let mut ctx = Context::new(Mode::Infer, &mut rng);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(input.clone());
        let y = ffn.forward(&mut tape, &mut ctx, x).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(input.data()) {
            assert_eq!(*o, i + 0.75);
        }
    }

    #[test]
    fn dropout_contracts() {
        let mut rng = rng_from_seed(9);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[100_000]));
        let mut ctx = Context::new(Mode::Train, &mut rng);
        assert!(dropout(&mut tape, &mut ctx, x, 1.0).is_err());
        let same = dropout(&mut tape, &mut ctx, x, 0.0).unwrap();
        assert_eq!(same, x);
        let y = dropout(&mut tape, &mut ctx, x, 0.1).unwrap();
        let survivors = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as Real / 100_000.0;
        assert!((frac - 0.9).abs() < 0.01, "{frac}");
        let mut infer = Context::new(Mode::Infer, &mut rng);
        assert_eq!(dropout(&mut tape, &mut infer, x, 0.5).unwrap(), x);
    }
}
