//! Declarative model specifications and the builders for the CNN, ViT and
//! hybrid CNN-ViT classifiers.
//!
//! A [`ModelSpec`] is three optional stages: a convolutional stage, a
//! transformer stage (patch embedding + encoder blocks) and a classification
//! head. The CNN uses the first and last, the ViT the last two, the hybrid
//! all three. [`ModelSpec::validate`] walks the shape chain before any
//! parameter is allocated.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::layers::{
    self, AttentionBlock, AttnScale, BatchNorm, Context, ConvLayer, Dense, FeedForwardBlock, Init,
    Padding, PatchEmbedding,
};
use crate::real::Real;
use crate::{rng_from_seed, Error, Mode, Result, Tensor};

/// Probability at or above which a sample is called positive.
pub const DECISION_THRESHOLD: Real = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnn,
    Vit,
    Hybrid,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cnn, ModelKind::Vit, ModelKind::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Vit => "vit",
            ModelKind::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Some(ModelKind::Cnn),
            "vit" => Some(ModelKind::Vit),
            "hybrid" => Some(ModelKind::Hybrid),
            _ => None,
        }
    }
}

impl core::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Convolutional blocks: conv → (batchnorm) → ReLU → (2×2 max pool).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStageSpec {
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub batchnorm: Vec<bool>,
    pub pool: Vec<bool>,
}

/// Patch embedding followed by pre-norm encoder blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub ffn_dropout: Real,
    #[serde(default)]
    pub attn_scale: AttnScale,
}

/// Pooling head: GAP → dropout → optional GELU MLP → one sigmoid unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub dropout: Real,
    pub mlp: Vec<usize>,
    pub mlp_dropout: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_shape: [usize; 3],
    pub conv: Option<ConvStageSpec>,
    pub transformer: Option<TransformerSpec>,
    pub head: HeadSpec,
}

/// Named intermediate shapes produced by [`ModelSpec::validate`].
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTrace {
    pub stages: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    pub fn shape_of(&self, stage: &str) -> Option<&[usize]> {
        self.stages
            .iter()
            .find(|(n, _)| n == stage)
            .map(|(_, s)| s.as_slice())
    }
}

impl ModelSpec {
    /// CNN: 32/64 filter blocks with batchnorm and pooling, then 128/256
    /// filter blocks without either; GAP, dropout 0.1, sigmoid.
    pub fn cnn() -> Self {
        ModelSpec {
            kind: ModelKind::Cnn,
            input_shape: [128, 128, 3],
            conv: Some(ConvStageSpec {
                filters: vec![32, 64, 128, 256],
                kernel: 3,
                batchnorm: vec![true, true, false, false],
                pool: vec![true, true, false, false],
            }),
            transformer: None,
            head: HeadSpec {
                dropout: 0.1,
                mlp: vec![],
                mlp_dropout: 0.0,
            },
        }
    }

    /// ViT: 16×16 patches embedded to 32 dims, 4 blocks of 2 heads × 16,
    /// GAP, a 128 → 64 GELU MLP with dropout 0.3, sigmoid.
    pub fn vit() -> Self {
        ModelSpec {
            kind: ModelKind::Vit,
            input_shape: [128, 128, 3],
            conv: None,
            transformer: Some(TransformerSpec {
                patch: 16,
                embed_dim: 32,
                heads: 2,
                head_dim: 16,
                blocks: 4,
                ffn_dim: 128,
                ffn_dropout: 0.1,
                attn_scale: AttnScale::HeadDim,
            }),
            head: HeadSpec {
                dropout: 0.0,
                mlp: vec![128, 64],
                mlp_dropout: 0.3,
            },
        }
    }

    /// Hybrid: 32/64/128/256 filter blocks, all with batchnorm, pooling after
    /// the first two (128² → 32²), then 16×16 patches over the 32×32×256 map
    /// projected to 256 dims, 4 blocks of 4 heads × 64, FFN dropout 0.5, GAP,
    /// sigmoid.
    pub fn hybrid() -> Self {
        ModelSpec {
            kind: ModelKind::Hybrid,
            input_shape: [128, 128, 3],
            conv: Some(ConvStageSpec {
                filters: vec![32, 64, 128, 256],
                kernel: 3,
                batchnorm: vec![true, true, true, true],
                pool: vec![true, true, false, false],
            }),
            transformer: Some(TransformerSpec {
                patch: 16,
                embed_dim: 256,
                heads: 4,
                head_dim: 64,
                blocks: 4,
                ffn_dim: 1024,
                ffn_dropout: 0.5,
                attn_scale: AttnScale::HeadDim,
            }),
            head: HeadSpec {
                dropout: 0.0,
                mlp: vec![],
                mlp_dropout: 0.0,
            },
        }
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Cnn => Self::cnn(),
            ModelKind::Vit => Self::vit(),
            ModelKind::Hybrid => Self::hybrid(),
        }
    }

    pub fn with_input(mut self, shape: [usize; 3]) -> Self {
        self.input_shape = shape;
        self
    }

    /// Walks the full shape chain; fails on the first inconsistent layer.
    pub fn validate(&self) -> Result<ShapeTrace> {
        let fail = |layer: &str, detail: String| Error::Validation {
            layer: layer.to_string(),
            detail,
        };
        let mut stages = Vec::new();
        let [h0, w0, c0] = self.input_shape;
        if h0 == 0 || w0 == 0 || c0 == 0 {
            return Err(fail(
                "input",
                format!("input shape {:?} has a zero dimension", self.input_shape),
            ));
        }
        stages.push(("input".to_string(), vec![h0, w0, c0]));
        match (self.kind, &self.conv, &self.transformer) {
            (ModelKind::Cnn, Some(_), None)
            | (ModelKind::Vit, None, Some(_))
            | (ModelKind::Hybrid, Some(_), Some(_)) => {}
            _ => {
                return Err(fail(
                    "spec",
                    format!("stage layout does not match model kind {}", self.kind),
                ))
            }
        }
        let (mut h, mut w, mut c) = (h0, w0, c0);
        if let Some(conv) = &self.conv {
            let n = conv.filters.len();
            if n == 0 {
                return Err(fail("conv", "no convolutional blocks".into()));
            }
            if conv.batchnorm.len() != n || conv.pool.len() != n {
                return Err(fail(
                    "conv",
                    format!(
                        "{n} filter counts but {} batchnorm flags and {} pool flags",
                        conv.batchnorm.len(),
                        conv.pool.len()
                    ),
                ));
            }
            if conv.kernel == 0 || conv.kernel % 2 == 0 {
                return Err(fail("conv", format!("kernel {} must be odd", conv.kernel)));
            }
            for (i, &f) in conv.filters.iter().enumerate() {
                let name = format!("block{}", i + 1);
                if f == 0 {
                    return Err(fail(&name, "zero filters".into()));
                }
                c = f;
                if conv.pool[i] {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(fail(
                            &name,
                            format!("cannot 2x2-pool a {h}x{w}x{c} feature map (odd side)"),
                        ));
                    }
                    h /= 2;
                    w /= 2;
                }
                stages.push((name, vec![h, w, c]));
            }
            stages.push(("conv_stage".to_string(), vec![h, w, c]));
        }
        let mut features = c;
        if let Some(t) = &self.transformer {
            if t.patch == 0 || h % t.patch != 0 || w % t.patch != 0 {
                return Err(fail(
                    "patch_embed",
                    format!(
                        "{h}x{w}x{c} map is not divisible into {0}x{0} patches",
                        t.patch
                    ),
                ));
            }
            if t.embed_dim < 2 {
                return Err(fail(
                    "patch_embed",
                    format!("embedding dim {} < 2", t.embed_dim),
                ));
            }
            if t.heads == 0 || t.head_dim == 0 || t.heads * t.head_dim != t.embed_dim {
                return Err(fail(
                    "attention",
                    format!(
                        "{} heads x {} dims does not equal embedding dim {}",
                        t.heads, t.head_dim, t.embed_dim
                    ),
                ));
            }
            if t.blocks == 0 || t.ffn_dim == 0 {
                return Err(fail(
                    "transformer",
                    "needs at least one block and a non-empty FFN".into(),
                ));
            }
            check_rate("transformer", t.ffn_dropout)?;
            if let AttnScale::Fixed(v) = t.attn_scale {
                if !(v > 0.0) {
                    return Err(fail(
                        "attention",
                        format!("fixed scale {v} must be positive"),
                    ));
                }
            }
            let n = (h / t.patch) * (w / t.patch);
            stages.push(("patch_flatten".to_string(), vec![n, t.patch * t.patch * c]));
            stages.push(("patch_embed".to_string(), vec![n, t.embed_dim]));
            for i in 0..t.blocks {
                stages.push((format!("transformer{}", i + 1), vec![n, t.embed_dim]));
            }
            features = t.embed_dim;
        }
        stages.push(("gap".to_string(), vec![features]));
        check_rate("head", self.head.dropout)?;
        check_rate("head", self.head.mlp_dropout)?;
        for (i, &u) in self.head.mlp.iter().enumerate() {
            if u == 0 {
                return Err(fail("head", format!("MLP layer {} has zero units", i + 1)));
            }
            stages.push((format!("mlp{}", i + 1), vec![u]));
        }
        stages.push(("output".to_string(), vec![1]));
        Ok(ShapeTrace { stages })
    }

    /// Trainable scalar count derived from the spec alone.
    pub fn parameter_count(&self) -> Result<usize> {
        let trace = self.validate()?;
        let mut total = 0;
        let mut c = self.input_shape[2];
        if let Some(conv) = &self.conv {
            for (i, &f) in conv.filters.iter().enumerate() {
                total += conv.kernel * conv.kernel * c * f + f;
                if conv.batchnorm[i] {
                    total += 2 * f;
                }
                c = f;
            }
        }
        let mut features = c;
        if let Some(t) = &self.transformer {
            let [n, flat] = trace.shape_of("patch_flatten").unwrap() else {
                unreachable!()
            };
            let d = t.embed_dim;
            let inner = t.heads * t.head_dim;
            total += flat * d + d + n * d;
            let attn = 2 * d + 3 * d * inner + inner * d + d;
            let ffn = 2 * d + d * t.ffn_dim + t.ffn_dim + t.ffn_dim * d + d;
            total += t.blocks * (attn + ffn);
            features = d;
        }
        for &u in &self.head.mlp {
            total += features * u + u;
            features = u;
        }
        Ok(total + features + 1)
    }
}

fn check_rate(layer: &str, rate: Real) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Validation {
            layer: layer.to_string(),
            detail: format!("dropout rate {rate} outside [0,1)"),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(ConvLayer),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool,
    PatchEmbed(PatchEmbedding),
    Attention(AttentionBlock),
    FeedForward(FeedForwardBlock),
    Gap,
    Dropout(Real),
    Dense(Dense),
    Gelu,
}

/// A built classifier: ordered layers plus the parameter registry.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    layers: Vec<Layer>,
    trace: ShapeTrace,
}

pub fn build_cnn(spec: &ModelSpec, seed: u64) -> Result<Model> {
    expect_kind(spec, ModelKind::Cnn)?;
    Model::build(spec, seed)
}

pub fn build_vit(spec: &ModelSpec, seed: u64) -> Result<Model> {
    expect_kind(spec, ModelKind::Vit)?;
    Model::build(spec, seed)
}

pub fn build_hybrid(spec: &ModelSpec, seed: u64) -> Result<Model> {
    expect_kind(spec, ModelKind::Hybrid)?;
    Model::build(spec, seed)
}

fn expect_kind(spec: &ModelSpec, kind: ModelKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::Validation {
            layer: "spec".into(),
            detail: format!("expected a {kind} spec, got {}", spec.kind),
        });
    }
    Ok(())
}

impl Model {
    /// Validates `spec` and allocates parameters initialized from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        let trace = spec.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let [mut h, mut w, mut c] = spec.input_shape;
        if let Some(conv) = &spec.conv {
            for (i, &f) in conv.filters.iter().enumerate() {
                let name = format!("block{}", i + 1);
                layers.push(Layer::Conv(ConvLayer::new(
                    &mut store,
                    &format!("{name}.conv"),
                    conv.kernel,
                    c,
                    f,
                    Padding::Same,
                    1,
                    &mut rng,
                )));
                if conv.batchnorm[i] {
                    layers.push(Layer::BatchNorm(BatchNorm::new(
                        &mut store,
                        &format!("{name}.bn"),
                        f,
                    )));
                }
                layers.push(Layer::Relu);
                if conv.pool[i] {
                    layers.push(Layer::MaxPool);
                    h /= 2;
                    w /= 2;
                }
                c = f;
            }
        }
        let mut features = c;
        if let Some(t) = &spec.transformer {
            layers.push(Layer::PatchEmbed(PatchEmbedding::new(
                &mut store,
                "embed",
                [h, w, c],
                t.patch,
                t.embed_dim,
                &mut rng,
            )?));
            for i in 0..t.blocks {
                let name = format!("transformer{}", i + 1);
                layers.push(Layer::Attention(AttentionBlock::new(
                    &mut store,
                    &format!("{name}.attn"),
                    t.embed_dim,
                    t.heads,
                    t.head_dim,
                    t.attn_scale,
                    &mut rng,
                )));
                layers.push(Layer::FeedForward(FeedForwardBlock::new(
                    &mut store,
                    &format!("{name}.ffn"),
                    t.embed_dim,
                    t.ffn_dim,
                    t.ffn_dropout,
                    &mut rng,
                )));
            }
            features = t.embed_dim;
        }
        layers.push(Layer::Gap);
        if spec.head.dropout > 0.0 {
            layers.push(Layer::Dropout(spec.head.dropout));
        }
        for (i, &u) in spec.head.mlp.iter().enumerate() {
            layers.push(Layer::Dense(Dense::new(
                &mut store,
                &format!("head.mlp{}", i + 1),
                features,
                u,
                true,
                Init::LecunUniform { fan_in: features },
                &mut rng,
            )));
            layers.push(Layer::Gelu);
            if spec.head.mlp_dropout > 0.0 {
                layers.push(Layer::Dropout(spec.head.mlp_dropout));
            }
            features = u;
        }
        layers.push(Layer::Dense(Dense::new(
            &mut store,
            "head.out",
            features,
            1,
            true,
            Init::Zeros,
            &mut rng,
        )));
        Ok(Model {
            spec: spec.clone(),
            params: store,
            layers,
            trace,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn shape_trace(&self) -> &ShapeTrace {
        &self.trace
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Number of convolution blocks.
    pub fn conv_blocks(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv(_)))
            .count()
    }

    pub fn transformer_blocks(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Attention(_)))
            .count()
    }

    /// Sequence length seen by the transformer stage, if any.
    pub fn sequence_length(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::PatchEmbed(p) => Some(p.num_patches()),
            _ => None,
        })
    }

    pub fn patch_embedding(&self) -> Option<&PatchEmbedding> {
        self.layers.iter().find_map(|l| match l {
            Layer::PatchEmbed(p) => Some(p),
            _ => None,
        })
    }

    /// Parameters of the final one-unit dense layer (weight, bias).
    pub fn output_layer(&self) -> (crate::autograd::ParamId, crate::autograd::ParamId) {
        let dense = self
            .layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d),
                _ => None,
            })
            .expect("model always ends in a dense layer");
        (dense.weight, dense.bias.expect("output layer has a bias"))
    }

    /// Records the forward pass of a `[B,H,W,C]` batch and returns the
    /// `[B,1]` probabilities.
    pub fn forward(&self, tape: &mut Tape<'_>, ctx: &mut Context<'_>, x: Var) -> Result<Var> {
        let z = self.forward_logits(tape, ctx, x)?;
        Ok(tape.sigmoid(z))
    }

    /// As [`Model::forward`] but stops before the output sigmoid.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut Context<'_>,
        x: Var,
    ) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 4 || s[1..] != self.spec.input_shape {
            return Err(Error::dim(
                "model",
                format!(
                    "expected [B,{},{},{}] input, got {s:?}",
                    self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2]
                ),
            ));
        }
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(tape, h)?,
                Layer::BatchNorm(b) => b.forward(tape, ctx, h)?,
                Layer::Relu => tape.relu(h),
                Layer::MaxPool => layers::maxpool2d(tape, h)?,
                Layer::PatchEmbed(p) => p.forward(tape, h)?,
                Layer::Attention(a) => a.forward(tape, h)?,
                Layer::FeedForward(f) => f.forward(tape, ctx, h)?,
                Layer::Gap => layers::global_average_pool(tape, h)?,
                Layer::Dropout(r) => layers::dropout(tape, ctx, h, *r)?,
                Layer::Dense(d) => d.forward(tape, h)?,
                Layer::Gelu => tape.gelu(h),
            };
        }
        Ok(h)
    }

    /// Inference-mode probabilities for a batch `[B,H,W,C]`.
    pub fn predict_batch(&self, batch: Tensor) -> Result<Vec<Real>> {
        let mut rng = rng_from_seed(0);
        let mut ctx = Context::new(Mode::Infer, &mut rng);
        let mut tape = Tape::with_params(&self.params);
        let x = tape.constant(batch);
        let y = self.forward(&mut tape, &mut ctx, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Probabilities for many images, evaluated in chunks of `chunk`.
    pub fn predict_many(&self, images: &[&Tensor], chunk: usize) -> Result<Vec<Real>> {
        let mut out = Vec::with_capacity(images.len());
        for group in images.chunks(chunk.max(1)) {
            out.extend(self.predict_batch(Tensor::stack(group)?)?);
        }
        Ok(out)
    }

    /// Inference-mode probability for one `[H,W,C]` image.
    pub fn predict(&self, image: &Tensor) -> Result<Real> {
        if image.shape() != self.spec.input_shape {
            return Err(Error::dim(
                "predict",
                format!(
                    "expected image {:?}, got {:?}",
                    self.spec.input_shape,
                    image.shape()
                ),
            ));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        Ok(self.predict_batch(image.reshape(&shape)?)?[0])
    }

    /// Replaces parameter values by name; every stored name must be present
    /// with a matching shape.
    pub fn load_parameters<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in entries {
            let id = self.params.find(name).ok_or_else(|| Error::Validation {
                layer: name.to_string(),
                detail: "parameter not present in this model".into(),
            })?;
            let p = self.params.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::mismatch(
                    "load_parameters",
                    p.value.shape(),
                    value.shape(),
                ));
            }
            p.value = value.clone();
            seen[id.index()] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Validation {
                layer: self.params.iter().nth(missing).unwrap().1.name.clone(),
                detail: "parameter missing from the loaded set".into(),
            });
        }
        Ok(())
    }
}

/// Hard label for a probability at the shared threshold.
pub fn classify(p: Real) -> u8 {
    u8::from(p >= DECISION_THRESHOLD)
}
