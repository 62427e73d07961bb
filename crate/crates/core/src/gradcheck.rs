//! Central finite-difference checks of the reverse pass. Each case draws
//! random small instances of one layer (or one whole model), perturbs a few
//! random coordinates of every input and trainable parameter, and compares
//! the numeric slope with the analytic gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autograd::{ParamStore, Tape, Var};
use crate::layers::{
    dropout, global_average_pool, maxpool2d, AttentionBlock, AttnScale, BatchNorm, Context,
    ConvLayer, Dense, FeedForwardBlock, Init, LayerNorm, Padding, PatchEmbedding,
};
use crate::models::{ConvStageSpec, HeadSpec, Model, ModelKind, ModelSpec, TransformerSpec};
use crate::{rng_from_seed, Mode, Real, Result, Rng, Tensor};

pub const STEP: Real = 1e-5;
pub const TOL: Real = 1e-4;
/// Random instances drawn per case.
pub const INSTANCES: u64 = 100;
const COORDS: usize = 4;

type Forward<'a> = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var> + 'a;

fn rand_tensor(shape: &[usize], rng: &mut Rng, lo: Real, hi: Real) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Replaces every trainable value by a draw from `U(-1, 1)` so gradients
/// are generic rather than tied to initialization scales.
fn scramble(store: &mut ParamStore, rng: &mut Rng) {
    for p in store.iter_mut() {
        if p.trainable {
            let shape = p.value.shape().to_vec();
            p.value = rand_tensor(&shape, rng, -1.0, 1.0);
        }
    }
}

/// `Σ rᵢ·outᵢ` for fixed random weights `r`, or the output itself when it is
/// already a scalar loss.
type Grads = (Vec<Tensor>, Vec<Option<Tensor>>);

fn loss(
    store: &ParamStore,
    inputs: &[Tensor],
    f: &Forward<'_>,
    weights: &[Real],
) -> (Real, Option<Grads>) {
    let mut tape = Tape::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let l = if tape.value(out).is_scalar() && weights.is_empty() {
        out
    } else {
        let m = tape.mul_const(out, weights.to_vec()).unwrap();
        tape.sum(m)
    };
    let value = tape.value(l).item();
    let grads = tape.backward(l).unwrap();
    let wrt = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    let params = store
        .iter()
        .map(|(id, _)| grads.param(id).cloned())
        .collect();
    (value, Some((wrt, params)))
}

fn value_only(store: &ParamStore, inputs: &[Tensor], f: &Forward<'_>, weights: &[Real]) -> Real {
    loss(store, inputs, f, weights).0
}

/// Relative error with a floor of `1e-4` on the denominator, so gradients
/// that are zero up to rounding compare on an absolute `1e-8` scale.
fn rel_err(a: Real, n: Real) -> Real {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Outcome of one case.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: u64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a ReLU or max-pool switch lies within the
    /// difference step.
    pub kinks: usize,
    pub max_rel_err: Real,
    /// The first few coordinates above tolerance.
    pub failures: Vec<String>,
}

impl CaseReport {
    /// No coordinate above tolerance, at most 1% skipped at kinks.
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
            && self.checked >= self.instances as usize
            && self.kinks * 100 <= self.checked
    }
}

type Tally = CaseReport;

/// Central differences at `h` and `h/4` agree to rounding for a smooth
/// function. When they do not, a ReLU or max-pool switch lies inside
/// `[x-h, x+h]` and the coordinate is not differentiable there.
fn numeric(at: &dyn Fn(Real) -> Real) -> Option<Real> {
    let central = |h: Real| (at(h) - at(-h)) / (2.0 * h);
    let (wide, narrow) = (central(STEP), central(STEP / 4.0));
    (rel_err(wide, narrow) <= TOL / 10.0).then_some(wide)
}

/// Compares analytic and numeric gradients on a few random coordinates of
/// every input and every trainable parameter.
fn check(
    label: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    f: &Forward<'_>,
    rng: &mut Rng,
    tally: &mut Tally,
) {
    let out_len = {
        let mut tape = Tape::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars).unwrap();
        if tape.value(out).is_scalar() {
            0
        } else {
            tape.value(out).len()
        }
    };
    let weights: Vec<Real> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, grads) = loss(store, inputs, f, &weights);
    let (g_in, g_par) = grads.unwrap();
    let mut compare = |what: &str, a: Real, at: &dyn Fn(Real) -> Real| {
        tally.checked += 1;
        match numeric(at) {
            Some(n) => {
                let e = rel_err(a, n);
                tally.max_rel_err = tally.max_rel_err.max(e);
                if e > TOL && tally.failures.len() < 5 {
                    tally
                        .failures
                        .push(format!("{label}: {what} analytic {a} numeric {n}"));
                }
            }
            None => tally.kinks += 1,
        }
    };

    for (k, t) in inputs.iter().enumerate() {
        for _ in 0..COORDS.min(t.len()) {
            let i = rng.gen_range(0..t.len());
            let at = |h: Real| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[i] += h;
                value_only(store, &moved, f, &weights)
            };
            compare(&format!("input {k}[{i}]"), g_in[k].data()[i], &at);
        }
    }
    for (j, (id, p)) in store.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let a_full = g_par[j]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for _ in 0..COORDS.min(p.value.len()) {
            let i = rng.gen_range(0..p.value.len());
            let at = |h: Real| {
                let mut moved = store.clone();
                moved.get_mut(id).value.data_mut()[i] += h;
                value_only(&moved, inputs, f, &weights)
            };
            compare(&format!("{}[{i}]", p.name), a_full.data()[i], &at);
        }
    }
}

fn instances(
    name: &'static str,
    seed: u64,
    mut body: impl FnMut(&mut Rng, &mut Tally),
) -> CaseReport {
    let mut tally = CaseReport {
        name,
        instances: INSTANCES,
        ..CaseReport::default()
    };
    for i in 0..INSTANCES {
        let mut rng = rng_from_seed(seed * 1_000_003 + i);
        body(&mut rng, &mut tally);
    }
    tally
}

pub fn conv2d() -> CaseReport {
    instances("conv2d", 1, |rng, tally| {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let padding = if rng.gen_bool(0.5) {
            Padding::Same
        } else {
            Padding::Valid
        };
        let stride = rng.gen_range(1..3);
        let (h, w) = (rng.gen_range(k..k + 4), rng.gen_range(k..k + 4));
        let mut store = ParamStore::new();
        let conv = ConvLayer::new(&mut store, "c", k, cin, cout, padding, stride, rng);
        scramble(&mut store, rng);
        let x = rand_tensor(&[rng.gen_range(1..3), h, w, cin], rng, -1.0, 1.0);
        check(
            "conv2d",
            &store,
            &[x],
            &|t, v| conv.forward(t, v[0]),
            rng,
            tally,
        );
    })
}

pub fn maxpool() -> CaseReport {
    instances("maxpool", 2, |rng, tally| {
        let (h, w, c) = (
            2 * rng.gen_range(1..4),
            2 * rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let x = rand_tensor(&[rng.gen_range(1..3), h, w, c], rng, -1.0, 1.0);
        check(
            "maxpool",
            &ParamStore::new(),
            &[x],
            &|t, v| maxpool2d(t, v[0]),
            rng,
            tally,
        );
    })
}

pub fn batchnorm_train_and_infer() -> CaseReport {
    instances("batchnorm_train_and_infer", 3, |rng, tally| {
        let c = rng.gen_range(1..4);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", c);
        scramble(&mut store, rng);
        store.get_mut(bn.running_mean).value = rand_tensor(&[c], rng, -0.5, 0.5);
        store.get_mut(bn.running_var).value = rand_tensor(&[c], rng, 0.5, 2.0);
        let x = rand_tensor(
            &[
                rng.gen_range(2..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                c,
            ],
            rng,
            -2.0,
            2.0,
        );
        for mode in [Mode::Train, Mode::Infer] {
            let f = |t: &mut Tape<'_>, v: &[Var]| {
                let mut r = rng_from_seed(0);
                let mut ctx = Context::new(mode, &mut r);
                bn.forward(t, &mut ctx, v[0])
            };
            check(
                "batchnorm",
                &store,
                std::slice::from_ref(&x),
                &f,
                rng,
                tally,
            );
        }
    })
}

pub fn dense() -> CaseReport {
    instances("dense", 4, |rng, tally| {
        let (i, o) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let mut store = ParamStore::new();
        let d = Dense::new(
            &mut store,
            "d",
            i,
            o,
            rng.gen_bool(0.7),
            Init::LecunUniform { fan_in: i },
            rng,
        );
        scramble(&mut store, rng);
        let shape: Vec<usize> = if rng.gen_bool(0.5) {
            vec![rng.gen_range(1..4), i]
        } else {
            vec![2, rng.gen_range(1..4), i]
        };
        let x = rand_tensor(&shape, rng, -1.0, 1.0);
        check(
            "dense",
            &store,
            &[x],
            &|t, v| d.forward(t, v[0]),
            rng,
            tally,
        );
    })
}

pub fn layer_norm() -> CaseReport {
    instances("layer_norm", 5, |rng, tally| {
        let d = rng.gen_range(2..7);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", d);
        scramble(&mut store, rng);
        let x = rand_tensor(
            &[rng.gen_range(1..3), rng.gen_range(1..4), d],
            rng,
            -2.0,
            2.0,
        );
        check(
            "layer_norm",
            &store,
            &[x],
            &|t, v| ln.forward(t, v[0]),
            rng,
            tally,
        );
    })
}

pub fn activations_and_softmax() -> CaseReport {
    instances("activations_and_softmax", 6, |rng, tally| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        let x = rand_tensor(&shape, rng, -3.0, 3.0);
        let s = ParamStore::new();
        check(
            "relu",
            &s,
            std::slice::from_ref(&x),
            &|t, v| Ok(t.relu(v[0])),
            rng,
            tally,
        );
        check(
            "gelu",
            &s,
            std::slice::from_ref(&x),
            &|t, v| Ok(t.gelu(v[0])),
            rng,
            tally,
        );
        check(
            "sigmoid",
            &s,
            std::slice::from_ref(&x),
            &|t, v| Ok(t.sigmoid(v[0])),
            rng,
            tally,
        );
        check(
            "softmax",
            &s,
            &[x],
            &|t, v| t.softmax_lastdim(v[0]),
            rng,
            tally,
        );
    })
}

pub fn tensor_ops() -> CaseReport {
    instances("tensor_ops", 7, |rng, tally| {
        let (b, m, k, n) = (
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let s = ParamStore::new();
        let a = rand_tensor(&[m, k], rng, -1.0, 1.0);
        let bm = rand_tensor(&[k, n], rng, -1.0, 1.0);
        check(
            "matmul",
            &s,
            &[a, bm],
            &|t, v| t.matmul(v[0], v[1]),
            rng,
            tally,
        );
        let a3 = rand_tensor(&[b, m, k], rng, -1.0, 1.0);
        let b3 = rand_tensor(&[b, k, n], rng, -1.0, 1.0);
        check(
            "batch_matmul",
            &s,
            &[a3.clone(), b3],
            &|t, v| t.batch_matmul(v[0], v[1], false),
            rng,
            tally,
        );
        let bt = rand_tensor(&[b, n, k], rng, -1.0, 1.0);
        check(
            "batch_matmul_t",
            &s,
            &[a3.clone(), bt],
            &|t, v| t.batch_matmul(v[0], v[1], true),
            rng,
            tally,
        );
        let row = rand_tensor(&[k], rng, -1.0, 1.0);
        check(
            "add_broadcast",
            &s,
            &[a3.clone(), row],
            &|t, v| t.add_broadcast(v[0], v[1]),
            rng,
            tally,
        );
        let other = rand_tensor(&[b, m, k], rng, -1.0, 1.0);
        check(
            "mul",
            &s,
            &[a3.clone(), other.clone()],
            &|t, v| t.mul(v[0], v[1]),
            rng,
            tally,
        );
        check(
            "add",
            &s,
            &[a3.clone(), other],
            &|t, v| t.add(v[0], v[1]),
            rng,
            tally,
        );
        check(
            "scale",
            &s,
            std::slice::from_ref(&a3),
            &|t, v| Ok(t.scale(v[0], -1.7)),
            rng,
            tally,
        );
        check(
            "permute",
            &s,
            std::slice::from_ref(&a3),
            &|t, v| t.permute(v[0], &[2, 0, 1]),
            rng,
            tally,
        );
        check(
            "reshape",
            &s,
            std::slice::from_ref(&a3),
            &|t, v| t.reshape(v[0], &[b * m * k]),
            rng,
            tally,
        );
        let axis = rng.gen_range(0..3);
        check(
            "mean_axis",
            &s,
            &[a3],
            &|t, v| t.mean_axis(v[0], axis),
            rng,
            tally,
        );
    })
}

pub fn global_average_pooling() -> CaseReport {
    instances("global_average_pooling", 8, |rng, tally| {
        let s = ParamStore::new();
        let x4 = rand_tensor(
            &[
                rng.gen_range(1..3),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            ],
            rng,
            -1.0,
            1.0,
        );
        check(
            "gap4",
            &s,
            &[x4],
            &|t, v| global_average_pool(t, v[0]),
            rng,
            tally,
        );
        let x3 = rand_tensor(
            &[
                rng.gen_range(1..3),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            ],
            rng,
            -1.0,
            1.0,
        );
        check(
            "gap3",
            &s,
            &[x3],
            &|t, v| global_average_pool(t, v[0]),
            rng,
            tally,
        );
    })
}

pub fn dropout_with_fixed_mask() -> CaseReport {
    instances("dropout_with_fixed_mask", 9, |rng, tally| {
        let x = rand_tensor(&[rng.gen_range(1..4), rng.gen_range(1..6)], rng, -1.0, 1.0);
        let rate = rng.gen_range(0.1..0.6);
        let seed: u64 = rng.gen();
        let f = |t: &mut Tape<'_>, v: &[Var]| {
            let mut r = rng_from_seed(seed);
            let mut ctx = Context::new(Mode::Train, &mut r);
            dropout(t, &mut ctx, v[0], rate)
        };
        check("dropout", &ParamStore::new(), &[x], &f, rng, tally);
    })
}

pub fn attention_block() -> CaseReport {
    instances("attention_block", 10, |rng, tally| {
        let (heads, hd) = (rng.gen_range(1..3), rng.gen_range(1..4));
        let dim = heads * hd;
        let dim = dim.max(2);
        let heads = if dim == heads * hd { heads } else { 1 };
        let hd = dim / heads;
        let scale = if rng.gen_bool(0.5) {
            AttnScale::HeadDim
        } else {
            AttnScale::Fixed(32.0)
        };
        let mut store = ParamStore::new();
        let blk = AttentionBlock::new(&mut store, "a", dim, heads, hd, scale, rng);
        scramble(&mut store, rng);
        let x = rand_tensor(
            &[rng.gen_range(1..3), rng.gen_range(1..5), dim],
            rng,
            -1.0,
            1.0,
        );
        check(
            "attention",
            &store,
            &[x],
            &|t, v| blk.forward(t, v[0]),
            rng,
            tally,
        );
    })
}

pub fn feed_forward_block() -> CaseReport {
    instances("feed_forward_block", 11, |rng, tally| {
        let dim = rng.gen_range(2..5);
        let hidden = rng.gen_range(1..6);
        let rate = if rng.gen_bool(0.5) { 0.0 } else { 0.3 };
        let mut store = ParamStore::new();
        let blk = FeedForwardBlock::new(&mut store, "f", dim, hidden, rate, rng);
        scramble(&mut store, rng);
        let x = rand_tensor(
            &[rng.gen_range(1..3), rng.gen_range(1..4), dim],
            rng,
            -1.0,
            1.0,
        );
        let seed: u64 = rng.gen();
        let f = |t: &mut Tape<'_>, v: &[Var]| {
            let mut r = rng_from_seed(seed);
            let mut ctx = Context::new(Mode::Train, &mut r);
            blk.forward(t, &mut ctx, v[0])
        };
        check("ffn", &store, &[x], &f, rng, tally);
    })
}

pub fn patch_embedding() -> CaseReport {
    instances("patch_embedding", 12, |rng, tally| {
        let p = rng.gen_range(1..4);
        let (gh, gw, c) = (
            rng.gen_range(1..3),
            rng.gen_range(1..3),
            rng.gen_range(1..3),
        );
        let dim = rng.gen_range(1..5);
        let mut store = ParamStore::new();
        let pe = PatchEmbedding::new(&mut store, "e", [gh * p, gw * p, c], p, dim, rng).unwrap();
        scramble(&mut store, rng);
        let x = rand_tensor(&[rng.gen_range(1..3), gh * p, gw * p, c], rng, -1.0, 1.0);
        check(
            "patch_embed",
            &store,
            &[x],
            &|t, v| pe.forward(t, v[0]),
            rng,
            tally,
        );
    })
}

pub fn bce_losses() -> CaseReport {
    instances("bce_losses", 13, |rng, tally| {
        let n = rng.gen_range(1..6);
        let targets: Vec<Real> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p = rand_tensor(&[n, 1], rng, 0.05, 0.95);
        let z = rand_tensor(&[n, 1], rng, -4.0, 4.0);
        let s = ParamStore::new();
        let tg = targets.clone();
        check(
            "bce",
            &s,
            &[p],
            &move |t, v| t.bce(v[0], tg.clone()),
            rng,
            tally,
        );
        check(
            "bce_logits",
            &s,
            &[z],
            &move |t, v| t.bce_with_logits(v[0], targets.clone()),
            rng,
            tally,
        );
    })
}

fn tiny_spec(kind: ModelKind) -> ModelSpec {
    let conv = |bn: Vec<bool>| ConvStageSpec {
        filters: vec![3, 4],
        kernel: 3,
        batchnorm: bn,
        pool: vec![true, false],
    };
    let transformer = |patch| TransformerSpec {
        patch,
        embed_dim: 4,
        heads: 2,
        head_dim: 2,
        blocks: 2,
        ffn_dim: 6,
        ffn_dropout: 0.2,
        attn_scale: AttnScale::HeadDim,
    };
    match kind {
        ModelKind::Cnn => ModelSpec {
            kind,
            input_shape: [8, 8, 2],
            conv: Some(conv(vec![true, false])),
            transformer: None,
            head: HeadSpec {
                dropout: 0.1,
                mlp: vec![],
                mlp_dropout: 0.0,
            },
        },
        ModelKind::Vit => ModelSpec {
            kind,
            input_shape: [8, 8, 2],
            conv: None,
            transformer: Some(transformer(4)),
            head: HeadSpec {
                dropout: 0.0,
                mlp: vec![5, 3],
                mlp_dropout: 0.3,
            },
        },
        ModelKind::Hybrid => ModelSpec {
            kind,
            input_shape: [8, 8, 2],
            conv: Some(conv(vec![true, true])),
            transformer: Some(transformer(2)),
            head: HeadSpec {
                dropout: 0.0,
                mlp: vec![],
                mlp_dropout: 0.0,
            },
        },
    }
}

fn model_check(name: &'static str, kind: ModelKind, seed: u64) -> CaseReport {
    instances(name, seed, |rng, tally| {
        let mut model = Model::build(&tiny_spec(kind), rng.gen()).unwrap();
        scramble(&mut model.params, rng);
        let batch = rng.gen_range(2..4);
        let x = rand_tensor(&[batch, 8, 8, 2], rng, 0.0, 1.0);
        let targets: Vec<Real> = (0..batch)
            .map(|_| [0.05, 0.95][rng.gen_range(0..2)])
            .collect();
        let mask_seed: u64 = rng.gen();
        let f = |t: &mut Tape<'_>, v: &[Var]| {
            let mut r = rng_from_seed(mask_seed);
            let mut ctx = Context::new(Mode::Train, &mut r);
            let z = model.forward_logits(t, &mut ctx, v[0])?;
            t.bce_with_logits(z, targets.clone())
        };
        check(
            kind.name(),
            &model.params,
            std::slice::from_ref(&x),
            &f,
            rng,
            tally,
        );
        let g = |t: &mut Tape<'_>, v: &[Var]| {
            let mut r = rng_from_seed(mask_seed);
            let mut ctx = Context::new(Mode::Infer, &mut r);
            model.forward(t, &mut ctx, v[0])
        };
        check(kind.name(), &model.params, &[x], &g, rng, tally);
    })
}

pub fn full_cnn() -> CaseReport {
    model_check("full_cnn", ModelKind::Cnn, 20)
}

pub fn full_vit() -> CaseReport {
    model_check("full_vit", ModelKind::Vit, 21)
}

pub fn full_hybrid() -> CaseReport {
    model_check("full_hybrid", ModelKind::Hybrid, 22)
}

/// Every case, in order: each layer and op family, then the three models.
pub const CASES: [fn() -> CaseReport; 16] = [
    conv2d,
    maxpool,
    batchnorm_train_and_infer,
    dense,
    layer_norm,
    activations_and_softmax,
    tensor_ops,
    global_average_pooling,
    dropout_with_fixed_mask,
    attention_block,
    feed_forward_block,
    patch_embedding,
    bce_losses,
    full_cnn,
    full_vit,
    full_hybrid,
];
