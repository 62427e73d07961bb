use pneumovit_core::analysis::{attention_cost, conv_cost, generalization_bound, powerlaw_fit};
use pneumovit_core::autograd::{ParamStore, Tape};
use pneumovit_core::data::{
    augment, make_imbalanced, stratified_split, synth_dataset, AugmentParams, LabeledImage,
};
use pneumovit_core::layers::{
    maxpool2d, AttentionBlock, AttnScale, Context, ConvLayer, FeedForwardBlock, Padding,
    PatchEmbedding,
};
use pneumovit_core::models::{Model, ModelKind, ModelSpec};
use pneumovit_core::{rng_from_seed, Mode, Real, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn random_tensor(shape: &[usize], seed: u64, scale: Real) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..12, mag in 1e-3f64..1e4, seed in any::<u64>()) {
        let x = random_tensor(&[rows, cols], seed, mag as Real);
        let y = x.softmax_lastdim().unwrap();
        prop_assert!(y.is_finite());
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<Real>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn same_padding_preserves_spatial_dims(h in 1usize..9, w in 1usize..9, half in 0usize..3, cin in 1usize..4, cout in 1usize..4, seed in any::<u64>()) {
        let k = 2 * half + 1;
        let mut store = ParamStore::new();
        let conv = ConvLayer::new(&mut store, "c", k, cin, cout, Padding::Same, 1, &mut rng_from_seed(seed));
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(random_tensor(&[1, h, w, cin], seed, 1.0));
        let y = conv.forward(&mut tape, x).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[1, h, w, cout]);
        prop_assert_eq!(conv.output_hw(h, w), Some((h, w)));
    }

    #[test]
    fn patch_flattening_is_lossless(gh in 1usize..4, gw in 1usize..4, p in 1usize..5, c in 1usize..4) {
        let (h, w) = (gh * p, gw * p);
        let n = h * w * c;
        let x = Tensor::new(&[h, w, c], (0..n).map(|i| i as Real).collect()).unwrap();
        let mut store = ParamStore::new();
        let pe = PatchEmbedding::new(&mut store, "pe", [h, w, c], p, 4, &mut rng_from_seed(1)).unwrap();
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.reshape(&[1, h, w, c]).unwrap());
        let flat = pe.patches(&mut tape, xv).unwrap();
        let out = tape.value(flat).clone();
        prop_assert_eq!(out.shape(), &[1, gh * gw, p * p * c]);
        for (i, j) in (0..gh).flat_map(|i| (0..gw).map(move |j| (i, j))) {
            for (r, s, ch) in (0..p).flat_map(|r| (0..p).flat_map(move |s| (0..c).map(move |ch| (r, s, ch)))) {
                let got = out.at(&[0, i * gw + j, (r * p + s) * c + ch]);
                prop_assert_eq!(got, x.at(&[i * p + r, j * p + s, ch]));
            }
        }
        let mut seen: Vec<Real> = out.data().to_vec();
        seen.sort_by(Real::total_cmp);
        prop_assert_eq!(seen, (0..n).map(|i| i as Real).collect::<Vec<_>>());
    }

    #[test]
    fn attention_and_feed_forward_keep_sequence_shape(n in 1usize..7, heads in 1usize..4, dk in 1usize..5, dim in 2usize..9, hidden in 1usize..9, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let attn = AttentionBlock::new(&mut store, "a", dim, heads, dk, AttnScale::HeadDim, &mut rng);
        let ffn = FeedForwardBlock::new(&mut store, "f", dim, hidden, 0.5, &mut rng);
        let x = random_tensor(&[1, n, dim], seed ^ 1, 2.0);
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::with_params(&store);
            let mut ctx = Context::new(Mode::Infer, &mut rng);
            let xv = tape.constant(x.clone());
            let (y, weights) = attn.forward_with_weights(&mut tape, xv).unwrap();
            prop_assert_eq!(tape.value(y).shape(), &[1, n, dim]);
            let wt = tape.value(weights);
            prop_assert_eq!(wt.shape(), &[heads, n, n]);
            for row in wt.data().chunks(n) {
                prop_assert!((row.iter().sum::<Real>() - 1.0).abs() <= 1e-6);
            }
            let z = ffn.forward(&mut tape, &mut ctx, y).unwrap();
            prop_assert_eq!(tape.value(z).shape(), &[1, n, dim]);
            outputs.push(tape.value(z).clone());
        }
        prop_assert_eq!(&outputs[0], &outputs[1]);
    }

    #[test]
    fn maxpool_gradient_is_routing(hh in 1usize..5, hw in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        let (h, w) = (2 * hh, 2 * hw);
        let x = random_tensor(&[1, h, w, c], seed, 1.0);
        let upstream = random_tensor(&[1, hh, hw, c], seed ^ 7, 1.0);
        prop_assume!(upstream.data().iter().all(|&g| g != 0.0));
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let y = maxpool2d(&mut tape, xv).unwrap();
        let weighted = tape.mul_const(y, upstream.data().to_vec()).unwrap();
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.wrt(xv).unwrap();
        let mut routed: Vec<Real> = gx.data().iter().copied().filter(|&g| g != 0.0).collect();
        let mut sent = upstream.data().to_vec();
        routed.sort_by(Real::total_cmp);
        sent.sort_by(Real::total_cmp);
        prop_assert_eq!(routed.iter().sum::<Real>(), sent.iter().sum::<Real>());
        prop_assert_eq!(routed, sent);
    }

    #[test]
    fn augment_is_pure_and_in_range(size in 8usize..20, seed in any::<u64>(), rot in 0.0f64..20.0, shift in 0.0f64..0.2, zoom in 0.0f64..0.2, flip in any::<bool>()) {
        let img = random_tensor(&[size, size, 3], seed, 1.0).map(Real::abs);
        let p = AugmentParams {
            rotation_deg: rot as Real,
            width_shift: shift as Real,
            height_shift: shift as Real,
            shear_deg: shift as Real,
            zoom: zoom as Real,
            horizontal_flip: flip,
        };
        let a = augment(&img, &p, seed).unwrap();
        prop_assert_eq!(a.shape(), img.shape());
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a, augment(&img, &p, seed).unwrap());
    }

    #[test]
    fn two_point_fit_reproduces_inputs(n1 in 1.0f64..1e5, ratio in 1.01f64..10.0, t1 in 1e-3f64..1e4, t2 in 1e-3f64..1e4) {
        let pts = [(n1 as Real, t1 as Real), ((n1 * ratio) as Real, t2 as Real)];
        let fit = powerlaw_fit(&pts).unwrap();
        for (n, t) in pts {
            prop_assert!(((fit.eval(n) - t) / t).abs() <= 1e-9);
        }
    }

    #[test]
    fn costs_scale_multiplicatively(k in 1u64..8, h in 1u64..64, w in 1u64..64, ci in 1u64..64, co in 1u64..64, m in 1u64..5) {
        let base = conv_cost(k, h, w, ci, co).unwrap();
        prop_assert_eq!(conv_cost(k * m, h, w, ci, co).unwrap(), base * m * m);
        prop_assert_eq!(conv_cost(k, h * m, w, ci, co).unwrap(), base * m);
        prop_assert_eq!(conv_cost(k, h, w * m, ci, co).unwrap(), base * m);
        prop_assert_eq!(conv_cost(k, h, w, ci * m, co).unwrap(), base * m);
        prop_assert_eq!(conv_cost(k, h, w, ci, co * m).unwrap(), base * m);
        let att = attention_cost(h, w).unwrap();
        prop_assert_eq!(attention_cost(h * m, w).unwrap(), att * m * m);
        prop_assert_eq!(attention_cost(h, w * m).unwrap(), att * m);
    }

    #[test]
    fn bound_is_monotone(vc in 1.0f64..1e6, delta in 1e-4f64..0.99, n in 1u64..1_000_000) {
        let e = generalization_bound(vc as Real, delta as Real, n).unwrap().epsilon;
        let expected = (vc * (1.0 / delta).ln() / n as f64).sqrt();
        prop_assert!((e as f64 - expected).abs() <= 1e-12 * expected.max(1.0));
        prop_assert!(generalization_bound(vc as Real, delta as Real, n + 1).unwrap().epsilon < e);
        prop_assert!(generalization_bound(vc as Real * 1.5, delta as Real, n).unwrap().epsilon > e);
    }

    #[test]
    fn data_operations_are_pure(n in 4usize..20, seed in any::<u64>()) {
        let pool: Vec<LabeledImage> = synth_dataset(n, 16, seed % 100).unwrap();
        let a = stratified_split(&pool, 0.25, 0.25, seed).unwrap();
        let b = stratified_split(&pool, 0.25, 0.25, seed).unwrap();
        prop_assert_eq!(a, b);
        let (pos, neg) = (n / 2, n - 1);
        prop_assert_eq!(make_imbalanced(&pool, pos, neg, seed).unwrap(), make_imbalanced(&pool, pos, neg, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn gradients_are_bitwise_reproducible_and_finite(seed in any::<u64>(), kind in 0usize..2) {
        let kind = [ModelKind::Cnn, ModelKind::Vit][kind];
        let spec = ModelSpec::default_for(kind).with_input([32, 32, 3]);
        let model = Model::build(&spec, seed).unwrap();
        let x = random_tensor(&[2, 32, 32, 3], seed, 1.0).map(Real::abs);
        let run = || {
            let mut rng = rng_from_seed(seed);
            let mut ctx = Context::new(Mode::Train, &mut rng);
            let mut tape = Tape::with_params(&model.params);
            let xv = tape.constant(x.clone());
            let logits = model.forward_logits(&mut tape, &mut ctx, xv).unwrap();
            let loss = tape.bce_with_logits(logits, vec![0.0, 1.0]).unwrap();
            let value = tape.value(loss).item();
            let grads = tape.backward(loss).unwrap();
            let per_param: Vec<Tensor> = model.params.iter().filter_map(|(id, _)| grads.param(id).cloned()).collect();
            (value, per_param)
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        prop_assert!(l1.is_finite());
        prop_assert!(!g1.is_empty());
        prop_assert!(g1.iter().all(Tensor::is_finite));
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert_eq!(g1, g2);
    }
}
