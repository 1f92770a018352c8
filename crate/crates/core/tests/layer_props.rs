use mscgc_core::kan::{basis_expand, KanConfig, KanLayer};
use mscgc_core::mcr::McrBlock;
use mscgc_core::model::{flatten, unflatten, ModelConfig, MscgcKanModel, Variant};
use mscgc_core::nn::{dropout, BatchNorm, CausalBranch, LinearLayer, Mode};
use mscgc_core::train::AdamW;
use mscgc_core::{seeded, ParamGroup, ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], v: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn causal_branch_ignores_the_future(
        v in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 7),
        noise in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 7),
        cut in 0usize..6,
        k in 1usize..6,
    ) {
        let mut store = ParamStore::new();
        let branch = CausalBranch::new(&mut store, "b", 3, k, 0.1, &mut seeded(k as u64)).unwrap();
        // [N, D, S] with S = 7
        let mut w = v.clone();
        for (i, x) in w.iter_mut().enumerate() {
            if i % 7 > cut {
                *x = noise[i];
            }
        }
        let run = |data: Vec<f64>, store: &mut ParamStore| {
            let mut t = Tape::inference();
            let x = t.constant(tensor(&[2, 3, 7], data));
            let y = branch.forward(&mut t, store, x, Mode::Eval, &mut seeded(0)).unwrap();
            t.value(y).clone()
        };
        let (a, b) = (run(v, &mut store), run(w, &mut store));
        for (i, (p, q)) in a.data().iter().zip(b.data()).enumerate() {
            if i % 7 <= cut {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn block_is_causal_after_graph_mixing(
        v in prop::collection::vec(-2.0f64..2.0, 3 * 5 * 2),
        a in prop::collection::vec(-3.0f64..3.0, 9),
        cut in 0usize..4,
        channel in 0usize..3,
        bump in 0.1f64..3.0,
    ) {
        let mut store = ParamStore::new();
        let block = McrBlock::new(&mut store, "mcr", 3, 2, &[3, 5], 0.1, &mut seeded(1)).unwrap();
        store.assign(block.adjacency.a, &a).unwrap();
        let (s, d) = (5, 2);
        let mut w = v.clone();
        for t in cut + 1..s {
            for k in 0..d {
                w[(channel * s + t) * d + k] += bump;
            }
        }
        let run = |data: Vec<f64>, store: &mut ParamStore| {
            let mut t = Tape::inference();
            let x = t.constant(tensor(&[1, 3, s, d], data));
            let out = block.forward(&mut t, store, x, Mode::Eval, &mut seeded(0)).unwrap();
            prop_assert_eq!(t.shape(out.h), &[1, 3, s, d]);
            Ok(t.value(out.h).clone())
        };
        let (p, q) = (run(v, &mut store)?, run(w, &mut store)?);
        for (i, (x, y)) in p.data().iter().zip(q.data()).enumerate() {
            if (i / d) % s <= cut {
                prop_assert!((x - y).abs() <= 1e-12, "window {} moved by {}", (i / d) % s, (x - y).abs());
            }
        }
    }

    #[test]
    fn eval_dropout_is_identity(v in prop::collection::vec(-5.0f64..5.0, 1..40), rate in 0.0f64..0.9) {
        let mut t = Tape::inference();
        let x = t.constant(tensor(&[v.len()], v.clone()));
        let y = dropout(&mut t, x, rate, Mode::Eval, &mut seeded(3)).unwrap();
        prop_assert!(t.value(y).bit_eq(&tensor(&[v.len()], v)));
    }

    #[test]
    fn train_batch_norm_standardises(v in prop::collection::vec(-5.0f64..5.0, 8 * 3 * 4)) {
        let spread: f64 = v.iter().map(|x| x.abs()).sum();
        prop_assume!(spread > 1.0);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3, ParamGroup::Head, 0.1, 1e-12).unwrap();
        let mut t = Tape::new();
        let x = t.constant(tensor(&[8, 3, 4], v));
        let y = bn.forward(&mut t, &mut store, x, Mode::Train).unwrap();
        let out = t.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..8).flat_map(|n| (0..4).map(move |l| (n, l))).map(|(n, l)| out.at(&[n, c, l])).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-8);
            prop_assert!((var - 1.0).abs() < 1e-6, "variance {}", var);
        }
    }

    #[test]
    fn basis_slices_are_exact(v in prop::collection::vec(-3.0f64..3.0, 2 * 5)) {
        let mut t = Tape::inference();
        let h = t.constant(tensor(&[2, 5], v.clone()));
        let phi = basis_expand(&mut t, h, 0).unwrap();
        let out = t.value(phi);
        prop_assert_eq!(out.shape(), &[2, 20]);
        for r in 0..2 {
            for j in 0..5 {
                let x = v[r * 5 + j];
                prop_assert_eq!(out.at(&[r, j]), x);
                prop_assert!((out.at(&[r, 5 + j]) - x * x).abs() <= 1e-15);
                prop_assert_eq!(out.at(&[r, 10 + j]), x.sin());
                prop_assert_eq!(out.at(&[r, 15 + j]), x.tanh());
            }
        }
    }

    #[test]
    fn flatten_round_trips(v in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 4 * 5)) {
        let t = tensor(&[2, 3, 4, 5], v);
        let flat = flatten(&t).unwrap();
        prop_assert_eq!(flat.shape(), &[2, 60]);
        prop_assert!(unflatten(&flat, 3, 4, 5).unwrap().bit_eq(&t));
    }
}

fn mse_after_fit(model: &dyn Fn(&mut Tape, &ParamStore, mscgc_core::Var) -> mscgc_core::Var, store: &mut ParamStore, steps: usize) -> f64 {
    let xs: Vec<f64> = (0..64).map(|i| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / 63.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin()).collect();
    let x = tensor(&[64, 1], xs);
    let y = tensor(&[64, 1], ys);
    let mut opt = AdamW::new((0.9, 0.999), 1e-8);
    let ids = store.trainable();
    let mut last = f64::INFINITY;
    for _ in 0..steps {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let pred = model(&mut t, store, xv);
        let diff = t.sub(pred, yv).unwrap();
        let sq = t.square(diff).unwrap();
        let loss = t.mean_all(sq).unwrap();
        last = t.value(loss).item().unwrap();
        t.backward(loss).unwrap();
        store.zero_grad();
        t.accumulate_param_grads(store).unwrap();
        opt.update(store, &ids, |_| 1e-2, 0.0, false).unwrap();
    }
    last
}

#[test]
fn kan_fits_sin_3x_where_affine_cannot() {
    let mut store = ParamStore::new();
    let kan = KanLayer::new(&mut store, "kan", 1, KanConfig { hidden: 8, out_dim: 1, harmonics: 0 }, &mut seeded(11)).unwrap();
    let kan_mse = mse_after_fit(&|t, s, x| kan.forward(t, s, x).unwrap(), &mut store, 3000);

    let mut store = ParamStore::new();
    let lin = LinearLayer::new(&mut store, "lin", 1, 1, ParamGroup::Head, &mut seeded(11)).unwrap();
    let lin_mse = mse_after_fit(&|t, s, x| lin.forward(t, s, x).unwrap(), &mut store, 3000);

    assert!(kan_mse < 1e-2, "KAN mse {kan_mse}");
    assert!(lin_mse > 0.4, "affine mse {lin_mse}");
}

#[test]
fn every_variant_gives_logits_on_one_batch() {
    let x = Tensor::from_fn(&[3, 4, 5, 6], |i| ((i * 31) % 17) as f64 / 8.0 - 1.0).unwrap();
    let mut widths = Vec::new();
    for variant in Variant::ALL {
        let cfg = ModelConfig {
            channels: 4,
            windows: 5,
            raw_width: 6,
            features: 6,
            classes: 3,
            kan: KanConfig { hidden: 8, out_dim: 5, harmonics: 0 },
            variant,
            ..ModelConfig::default()
        };
        let mut model = MscgcKanModel::new(cfg).unwrap();
        assert_eq!(model.block.is_some(), variant.uses_block());
        assert_eq!(model.kan.is_some(), variant.uses_kan());
        assert_eq!(model.affine.is_some(), !variant.uses_kan());
        let logits = model.predict(&x, 2).unwrap();
        assert_eq!(logits.shape(), &[3, 3]);
        assert!(logits.is_finite());
        widths.push(model.store.num_scalars(mscgc_core::params::EntryKind::Param));
    }
    assert!(widths[0] < widths[2] && widths[1] < widths[3], "{widths:?}");
}
