mod common;

use common::{jittered_model, model_gradient_errors, random_features, small_config, AxialCase};
use gem2::featurizer::featurize;
use gem2::model::{
    attention_mask, axial_attention, load_checkpoint, save_checkpoint, AxialSpec, AxialWeights,
    Gem2Model, LogitScale,
};
use gem2::synth::{chain, random_molecule};
use gem2::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn axial_attention_matches_naive_loops() {
    for seed in 0..40 {
        let case = AxialCase::random(seed, 5);
        let d = case.model_output().max_abs_diff(&case.oracle_output());
        assert!(d <= 1e-12, "seed {seed}: {d:e}");
    }
}

#[test]
fn zeroed_fusion_reduces_to_plain_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut with_hi = AxialWeights::random(&mut rng, 4, Some(4));
    with_hi.zero_hi();
    let plain = AxialWeights {
        norm_hi: None,
        key_hi: None,
        value_hi: None,
        ..with_hi.clone()
    };
    let z = common::random_tensor(&mut rng, &[3, 3, 4]);
    let hi = common::random_tensor(&mut rng, &[3, 3, 3, 4]);
    for axis in 1..=2 {
        let fused = gem2::oracle::naive_axial_attention(
            &z,
            Some(&hi),
            axis,
            &with_hi,
            2,
            LogitScale::None,
            None,
        )
        .unwrap();
        let bare =
            gem2::oracle::naive_axial_attention(&z, None, axis, &plain, 2, LogitScale::None, None)
                .unwrap();
        assert!(fused.max_abs_diff(&bare) <= 1e-12);
    }
}

#[test]
fn path_mask_blocks_atoms_beyond_one_hop() {
    let cfg = common::small_features();
    let fs = featurize(&chain(4), &cfg).unwrap();
    let mask = attention_mask(&fs, Some(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = AxialWeights::random(&mut rng, 4, Some(4));
    let z = common::random_tensor(&mut rng, &[4, 4]);
    let hi = common::random_tensor(&mut rng, &[4, 4, 4]);
    let run = |z: &Tensor| {
        let mut g = Graph::new();
        let vars = w.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let hv = g.constant(hi.clone());
        let spec = AxialSpec {
            axis: 1,
            heads: 2,
            logit_scale: LogitScale::InverseSqrtHeadDim,
        };
        let out = axial_attention(&mut g, &vars, zv, Some(hv), spec, Some(&mask)).unwrap();
        g.value(out.out).clone()
    };
    let base = run(&z);
    let mut moved = z.clone();
    for c in 0..4 {
        moved.set(&[2, c], z.get(&[2, c]) + 0.7 * (c as f64 - 1.5));
    }
    let after = run(&moved);
    for c in 0..4 {
        assert_eq!(base.get(&[0, c]), after.get(&[0, c]));
    }
    assert!((0..4).any(|c| base.get(&[1, c]) != after.get(&[1, c])));
}

#[test]
fn mirror_atoms_get_equal_weight_at_initialisation() {
    let mut cfg = small_config(1, 2, 8, 2);
    cfg.features = common::small_features();
    let model = Gem2Model::new(cfg, 4).unwrap();
    let fs = featurize(&chain(5), &model.config().features).unwrap();
    let row = model.attention_weights(&fs, &[2, 2], 0, 1).unwrap();
    for h in &row.per_head {
        assert!((h.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!((h[0] - h[4]).abs() <= 1e-12, "{h:?}");
        assert!((h[1] - h[3]).abs() <= 1e-12, "{h:?}");
    }
}

#[test]
fn low2high_add_track_gradients() {
    let model = jittered_model(small_config(3, 3, 4, 2), 8, 0.2);
    let fs = random_features(9, 3, &model.config().features);
    for (name, err) in model_gradient_errors(&model, &fs) {
        assert!(err < 1e-4, "{name}: {err:e}");
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = jittered_model(small_config(2, 2, 8, 2), 3, 0.1);
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    let fs = random_features(1, 4, &model.config().features);
    assert_eq!(back.predict(&fs).unwrap(), model.predict(&fs).unwrap());
}

#[test]
fn batch_of_one_equals_padded_execution() {
    let model = jittered_model(small_config(1, 2, 8, 2), 12, 0.1);
    let fs = random_features(13, 3, &model.config().features);
    let a = model.predict(&fs).unwrap();
    let b = model.predict(&fs.padded(5)).unwrap();
    assert!((a - b).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_are_permutation_invariant(seed in any::<u64>(), n in 1usize..6, m in 1usize..=3) {
        let model = jittered_model(small_config(1, m, 8, 2), seed, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rec = random_molecule(&mut rng, n, "p");
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let cfg = &model.config().features;
        let a = model.predict(&featurize(&rec, cfg).unwrap()).unwrap();
        let b = model.predict(&featurize(&rec.permuted(&perm), cfg).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn representations_are_permutation_equivariant(seed in any::<u64>(), n in 1usize..5) {
        let model = jittered_model(small_config(1, 2, 4, 2), seed, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs = featurize(&random_molecule(&mut rng, n, "p"), &model.config().features).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let base = model.representations(&fs).unwrap();
        let moved = model.representations(&fs.permuted(&perm)).unwrap();
        for (s, t) in base.iter().zip(&moved) {
            for (order, (x, y)) in s.orders.iter().zip(&t.orders).enumerate() {
                let order = order + 1;
                let expect = Tensor::from_fn(x.shape(), |idx| {
                    let mut src: Vec<usize> = idx[..order].iter().map(|&a| perm[a]).collect();
                    src.push(idx[order]);
                    x.get(&src)
                });
                prop_assert!(expect.max_abs_diff(y) < 1e-10);
            }
        }
    }

    #[test]
    fn oracle_agreement_on_random_cases(seed in any::<u64>()) {
        let case = AxialCase::random(seed, 4);
        prop_assert!(case.model_output().max_abs_diff(&case.oracle_output()) <= 1e-12);
    }
}
