mod common;

use common::{random_tensor, receptive_field_mismatches};
use gem2::model::{AxialWeights, LogitScale};
use gem2::oracle::{
    aggred_message, all_tuples, count_ops, full_attention_reference, jacobian_sparsity,
    AttentionKind, OracleError,
};
use gem2::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn aggregation_over_all_axes_reaches_every_m_body() {
    for n in 1..=5 {
        for m in 1..=3 {
            for t in all_tuples(n, m) {
                assert_eq!(aggred_message(m, &t, n).unwrap().len(), n.pow(m as u32));
            }
        }
    }
}

#[test]
fn partial_aggregation_closed_form() {
    let n = 3;
    for t in all_tuples(n, 3) {
        for k in 0..=3 {
            let set = aggred_message(k, &t, n).unwrap();
            assert_eq!(set.len(), n.pow(k as u32));
            assert!(set.tuples.iter().all(|s| s[k..] == t[k..]));
        }
    }
    assert!(matches!(
        aggred_message(3, &[0, 1], 3),
        Err(OracleError::Order { .. })
    ));
}

#[test]
fn one_step_example() {
    let s = aggred_message(1, &[0, 1], 3).unwrap();
    let got: Vec<Vec<usize>> = s.tuples.into_iter().collect();
    assert_eq!(got, vec![vec![0, 1], vec![1, 1], vec![2, 1]]);
}

#[test]
fn identity_and_linear_sparsity() {
    let x = Tensor::from_vec(vec![0.3, -0.2, 0.9]);
    let id = jacobian_sparsity(|t| Ok(t.clone()), &x, 1e-9).unwrap();
    for o in 0..3 {
        for i in 0..3 {
            assert_eq!(id.get(o, i), o == i);
        }
    }
    // a per-row linear map mixes channels but never rows
    let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let lin = jacobian_sparsity(
        |t| {
            Ok(Tensor::from_fn(&[2, 2], |idx| {
                let r = idx[0];
                (0..3)
                    .map(|c| t.get(&[r, c]) * (1.0 + (c + idx[1]) as f64))
                    .sum()
            }))
        },
        &x,
        1e-9,
    )
    .unwrap();
    for o in 0..4 {
        for i in 0..6 {
            assert_eq!(lin.get(o, i), o / 2 == i / 3);
        }
    }
}

#[test]
fn small_receptive_fields_match_aggregation() {
    for (n, m) in [(2, 2), (3, 2), (2, 3)] {
        for k in 0..=m {
            assert_eq!(
                receptive_field_mismatches(n, m, k, 17),
                0,
                "n={n} m={m} k={k}"
            );
        }
    }
}

#[test]
fn operation_counts() {
    assert_eq!(count_ops(AttentionKind::Full, 4, 2, 1), 256);
    assert_eq!(count_ops(AttentionKind::Axial, 4, 2, 1), 128);
    for m in 1..=3u32 {
        assert_eq!(
            count_ops(AttentionKind::Axial, 10, m, 3) * 2u64.pow(m + 1),
            count_ops(AttentionKind::Axial, 20, m, 3)
        );
    }
    assert_eq!(
        count_ops(AttentionKind::Full, 16, 2, 8) / count_ops(AttentionKind::Axial, 16, 2, 8),
        8
    );
}

#[test]
fn full_reference_guard() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = AxialWeights::random(&mut rng, 2, None);
    let ok = random_tensor(&mut rng, &[5, 5, 5, 2]);
    assert!(full_attention_reference(&ok, &w, 1, LogitScale::None).is_ok());
    let big = random_tensor(&mut rng, &[6, 6, 6, 2]);
    assert!(matches!(
        full_attention_reference(&big, &w, 1, LogitScale::None),
        Err(OracleError::SizeGuard { tokens: 216, .. })
    ));
}
