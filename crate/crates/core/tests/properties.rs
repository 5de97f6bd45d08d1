use std::collections::BTreeMap;

use proptest::prelude::*;

use sparse_steer::bundle::{parse_csv, ClassifierHead, EmbeddingBundle};
use sparse_steer::eval::classify;
use sparse_steer::sae::{select_topk, SaeModel, SparseCode};
use sparse_steer::steering::{apply_steering, steering_vector_vs2};
use sparse_steer::Selection;

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

/// Sort-everything reference for top-k selection.
fn topk_oracle(acts: &[f64], k: usize, dead: &[bool], signed: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..acts.len()).filter(|&j| !dead[j]).collect();
    let key = |j: usize| if signed { acts[j] } else { acts[j].abs() };
    idx.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn model_strategy() -> impl Strategy<Value = SaeModel> {
    (1usize..6, 1usize..4)
        .prop_flat_map(|(d, e)| {
            let n = d * e;
            (
                Just(d),
                Just(n),
                1..=n,
                vec_of(n * d),
                vec_of(d * n),
                vec_of(d),
                vec_of(n),
            )
        })
        .prop_map(|(d, n, k, enc, dec, pre, eb)| {
            SaeModel::from_parts(d, n, k, enc, dec, pre, eb, vec![false; n]).unwrap()
        })
}

proptest! {
    #[test]
    fn topk_matches_full_sort(
        acts in prop::collection::vec(prop_oneof![Just(0.5), Just(-0.5), -2.0f64..2.0], 1..40),
        signed in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let n = acts.len();
        let dead: Vec<bool> = (0..n).map(|j| (seed >> (j % 64)) & 1 == 1 && j % 3 == 0).collect();
        let live = dead.iter().filter(|d| !**d).count();
        let k = (seed as usize) % (live + 1);
        let rule = if signed { Selection::Signed } else { Selection::Magnitude };
        let code = select_topk(&acts, k, &dead, rule).unwrap();
        let mut got = code.indices();
        got.sort_unstable();
        prop_assert_eq!(got, topk_oracle(&acts, k, &dead, signed));
        for &(j, v) in code.entries() {
            prop_assert_eq!(v, acts[j]);
        }
    }

    #[test]
    fn sparse_code_dense_round_trip(z in vec_of(12)) {
        let code = SparseCode::from_dense(&z);
        prop_assert_eq!(code.to_dense(z.len()), z);
    }

    #[test]
    fn classify_is_sorted_cosine(
        protos in prop::collection::vec(vec_of(4), 2..8),
        x in vec_of(4),
    ) {
        prop_assume!(protos.iter().all(|p| p.iter().any(|v| v.abs() > 1e-3)));
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let names = (0..protos.len()).map(|c| c.to_string()).collect();
        let head = ClassifierHead::new(protos.clone(), names).unwrap();
        let ranked = classify(&x, &head, protos.len()).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for w in ranked.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        for &(c, s) in &ranked {
            let cos = x.iter().zip(&protos[c]).map(|(a, b)| a * b).sum::<f64>()
                / (norm(&x) * norm(&protos[c]));
            prop_assert!((s - cos).abs() < 1e-12);
        }
    }

    #[test]
    fn steering_preserves_norm_and_direction_sign(
        model in model_strategy(),
        seed in vec_of(8),
        gamma in -2.0f64..3.0,
        lambda in 0.01f64..3.0,
    ) {
        let x: Vec<f64> = seed[..model.dim()].to_vec();
        prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-4);
        let v = steering_vector_vs2(&model, &x, gamma).unwrap();
        if let Ok(out) = apply_steering(&x, &v, lambda) {
            let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let no = out.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((nx - no).abs() <= 1e-9 * nx);
            // out is x + lambda v rescaled, so it lies in their span
            if !v.is_zero() {
                let raw: Vec<f64> = x.iter().zip(&v.direction).map(|(a, b)| a + lambda * b).collect();
                let cos = raw.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>()
                    / (raw.iter().map(|a| a * a).sum::<f64>().sqrt() * no);
                prop_assert!((cos - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bundle_bytes_round_trip(
        rows in 0usize..6,
        dim in 1usize..5,
        raw in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 30),
        labelled in any::<bool>(),
    ) {
        let data = raw[..rows * dim].to_vec();
        let ids = (0..rows).map(|i| format!("r{i}")).collect();
        let labels = labelled.then(|| (0..rows as u32).map(|i| i % 2).collect());
        let b = EmbeddingBundle::new(rows, dim, data, ids, labels, vec!["a".into(), "b".into()], BTreeMap::new()).unwrap();
        let bytes = b.to_bytes().unwrap();
        let back = EmbeddingBundle::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, b);
    }

    #[test]
    fn csv_values_survive_import(rows in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 3), 1..10)) {
        let text: String = rows
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{},{},{},{}\n", r[0], r[1], r[2], i % 3))
            .collect();
        let b = parse_csv(&text, true).unwrap();
        prop_assert_eq!(b.rows(), rows.len());
        for (i, r) in rows.iter().enumerate() {
            prop_assert_eq!(b.row(i), r.as_slice());
            prop_assert_eq!(b.labels().unwrap()[i], (i % 3) as u32);
        }
    }
}
