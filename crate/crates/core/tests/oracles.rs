mod common;

use common::*;
use fedprok::client::{translate_features, ClientUpdate, PrototypeEntry, PrototypeList};
use fedprok::nn::{ModelParams, Tensor};
use fedprok::server::{fuse_prototypes, KnowledgeBase};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

#[test]
fn fedavg_matches_scalar_mean() {
    assert!(fedavg_oracle_error(60, 1) < TOL);
}

#[test]
fn prototypes_match_scalar_mean() {
    assert!(prototype_oracle_error(60, 2) < TOL);
}

#[test]
fn fusion_matches_weighted_sums() {
    assert!(fusion_oracle_error(60, 3) < TOL);
}

#[test]
fn base_selection_matches_brute_force() {
    assert!(selection_oracle_error(60, 4) < TOL);
}

#[test]
fn translation_matches_elementwise_sum() {
    assert!(translation_oracle_error(60, 5) < TOL);
}

fn upload(client: usize, v: Vec<f64>, count: usize) -> ClientUpdate<f64> {
    ClientUpdate {
        client_id: client,
        params: ModelParams::init(1, &[], 0, 0),
        prototypes: [PrototypeEntry {
            class_id: 0,
            prototype: Tensor::vector(v),
            sample_count: count,
            task_of_origin: 1,
        }]
        .into_iter()
        .collect(),
        num_samples: count,
        bytes_uploaded: 0,
    }
}

#[test]
fn counts_one_and_two_weight_a_third_and_two_thirds() {
    let u = vec![3.0, -1.0, 0.5];
    let v = vec![0.0, 2.0, 1.5];
    let kb = fuse_prototypes(&KnowledgeBase::new(), &[upload(0, u.clone(), 1), upload(1, v.clone(), 2)], 1, 0.5)
        .unwrap();
    let expect: Vec<f64> = (0..3).map(|d| u[d] / 3.0 + 2.0 * v[d] / 3.0).collect();
    assert!(max_abs_diff(kb.get(0).unwrap().prototype.data(), &expect) < TOL);
    assert_eq!(kb.get(0).unwrap().total_count, 3);
}

#[test]
fn centroid_maps_to_centroid() {
    let mu_n = Tensor::vector(vec![0.5, 1.0, -2.0]);
    let mu_p = Tensor::vector(vec![4.0, 0.0, 1.0]);
    let rows = Tensor::from_rows(&[mu_n.data(), mu_n.data()], 3).unwrap();
    let out = translate_features(&rows, &mu_n, &mu_p).unwrap();
    assert_eq!(out.row(0), mu_p.data());
    assert_eq!(out.row(1), mu_p.data());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    // New-class branch: the fused prototype is a convex combination, so it
    // stays inside the per-coordinate range of the uploads.
    #[test]
    fn fused_prototype_lies_in_the_hull(
        vs in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), 1usize..40), 1..5)
    ) {
        let ups: Vec<ClientUpdate<f64>> = vs.iter().enumerate().map(|(k, (v, n))| upload(k, v.clone(), *n)).collect();
        let kb = fuse_prototypes(&KnowledgeBase::new(), &ups, 1, 0.5).unwrap();
        let m = kb.get(0).unwrap().prototype.data().to_vec();
        for d in 0..3 {
            let lo = vs.iter().map(|(v, _)| v[d]).fold(f64::INFINITY, f64::min);
            let hi = vs.iter().map(|(v, _)| v[d]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m[d] >= lo - 1e-12 && m[d] <= hi + 1e-12);
        }
        prop_assert_eq!(kb.get(0).unwrap().total_count, vs.iter().map(|(_, n)| n).sum::<usize>());
    }

    // Cosine similarity ignores positive scaling, so the chosen base class
    // does too.
    #[test]
    fn selection_is_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let prev = Tensor::vector(uniform_vec(&mut r, 4, 1.0));
        let list: PrototypeList<f64> = (0..4).map(|c| PrototypeEntry {
            class_id: c,
            prototype: Tensor::vector(uniform_vec(&mut r, 4, 1.0)),
            sample_count: 1,
            task_of_origin: 1,
        }).collect();
        let rule = fedprok::client::BaseClassRule::ArgmaxSimilarity;
        let a = fedprok::client::select_base_class(&prev, &list, rule).unwrap();
        let b = fedprok::client::select_base_class(&prev.map(|v| v * scale), &list, rule).unwrap();
        prop_assert_eq!(a, b);
    }

    // Translation shifts every row by the same vector, so pairwise
    // differences between rows are preserved.
    #[test]
    fn translation_preserves_row_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x: Vec<Vec<f64>> = (0..4).map(|_| uniform_vec(&mut r, 3, 2.0)).collect();
        let out = translate_features(
            &Tensor::from_rows(&x, 3).unwrap(),
            &Tensor::vector(uniform_vec(&mut r, 3, 2.0)),
            &Tensor::vector(uniform_vec(&mut r, 3, 2.0)),
        ).unwrap();
        for i in 1..4 {
            for d in 0..3 {
                let before = x[i][d] - x[0][d];
                let after = out.row(i)[d] - out.row(0)[d];
                prop_assert!((before - after).abs() < 1e-12);
            }
        }
    }
}
