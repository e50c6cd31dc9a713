use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::compose::{encode_target, ModelConfig};
use crate::datamodel::{synth_generate, SynthConfig};

fn store() -> FeatureStore {
    synth_generate(&SynthConfig {
        n_items: 120,
        slots: 3,
        n_triplets: 24,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn params(store: &FeatureStore, seed: u64) -> SsnParameters {
    let cfg = ModelConfig {
        heads: 2,
        ..ModelConfig::new(store.d_raw(), store.d())
    };
    SsnParameters::init(&cfg, seed).unwrap()
}

fn trip(target: u64, subset: Option<[u64; 6]>) -> Triplet {
    Triplet {
        reference_id: 1000,
        text_id: 2000,
        target_id: target,
        subset_ids: subset,
    }
}

/// List in which `target` sits at zero-based `pos` among ids 0..n.
fn list_with(target: u64, pos: usize, n: u64) -> RankedList {
    let mut ids: Vec<u64> = (0..n).filter(|&i| i != target).collect();
    ids.insert(pos, target);
    let scores = (0..ids.len()).map(|i| -(i as f32)).collect();
    RankedList { query_id: 0, ids, scores }
}

#[test]
fn index_rows_are_normalized_target_embeddings() {
    let s = store();
    let p = params(&s, 1);
    let idx = build_index(&s, &p).unwrap();
    assert_eq!(idx.ids(), s.gallery_ids().as_slice());
    assert_eq!(idx.rows().cols(), s.d());
    for (r, &id) in idx.ids().iter().enumerate().step_by(17) {
        let e = encode_target(s.item(id).unwrap(), &p).unwrap();
        let n = e.iter().map(|v| v * v).sum::<f32>().sqrt();
        for (a, b) in idx.rows().row(r).iter().zip(&e) {
            assert!((a - b / n).abs() < 1e-6);
        }
    }
    assert_eq!(build_index(&s, &p).unwrap(), idx);
}

#[test]
fn single_item_index() {
    let idx = GalleryIndex::from_rows(vec![4], Tensor::matrix(1, 3, vec![3.0, 0.0, 4.0]).unwrap(), 0).unwrap();
    assert_eq!(idx.rows().data(), &[0.6, 0.0, 0.8]);
    let l = idx.rank(9, &[1.0, 0.0, 0.0]).unwrap();
    assert_eq!(l.ids, vec![4]);
}

#[test]
fn self_retrieval_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f32> = (0..20 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let idx = GalleryIndex::from_rows((0..20).collect(), Tensor::matrix(20, 8, data).unwrap(), 0).unwrap();
    let q: Vec<f32> = idx.rows().row(13).iter().map(|v| v * 2.5).collect();
    let l = idx.rank(0, &q).unwrap();
    assert_eq!(l.ids[0], 13);
    assert!((l.scores[0] - 1.0).abs() < 1e-6);
}

#[test]
fn ties_break_by_ascending_id() {
    let rows = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let idx = GalleryIndex::from_rows(vec![30, 5, 20, 10], rows, 0).unwrap();
    let l = idx.rank(0, &[1.0, 0.0]).unwrap();
    assert_eq!(l.ids, vec![10, 20, 30, 5]);
}

#[test]
fn ranking_matches_sort_oracle() {
    let ids = [7u64, 3, 9, 1, 4];
    let scores = [0.2f32, 0.9, -0.1, 0.9, 0.5];
    let l = RankedList::from_scores(0, &ids, &scores);
    assert_eq!(l.ids, vec![1, 3, 4, 7, 9]);
    assert_eq!(l.scores, vec![0.9, 0.9, 0.5, 0.2, -0.1]);
}

#[test]
fn recall_at_k_extremes() {
    let trips: Vec<Triplet> = (0..10).map(|i| trip(i, None)).collect();
    let first: Vec<RankedList> = (0..10).map(|i| list_with(i, 0, 20)).collect();
    assert_eq!(recall_at_k(&first, &trips, 1).unwrap(), 100.0);
    let sixth: Vec<RankedList> = (0..10).map(|i| list_with(i, 5, 20)).collect();
    assert_eq!(recall_at_k(&sixth, &trips, 5).unwrap(), 0.0);
    assert_eq!(recall_at_k(&sixth, &trips, 10).unwrap(), 100.0);
    assert!(matches!(recall_at_k(&first, &trips, 0), Err(SsnError::Argument(_))));
}

#[test]
fn recall_at_k_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 60u64;
    let mut lists = Vec::new();
    let mut trips = Vec::new();
    let mut positions = Vec::new();
    for q in 0..50 {
        let t = rng.random_range(0..n);
        let scores: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ids: Vec<u64> = (0..n).collect();
        // Oracle: one plus the number of ids that beat the target.
        let st = scores[t as usize];
        let above = (0..n)
            .filter(|&j| scores[j as usize] > st || (scores[j as usize] == st && j < t))
            .count();
        positions.push(above);
        lists.push(RankedList::from_scores(q, &ids, &scores));
        trips.push(trip(t, None));
    }
    for k in [1, 3, 5, 10, 50] {
        let want = 100.0 * positions.iter().filter(|&&p| p < k).count() as f64 / 50.0;
        assert_eq!(recall_at_k(&lists, &trips, k).unwrap(), want);
    }
}

#[test]
fn missing_target_is_a_data_error() {
    let l = vec![list_with(3, 0, 5)];
    assert!(matches!(recall_at_k(&l, &[trip(77, None)], 1), Err(SsnError::Data(_))));
}

#[test]
fn subset_recall_counts_within_subset() {
    // Target 0 is outscored by two subset members and by many non-members.
    let ids: Vec<u64> = (0..40).collect();
    let mut scores: Vec<f32> = (0..40).map(|i| 10.0 - i as f32 * 0.1).collect();
    scores[0] = 7.0;
    let l = vec![RankedList::from_scores(0, &ids, &scores)];
    let t = vec![trip(0, Some([1, 2, 38, 37, 36, 35]))];
    assert_eq!(recall_at_k(&l, &t, 10).unwrap(), 0.0);
    assert_eq!(recall_subset_at_k(&l, &t, 2).unwrap(), 0.0);
    assert_eq!(recall_subset_at_k(&l, &t, 3).unwrap(), 100.0);
    assert!(matches!(
        recall_subset_at_k(&l, &[trip(0, None)], 1),
        Err(SsnError::Data(_))
    ));
}

#[test]
fn mean_recall_rounds_decimally() {
    assert_eq!(mean_of(69.98, 68.19), 69.09);
    assert_eq!(mean_of(77.25, 71.76), 74.51);
    assert_eq!(mean_of(50.0, 50.0), 50.0);
    assert_eq!(round2(1.005), 1.01);
    assert_eq!(round2(2.675), 2.68);
    assert_eq!(round2(0.004999), 0.0);
    let mut rep = RecallReport::default();
    rep.recall_at.insert(5, 69.98);
    assert!(matches!(mean_recall(&rep), Err(SsnError::Report(_))));
    rep.subset_recall_at.insert(1, 68.19);
    assert_eq!(mean_recall(&rep).unwrap(), 69.09);
}

#[test]
fn report_json_and_table() {
    let mut rep = RecallReport::default();
    rep.recall_at.insert(1, 12.5);
    rep.recall_at.insert(5, 40.0);
    rep.subset_recall_at.insert(1, 30.0);
    rep.mean_recall = Some(35.0);
    let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
    assert_eq!(json["recall"]["5"], 40.0);
    assert_eq!(json["recall_subset"]["1"], 30.0);
    assert_eq!(json["mean_recall"], 35.0);
    assert_eq!(RecallReport::from_json(&rep.to_json()).unwrap(), rep);
    let table = rep.table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("R@1") && lines[0].contains("Rsub@1") && lines[0].contains("Avg"));
    assert!(lines[1].contains("12.50") && lines[1].contains("35.00"));
    assert_eq!(lines[0].len(), lines[1].len());
}

#[test]
fn stale_index_is_rejected() {
    let s = store();
    let p = params(&s, 1);
    let idx = build_index(&s, &p).unwrap();
    let mut q = p.clone();
    q.tensor_mut(0).data_mut()[0] += 1.0;
    let t = &s.triplets()[0];
    let err = query(s.item(t.reference_id).unwrap(), s.item(t.text_id).unwrap(), &idx, &q).unwrap_err();
    assert!(matches!(err, SsnError::StaleIndex { .. }));
    assert!(evaluate_with_index(&s, &idx, &q, &EvalOptions::default()).is_err());
    assert!(query(s.item(t.reference_id).unwrap(), s.item(t.text_id).unwrap(), &idx, &p).is_ok());
}

#[test]
fn evaluate_matches_single_queries() {
    let s = store();
    let p = params(&s, 4);
    let (rep, lists) = evaluate(&s, &p, &EvalOptions::default()).unwrap();
    let idx = build_index(&s, &p).unwrap();
    for (t, l) in s.triplets().iter().zip(&lists).step_by(5) {
        let one = query(s.item(t.reference_id).unwrap(), s.item(t.text_id).unwrap(), &idx, &p).unwrap();
        assert_eq!(one.ids, l.ids);
    }
    assert_eq!(rep.recall_at.keys().copied().collect::<Vec<_>>(), RECALL_KS.to_vec());
    assert_eq!(rep.subset_recall_at.len(), 3);
    assert_eq!(rep.mean_recall, Some(mean_recall(&rep).unwrap()));
}

#[test]
fn exclude_reference_drops_only_the_reference() {
    let s = store();
    let p = params(&s, 4);
    let opts = EvalOptions {
        exclude_reference: true,
        ..EvalOptions::default()
    };
    let (_, with) = evaluate(&s, &p, &EvalOptions::default()).unwrap();
    let (_, without) = evaluate(&s, &p, &opts).unwrap();
    for ((t, a), b) in s.triplets().iter().zip(&with).zip(&without) {
        assert_eq!(b.ids.len(), a.ids.len() - 1);
        assert!(b.rank_of(t.reference_id).is_none());
        assert_eq!(a.without(t.reference_id), *b);
    }
}

#[test]
fn zero_sigma_probe_is_identical() {
    let s = store();
    let p = params(&s, 4);
    let (clean, noisy) = sensitivity_probe(&s, &p, 0.0, 1, &EvalOptions::default()).unwrap();
    assert_eq!(clean, noisy);
    assert!(sensitivity_probe(&s, &p, -1.0, 1, &EvalOptions::default()).is_err());
}

#[test]
fn perturbation_has_requested_scale() {
    let s = store();
    let item = s.item(s.triplets()[0].reference_id).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noisy = perturb_reference(item, 0.5, &mut rng);
    let diff: Vec<f32> = noisy.tokens.data().iter().zip(item.tokens.data()).map(|(a, b)| a - b).collect();
    let ratio = rms(&diff) / rms(item.tokens.data());
    assert!((ratio - 0.5).abs() < 0.15, "ratio {ratio}");
}

fn arb_lists() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<u64>, Vec<[u64; 6]>)> {
    (8usize..20, 1usize..12).prop_flat_map(|(n, q)| {
        (
            prop::collection::vec(prop::collection::vec(-4i32..4, n), q)
                .prop_map(|v| v.into_iter().map(|r| r.into_iter().map(|x| x as f32).collect()).collect()),
            prop::collection::vec(0..n as u64, q),
            prop::collection::vec(Just(0u64).prop_perturb(move |_, mut rng| {
                let mut s = [0u64; 6];
                for x in &mut s {
                    *x = rng.random_range(0..n as u64);
                }
                s
            }), q),
        )
    })
}

fn build(scores: &[Vec<f32>], targets: &[u64], subsets: Option<&[[u64; 6]]>) -> (Vec<RankedList>, Vec<Triplet>) {
    let ids: Vec<u64> = (0..scores[0].len() as u64).collect();
    let lists = scores.iter().map(|s| RankedList::from_scores(0, &ids, s)).collect();
    let trips = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| trip(t, subsets.map(|s| s[i])))
        .collect();
    (lists, trips)
}

proptest! {
    #[test]
    fn recall_is_monotone_and_bounded((scores, targets, _) in arb_lists()) {
        let (lists, trips) = build(&scores, &targets, None);
        let mut prev = 0.0;
        for k in 1..=scores[0].len() {
            let r = recall_at_k(&lists, &trips, k).unwrap();
            prop_assert!((0.0..=100.0).contains(&r));
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 100.0);
    }

    #[test]
    fn positive_score_scaling_keeps_ranking((scores, targets, _) in arb_lists(), c in 0.1f32..10.0) {
        let (a, trips) = build(&scores, &targets, None);
        let scaled: Vec<Vec<f32>> = scores.iter().map(|r| r.iter().map(|v| v * 4.0 * c.round().max(1.0)).collect()).collect();
        let (b, _) = build(&scaled, &targets, None);
        for k in [1, 3, 5] {
            prop_assert_eq!(recall_at_k(&a, &trips, k).unwrap(), recall_at_k(&b, &trips, k).unwrap());
        }
    }

    #[test]
    fn gallery_order_does_not_matter((scores, _, _) in arb_lists(), seed in 0u64..1000) {
        let n = scores[0].len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let ids: Vec<u64> = perm.iter().map(|&i| i as u64).collect();
        for s in &scores {
            let shuffled: Vec<f32> = perm.iter().map(|&i| s[i]).collect();
            let a = RankedList::from_scores(0, &(0..n as u64).collect::<Vec<_>>(), s);
            let b = RankedList::from_scores(0, &ids, &shuffled);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn subset_hit_at_one_implies_full_rank_bound((scores, targets, subsets) in arb_lists()) {
        let (lists, trips) = build(&scores, &targets, Some(&subsets));
        // A full-gallery hit at K is a subset hit at K, per query.
        for (l, t) in lists.iter().zip(&trips) {
            let one_l = std::slice::from_ref(l);
            let one_t = std::slice::from_ref(t);
            for k in 1..=3 {
                if recall_at_k(one_l, one_t, k).unwrap() == 100.0 {
                    prop_assert_eq!(recall_subset_at_k(one_l, one_t, k).unwrap(), 100.0);
                }
            }
        }
        let r = recall_subset_at_k(&lists, &trips, 7).unwrap();
        prop_assert_eq!(r, 100.0);
    }

    #[test]
    fn round2_is_idempotent_on_two_decimals(c in -100_000i64..100_000) {
        let x = c as f64 / 100.0;
        prop_assert_eq!(round2(x), x);
    }
}
