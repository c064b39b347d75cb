use std::collections::HashSet;

use gnolr_core::metrics::{auc, gauc, recall_at_k, topk_retrieve, GaucWeighting, RetrievalIndex, ScoredSample};
use proptest::prelude::*;

fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (s, _) in scores.iter().zip(labels).filter(|(_, l)| **l) {
        for (t, _) in scores.iter().zip(labels).filter(|(_, l)| !**l) {
            den += 1.0;
            num += if s > t {
                1.0
            } else if s == t {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

fn scored() -> impl Strategy<Value = Vec<(u8, bool)>> {
    proptest::collection::vec((0u8..12, any::<bool>()), 2..200)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
}

proptest! {
    #[test]
    fn auc_matches_pairwise_with_ties(v in scored()) {
        let s: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
        let l: Vec<bool> = v.iter().map(|x| x.1).collect();
        prop_assert!((auc(&s, &l).unwrap() - pairwise(&s, &l)).abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_to_monotone_transforms(v in scored()) {
        let s: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
        let t: Vec<f64> = s.iter().map(|x| (x * 0.3).exp() - 4.0).collect();
        let l: Vec<bool> = v.iter().map(|x| x.1).collect();
        prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
    }

    #[test]
    fn single_user_gauc_equals_auc(v in scored()) {
        let samples: Vec<ScoredSample> = v
            .iter()
            .map(|x| ScoredSample { score: x.0 as f64, label: x.1, user: 3 })
            .collect();
        let s: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
        let l: Vec<bool> = v.iter().map(|x| x.1).collect();
        let a = auc(&s, &l).unwrap();
        for w in [GaucWeighting::PairCount, GaucWeighting::Uniform] {
            prop_assert!((gauc(&samples, w).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn full_retrieval_is_a_permutation(rows in proptest::collection::vec(proptest::collection::vec(-2i8..=2, 3), 1..60)) {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| *x as f64).collect()).collect();
        let ids: Vec<u32> = (0..rows.len() as u32).map(|i| 1000 - i).collect();
        let index = RetrievalIndex::new(ids.clone(), &rows).unwrap();
        let mut got = topk_retrieve(&[0.5, -0.5, 1.0], &index, rows.len()).unwrap();
        got.sort_unstable();
        let mut want = ids;
        want.sort_unstable();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn recall_stays_in_unit_interval(
        top in proptest::collection::vec(0u32..50, 0..30),
        pos in proptest::collection::hash_set(0u32..50, 1..20),
        k in 1usize..40,
    ) {
        let r = recall_at_k(&top, k, &pos).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }
}

#[test]
fn recall_without_positives_is_undefined() {
    assert_eq!(recall_at_k(&[1, 2], 2, &HashSet::new()), None);
}
