//! Mapping of multiple implicit feedback signals onto one ordinal category.
//!
//! Feedback types are ranked densest-first, and a sample's category is one
//! past the index of the sparsest feedback it reached: impression-only
//! samples are category 1, a sample whose deepest positive signal is the
//! `t`-th feedback (1-based) is category `t + 1`.

use crate::error::{GnolrError, Result};

/// Ordinal category `k ∈ 1..=T+1`. Category 0 is the virtual null
/// category and is never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OrdinalLabel(u8);

impl OrdinalLabel {
    pub fn new(k: usize, num_feedback: usize) -> Result<Self> {
        if k == 0 || k > num_feedback + 1 {
            return Err(GnolrError::Argument(format!(
                "ordinal category {k} outside 1..={}",
                num_feedback + 1
            )));
        }
        if k > u8::MAX as usize {
            return Err(GnolrError::Argument(format!("ordinal category {k} too large")));
        }
        Ok(Self(k as u8))
    }

    /// Builds a label without range checks; callers guarantee `k ≥ 1`.
    pub(crate) fn raw(k: u8) -> Self {
        debug_assert!(k >= 1);
        Self(k)
    }

    #[inline]
    pub fn get(self) -> usize {
        self.0 as usize
    }

    /// Whether this sample reached beyond feedback level `c`.
    #[inline]
    pub fn exceeds(self, c: usize) -> bool {
        self.get() > c
    }
}

/// Feedback names and positive counts, stored in sparsity order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackSchema {
    /// Names in sparsity order (densest first).
    pub names: Vec<String>,
    /// Positive counts aligned with `names`.
    pub positive_counts: Vec<u64>,
    /// `order[rank] = original declaration index` of the feedback at `rank`.
    pub order: Vec<usize>,
}

impl FeedbackSchema {
    /// Orders declared feedback by positive count, densest first.
    pub fn from_declared(names: &[String], positive_counts: &[u64]) -> Result<Self> {
        if names.len() != positive_counts.len() {
            return Err(GnolrError::Schema(format!(
                "{} feedback names but {} counts",
                names.len(),
                positive_counts.len()
            )));
        }
        let order = order_feedback(positive_counts)?;
        Ok(Self {
            names: order.iter().map(|&i| names[i].clone()).collect(),
            positive_counts: order.iter().map(|&i| positive_counts[i]).collect(),
            order,
        })
    }

    /// Number of feedback types `T`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Reorders bits given in declaration order into sparsity order.
    pub fn reorder_bits(&self, declared: &[u8]) -> Vec<u8> {
        self.order.iter().map(|&i| declared[i]).collect()
    }
}

/// Permutation placing denser feedback first. Equal counts keep their
/// original relative order.
pub fn order_feedback(positive_counts: &[u64]) -> Result<Vec<usize>> {
    if positive_counts.is_empty() {
        return Err(GnolrError::Schema("no feedback types declared".into()));
    }
    let mut order: Vec<usize> = (0..positive_counts.len()).collect();
    // sort_by is stable
    order.sort_by(|&a, &b| positive_counts[b].cmp(&positive_counts[a]));
    Ok(order)
}

/// Category of one sample from its feedback bits in sparsity order.
///
/// Non-monotone patterns (a sparse signal without the denser ones) are legal;
/// the deepest positive signal wins.
pub fn map_to_ordinal(bits: &[u8]) -> OrdinalLabel {
    let k = bits.iter().rposition(|&b| b != 0).map_or(1, |t| t + 2);
    OrdinalLabel::raw(k as u8)
}

/// Label seen by subtask `t`: categories above `t + 1` merge into `t + 1`.
pub fn remap_for_subtask(k: OrdinalLabel, t: usize, num_feedback: usize) -> Result<OrdinalLabel> {
    if t == 0 || t > num_feedback {
        return Err(GnolrError::Argument(format!("subtask {t} outside 1..={num_feedback}")));
    }
    Ok(OrdinalLabel::raw(k.get().min(t + 1) as u8))
}

/// Strictly increasing ordinal thresholds `a_1 < … < a_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet(Vec<f64>);

impl ThresholdSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(GnolrError::Argument("threshold set is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GnolrError::Argument("thresholds must be finite".into()));
        }
        if let Some(w) = values.windows(2).position(|w| w[0] >= w[1]) {
            return Err(GnolrError::Argument(format!(
                "thresholds must be strictly increasing (a_{} = {} ≥ a_{} = {})",
                w + 1,
                values[w],
                w + 2,
                values[w + 1]
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Threshold `a_c` for `c ∈ 1..=T`.
    #[inline]
    pub fn a(&self, c: usize) -> f64 {
        self.0[c - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Log-odds threshold for a category whose upper tail has probability `p`:
/// `ln((1 − p) / p)`.
pub fn threshold_from_fraction(p: f64) -> f64 {
    ((1.0 - p) / p).ln()
}

/// Estimates `a_c = ln((1 − p̂_c) / p̂_c)` with `p̂_c` the fraction of labels
/// strictly above `c`.
pub fn estimate_thresholds(labels: &[OrdinalLabel], num_feedback: usize) -> Result<ThresholdSet> {
    let mut counts = vec![0u64; num_feedback + 2];
    for l in labels {
        let k = l.get();
        if k > num_feedback + 1 {
            return Err(GnolrError::Argument(format!(
                "label {k} exceeds T+1 = {}",
                num_feedback + 1
            )));
        }
        counts[k] += 1;
    }
    let total = labels.len() as u64;
    // above[c] = #labels > c
    let mut above = Vec::with_capacity(num_feedback);
    let mut running = total;
    for n in &counts[1..=num_feedback] {
        running -= n;
        above.push(running);
    }
    estimate_thresholds_from_counts(&above, total)
}

/// Same estimate from aggregate counts: `above[c-1]` samples exceed level
/// `c` out of `total`.
pub fn estimate_thresholds_from_counts(above: &[u64], total: u64) -> Result<ThresholdSet> {
    let mut values = Vec::with_capacity(above.len());
    for (i, &n) in above.iter().enumerate() {
        let c = i + 1;
        if n == 0 {
            return Err(GnolrError::ThresholdEstimation {
                category: c,
                reason: "no sample lies above this category".into(),
            });
        }
        if n >= total {
            return Err(GnolrError::ThresholdEstimation {
                category: c,
                reason: "no sample lies at or below this category".into(),
            });
        }
        values.push(threshold_from_fraction(n as f64 / total as f64));
    }
    ThresholdSet::new(values).map_err(|e| GnolrError::ThresholdEstimation {
        category: 0,
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::stable_sigmoid;
    use proptest::prelude::*;

    fn lbl(k: usize) -> OrdinalLabel {
        OrdinalLabel::raw(k as u8)
    }

    #[test]
    fn ordering_examples() {
        // click 2.62M, pay 13.1K
        assert_eq!(order_feedback(&[2_620_000, 13_100]).unwrap(), vec![0, 1]);
        assert_eq!(order_feedback(&[5, 5]).unwrap(), vec![0, 1]);
        assert_eq!(order_feedback(&[1, 100, 10]).unwrap(), vec![1, 2, 0]);
        assert!(matches!(order_feedback(&[]), Err(GnolrError::Schema(_))));
    }

    #[test]
    fn schema_reorders_names_and_bits() {
        let names = vec!["pay".to_string(), "click".to_string()];
        let s = FeedbackSchema::from_declared(&names, &[3, 40]).unwrap();
        assert_eq!(s.names, vec!["click", "pay"]);
        assert_eq!(s.positive_counts, vec![40, 3]);
        assert_eq!(s.reorder_bits(&[1, 0]), vec![0, 1]);
    }

    #[test]
    fn mapping_examples() {
        assert_eq!(map_to_ordinal(&[0, 0, 0]).get(), 1);
        assert_eq!(map_to_ordinal(&[1, 0, 1]).get(), 4);
        assert_eq!(map_to_ordinal(&[1, 1]).get(), 3);
        assert_eq!(map_to_ordinal(&[0, 1]).get(), 3);
    }

    #[test]
    fn remap_examples() {
        assert_eq!(remap_for_subtask(lbl(4), 1, 3).unwrap().get(), 2);
        assert_eq!(remap_for_subtask(lbl(1), 3, 3).unwrap().get(), 1);
        assert_eq!(remap_for_subtask(lbl(3), 2, 3).unwrap().get(), 3);
        assert!(matches!(remap_for_subtask(lbl(2), 0, 3), Err(GnolrError::Argument(_))));
        assert!(remap_for_subtask(lbl(2), 4, 3).is_err());
    }

    #[test]
    fn threshold_examples() {
        let labels: Vec<_> = [1, 2, 1, 2].iter().map(|&k| lbl(k)).collect();
        let a = estimate_thresholds(&labels, 1).unwrap();
        assert_eq!(a.values(), &[0.0]);

        let total = 69_100_000u64;
        let a = estimate_thresholds_from_counts(&[2_620_000, 13_100], total).unwrap();
        assert!((a.a(1) - 3.2343).abs() < 0.01, "{}", a.a(1));
        assert!((a.a(2) - 8.5681).abs() < 0.01, "{}", a.a(2));
    }

    #[test]
    fn threshold_errors_name_the_category() {
        let labels: Vec<_> = [1, 2, 2].iter().map(|&k| lbl(k)).collect();
        match estimate_thresholds(&labels, 2) {
            Err(GnolrError::ThresholdEstimation { category, .. }) => assert_eq!(category, 2),
            other => panic!("unexpected {other:?}"),
        }
        let labels: Vec<_> = [2, 3].iter().map(|&k| lbl(k)).collect();
        match estimate_thresholds(&labels, 2) {
            Err(GnolrError::ThresholdEstimation { category, .. }) => assert_eq!(category, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn threshold_set_rejects_unordered() {
        assert!(ThresholdSet::new(vec![1.0, 1.0]).is_err());
        assert!(ThresholdSet::new(vec![2.0, 1.0]).is_err());
        assert!(ThresholdSet::new(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn mapping_is_monotone(bits in proptest::collection::vec(0u8..2, 1..6), flip in 0usize..6) {
            let flip = flip % bits.len();
            let mut raised = bits.clone();
            raised[flip] = 1;
            prop_assert!(map_to_ordinal(&raised) >= map_to_ordinal(&bits));
        }

        #[test]
        fn top_subtask_is_identity(t_max in 1usize..8, k in 1usize..9) {
            prop_assume!(k <= t_max + 1);
            prop_assert_eq!(remap_for_subtask(lbl(k), t_max, t_max).unwrap(), lbl(k));
        }

        #[test]
        fn remap_composes_as_min(t_max in 1usize..8, k in 1usize..9, t in 1usize..8, u in 1usize..8) {
            prop_assume!(k <= t_max + 1 && t <= t_max && u <= t_max);
            let once = remap_for_subtask(remap_for_subtask(lbl(k), t, t_max).unwrap(), u, t_max).unwrap();
            prop_assert_eq!(once, remap_for_subtask(lbl(k), t.min(u), t_max).unwrap());
        }

        #[test]
        fn estimated_thresholds_recover_fractions(counts in proptest::collection::vec(1usize..200, 2..6)) {
            // counts[k-1] samples with label k; every level populated
            let t = counts.len() - 1;
            let labels: Vec<_> = counts
                .iter()
                .enumerate()
                .flat_map(|(i, &n)| std::iter::repeat_n(lbl(i + 1), n))
                .collect();
            let a = estimate_thresholds(&labels, t).unwrap();
            let total = labels.len() as f64;
            for c in 1..=t {
                let above: usize = counts[c..].iter().sum();
                let p = above as f64 / total;
                prop_assert!((stable_sigmoid(-a.a(c)) - p).abs() < 1e-12);
            }
            prop_assert!(a.values().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
