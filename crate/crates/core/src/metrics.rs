//! Ranking and retrieval metrics, angular histograms and metric reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use rayon::prelude::*;

use crate::error::{GnolrError, Result};
use crate::tensor::dot;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
    pub user: u32,
}

/// Rank-based AUC with tied scores credited one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GnolrError::dim("auc", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GnolrError::Argument("auc scores must be finite".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GnolrError::UndefinedMetric(format!(
            "auc needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // positives beaten: for each tie group, count negatives strictly below
    // plus half the negatives inside the group
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&o| labels[o]).count();
        let group_neg = (j - i) - group_pos;
        wins += group_pos as f64 * (neg_below as f64 + 0.5 * group_neg as f64);
        neg_below += group_neg;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

pub fn auc_samples(samples: &[ScoredSample]) -> Result<f64> {
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    auc(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GaucWeighting {
    /// Each user weighted by `#pos · #neg`.
    #[default]
    PairCount,
    Uniform,
}

/// Per-user AUC averaged over users that have both classes.
pub fn gauc(samples: &[ScoredSample], weighting: GaucWeighting) -> Result<f64> {
    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for s in samples {
        let g = groups.entry(s.user).or_default();
        g.0.push(s.score);
        g.1.push(s.label);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (scores, labels) in groups.values() {
        let pos = labels.iter().filter(|&&l| l).count();
        let neg = labels.len() - pos;
        if pos == 0 || neg == 0 {
            continue;
        }
        let w = match weighting {
            GaucWeighting::PairCount => (pos * neg) as f64,
            GaucWeighting::Uniform => 1.0,
        };
        num += w * auc(scores, labels)?;
        den += w;
    }
    if den == 0.0 {
        return Err(GnolrError::UndefinedMetric("gauc: no user has both classes".into()));
    }
    Ok(num / den)
}

/// Item embeddings for exact nearest-neighbour search.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub ids: Vec<u32>,
    pub dim: usize,
    data: Vec<f64>,
}

impl RetrievalIndex {
    pub fn new(ids: Vec<u32>, rows: &[Vec<f64>]) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(GnolrError::dim("retrieval index", ids.len(), rows.len()));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(GnolrError::dim("retrieval index row", dim, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { ids, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` items closest to `query` in Euclidean distance, ties broken by
/// ascending item id. `k` larger than the index returns the full ranking.
pub fn topk_retrieve(query: &[f64], index: &RetrievalIndex, k: usize) -> Result<Vec<u32>> {
    if query.len() != index.dim && !index.is_empty() {
        return Err(GnolrError::dim("topk_retrieve", index.dim, query.len()));
    }
    let k = k.min(index.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut cand: Vec<(f64, u32)> = (0..index.len())
        .map(|i| (sq_dist(query, index.row(i)), index.ids[i]))
        .collect();
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    Ok(cand.into_iter().map(|(_, id)| id).collect())
}

/// `|top_k ∩ positives| / |positives|`; `None` when there are no positives.
pub fn recall_at_k(top: &[u32], k: usize, positives: &HashSet<u32>) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let hits = top
        .iter()
        .take(k)
        .filter(|i| positives.contains(i))
        .collect::<HashSet<_>>()
        .len();
    Some(hits as f64 / positives.len() as f64)
}

/// Mean Recall@K over users with at least one positive, for each `K` in `ks`.
pub fn mean_recall(
    queries: &[(u32, Vec<f64>)],
    index: &RetrievalIndex,
    ks: &[usize],
    positives: &HashMap<u32, HashSet<u32>>,
) -> Result<Vec<f64>> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let per_user: Vec<Option<Vec<f64>>> = queries
        .par_iter()
        .map(|(user, q)| {
            let Some(pos) = positives.get(user).filter(|p| !p.is_empty()) else {
                return Ok(None);
            };
            let top = topk_retrieve(q, index, max_k)?;
            Ok(Some(
                ks.iter().map(|&k| recall_at_k(&top, k, pos).unwrap_or(0.0)).collect(),
            ))
        })
        .collect::<Result<_>>()?;
    let eligible: Vec<&Vec<f64>> = per_user.iter().flatten().collect();
    if eligible.is_empty() {
        return Err(GnolrError::UndefinedMetric("recall: no user has positives".into()));
    }
    Ok((0..ks.len())
        .map(|j| eligible.iter().map(|r| r[j]).sum::<f64>() / eligible.len() as f64)
        .collect())
}

/// Counts of user–item angles in 1° bins, split by label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AngleHistogram {
    pub pos: Vec<u64>,
    pub neg: Vec<u64>,
}

impl Default for AngleHistogram {
    fn default() -> Self {
        Self {
            pos: vec![0; 180],
            neg: vec![0; 180],
        }
    }
}

impl AngleHistogram {
    /// Adds one pair; the angle is the arc cosine of the clamped cosine.
    pub fn add(&mut self, user: &[f64], item: &[f64], label: bool) -> Result<()> {
        if user.len() != item.len() {
            return Err(GnolrError::dim("angle_histogram", user.len(), item.len()));
        }
        let nu = dot(user, user).sqrt();
        let ni = dot(item, item).sqrt();
        let cos = if nu > 0.0 && ni > 0.0 {
            dot(user, item) / (nu * ni)
        } else {
            0.0
        };
        let deg = cos.clamp(-1.0, 1.0).acos().to_degrees();
        let bin = (deg.floor() as usize).min(179);
        if label {
            self.pos[bin] += 1;
        } else {
            self.neg[bin] += 1;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_deg,pos,neg")?;
        for (b, (p, n)) in self.pos.iter().zip(&self.neg).enumerate() {
            writeln!(w, "{b},{p},{n}")?;
        }
        Ok(())
    }
}

pub fn angle_histogram<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64], bool)>) -> Result<AngleHistogram> {
    let mut h = AngleHistogram::default();
    for (u, i, l) in pairs {
        h.add(u, i, l)?;
    }
    Ok(h)
}

/// Named metric values with sorted, stable key order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        self.values.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// One `metric=value` line per entry.
    pub fn to_lines(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .values
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::from(*v)))
            .collect();
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("finite map") + "\n"
    }
}
