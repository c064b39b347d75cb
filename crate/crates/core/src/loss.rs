//! Generalized proportional-odds model over kernel similarities, its nested
//! subtask loss, the plain ordinal and binary cross-entropy baselines, and the
//! listwise (ListNet) term.
//!
//! Everything is expressed through *cumulative logits*
//! `z_c = log P(k ≤ c) / P(k > c)`, `c = 1..=T`, so that
//! `P(k ≤ c) = σ(z_c)`, `P(k ≤ 0) = 0` and `P(k ≤ T+1) = 1`. The model
//! variants differ only in how kernels map to `z`, see [`LogitLayout`].

use crate::error::{GnolrError, Result};
use crate::feedback::{remap_for_subtask, OrdinalLabel, ThresholdSet};
use crate::tensor::{softplus, stable_sigmoid};

pub const DEFAULT_CLIP_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GnolrHyper {
    pub thresholds: ThresholdSet,
    /// Reshaping factor multiplying the kernel inside the sigmoid.
    pub gamma: f64,
    /// Lower clip applied to every probability before taking its log.
    pub clip_floor: f64,
}

impl GnolrHyper {
    pub fn new(thresholds: ThresholdSet, gamma: f64, clip_floor: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(GnolrError::Argument(format!("gamma must be > 0, got {gamma}")));
        }
        if clip_floor.is_nan() || clip_floor <= 0.0 {
            return Err(GnolrError::Argument(format!(
                "clip floor must be > 0, got {clip_floor}"
            )));
        }
        Ok(Self {
            thresholds,
            gamma,
            clip_floor,
        })
    }

    pub fn with_gamma(thresholds: ThresholdSet, gamma: f64) -> Result<Self> {
        Self::new(thresholds, gamma, DEFAULT_CLIP_FLOOR)
    }

    /// Number of feedback levels `T`.
    pub fn num_levels(&self) -> usize {
        self.thresholds.len()
    }
}

/// How per-pair kernel values turn into cumulative logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitLayout {
    /// Nested prefix embeddings: `z_c = a_c − γ Σ_{j≤c} s_j`, which equals
    /// `a_c − cγ·K(E^c)` for unit sub-embeddings. One kernel per level.
    Prefix,
    /// Each level uses only its own sub-embedding: `z_c = a_c − cγ s_c`.
    PerCategory,
    /// One shared kernel for all levels: `z_c = a_c − cγ s`.
    Shared,
}

/// Whether the ordinal likelihood is summed over the `T` remapped subtasks
/// or evaluated once over all categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossStructure {
    Nested,
    Plain,
}

impl LogitLayout {
    pub fn num_kernels(self, num_levels: usize) -> usize {
        match self {
            LogitLayout::Shared => 1,
            _ => num_levels,
        }
    }

    /// Cumulative logits `z_1..z_T` from per-pair kernels.
    pub fn logits(self, kernels: &[f64], hyper: &GnolrHyper) -> Vec<f64> {
        let g = hyper.gamma;
        let t = hyper.num_levels();
        debug_assert_eq!(kernels.len(), self.num_kernels(t));
        match self {
            LogitLayout::Prefix => {
                let mut acc = 0.0;
                (1..=t)
                    .map(|c| {
                        acc += kernels[c - 1];
                        hyper.thresholds.a(c) - g * acc
                    })
                    .collect()
            }
            LogitLayout::PerCategory => (1..=t)
                .map(|c| hyper.thresholds.a(c) - c as f64 * g * kernels[c - 1])
                .collect(),
            LogitLayout::Shared => (1..=t)
                .map(|c| hyper.thresholds.a(c) - c as f64 * g * kernels[0])
                .collect(),
        }
    }

    /// Chain rule from `∂L/∂z` to `∂L/∂kernels`.
    pub fn kernel_grad(self, dz: &[f64], hyper: &GnolrHyper) -> Vec<f64> {
        let g = hyper.gamma;
        match self {
            LogitLayout::Prefix => {
                // s_j feeds every z_c with c ≥ j
                let mut out = vec![0.0; dz.len()];
                let mut suffix = 0.0;
                for j in (0..dz.len()).rev() {
                    suffix += dz[j];
                    out[j] = -g * suffix;
                }
                out
            }
            LogitLayout::PerCategory => dz.iter().enumerate().map(|(i, d)| -((i + 1) as f64) * g * d).collect(),
            LogitLayout::Shared => {
                let weighted: f64 = dz.iter().enumerate().map(|(i, d)| (i + 1) as f64 * d).sum();
                vec![-g * weighted]
            }
        }
    }
}

/// `P(k = category)` over categories `1..=m+1` given cumulative logits
/// `z_1..z_m`, together with `∂P/∂z` entries as `(index, derivative)`.
fn category_prob(category: usize, z: &[f64]) -> (f64, [(usize, f64); 2]) {
    let m = z.len();
    let dsig = |x: f64| {
        let s = stable_sigmoid(x);
        s * (1.0 - s)
    };
    if category == 1 && m >= 1 {
        (stable_sigmoid(z[0]), [(0, dsig(z[0])), (usize::MAX, 0.0)])
    } else if category == m + 1 {
        // 1 − σ(z_m) evaluated as σ(−z_m)
        (stable_sigmoid(-z[m - 1]), [(m - 1, -dsig(z[m - 1])), (usize::MAX, 0.0)])
    } else {
        let hi = category - 1;
        let lo = category - 2;
        (
            stable_sigmoid(z[hi]) - stable_sigmoid(z[lo]),
            [(hi, dsig(z[hi])), (lo, -dsig(z[lo]))],
        )
    }
}

/// Clipped negative log-likelihood of `category` under cumulative logits `z`,
/// accumulating `∂/∂z` into `grad`. Clipped terms contribute no gradient.
fn clipped_nll(category: usize, z: &[f64], clip: f64, grad: &mut [f64]) -> f64 {
    let (p, parts) = category_prob(category, z);
    if p.is_nan() {
        return f64::NAN;
    }
    if p < clip {
        return -clip.ln();
    }
    for (i, d) in parts {
        if i != usize::MAX {
            grad[i] -= d / p;
        }
    }
    -p.ln()
}

/// Ordinal negative log-likelihood and its gradient with respect to the
/// cumulative logits.
pub fn ordinal_nll_from_logits(label: OrdinalLabel, z: &[f64], clip: f64, structure: LossStructure) -> (f64, Vec<f64>) {
    let t = z.len();
    let mut grad = vec![0.0; t];
    let loss = match structure {
        LossStructure::Plain => clipped_nll(label.get(), z, clip, &mut grad),
        LossStructure::Nested => (1..=t)
            .map(|sub| {
                let k = label.get().min(sub + 1);
                clipped_nll(k, &z[..sub], clip, &mut grad[..sub])
            })
            .sum(),
    };
    (loss, grad)
}

/// Loss and `∂loss/∂kernels` for one sample under any ordinal variant.
pub fn ordinal_loss_grad(
    label: OrdinalLabel,
    kernels: &[f64],
    hyper: &GnolrHyper,
    layout: LogitLayout,
    structure: LossStructure,
) -> (f64, Vec<f64>) {
    let z = layout.logits(kernels, hyper);
    let (loss, dz) = ordinal_nll_from_logits(label, &z, hyper.clip_floor, structure);
    (loss, layout.kernel_grad(&dz, hyper))
}

/// Per-level scores `P(k > c) = σ(−z_c)` for `c = 1..=T`.
pub fn ordinal_scores(kernels: &[f64], hyper: &GnolrHyper, layout: LogitLayout) -> Vec<f64> {
    layout
        .logits(kernels, hyper)
        .into_iter()
        .map(|z| stable_sigmoid(-z))
        .collect()
}

fn check_nested(nested: &[f64], hyper: &GnolrHyper) -> Result<()> {
    if nested.len() != hyper.num_levels() {
        return Err(GnolrError::dim("nested kernels", hyper.num_levels(), nested.len()));
    }
    Ok(())
}

/// Cumulative logits from nested kernels `K(E^1)..K(E^T)`:
/// `z_c = a_c − cγ·K(E^c)`.
pub fn nested_logits(nested: &[f64], hyper: &GnolrHyper) -> Vec<f64> {
    nested
        .iter()
        .enumerate()
        .map(|(i, k)| hyper.thresholds.a(i + 1) - (i + 1) as f64 * hyper.gamma * k)
        .collect()
}

/// `P(k ≤ c)` given the nested kernel `K(E^c)`. Exactly 0 for `c = 0` and
/// exactly 1 for `c = T + 1`.
pub fn cumulative_prob(c: usize, kernel_value: f64, hyper: &GnolrHyper) -> Result<f64> {
    let t = hyper.num_levels();
    match c {
        0 => Ok(0.0),
        c if c == t + 1 => Ok(1.0),
        c if c <= t => Ok(stable_sigmoid(
            hyper.thresholds.a(c) - c as f64 * hyper.gamma * kernel_value,
        )),
        _ => Err(GnolrError::Argument(format!(
            "cumulative category {c} outside 0..={}",
            t + 1
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryDistribution {
    /// `P(k = c)` for `c = 1..=T+1`, unclipped.
    pub probs: Vec<f64>,
}

impl CategoryDistribution {
    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Full category distribution from nested kernels `K(E^1)..K(E^T)`. Entries
/// may be negative when kernels violate ordering; the losses clip.
pub fn category_distribution(nested: &[f64], hyper: &GnolrHyper) -> Result<CategoryDistribution> {
    check_nested(nested, hyper)?;
    let z = nested_logits(nested, hyper);
    let probs = (1..=z.len() + 1).map(|c| category_prob(c, &z).0).collect();
    Ok(CategoryDistribution { probs })
}

/// Loss of subtask `t` on the remapped label.
pub fn subtask_loss(t: usize, label: OrdinalLabel, nested: &[f64], hyper: &GnolrHyper) -> Result<f64> {
    check_nested(nested, hyper)?;
    let k = remap_for_subtask(label, t, hyper.num_levels())?;
    let z = nested_logits(nested, hyper);
    let mut scratch = vec![0.0; t];
    Ok(clipped_nll(k.get(), &z[..t], hyper.clip_floor, &mut scratch))
}

/// Sum of all subtask losses for one sample.
pub fn gnolr_total_loss(label: OrdinalLabel, nested: &[f64], hyper: &GnolrHyper) -> Result<f64> {
    check_nested(nested, hyper)?;
    let z = nested_logits(nested, hyper);
    Ok(ordinal_nll_from_logits(label, &z, hyper.clip_floor, LossStructure::Nested).0)
}

/// [`gnolr_total_loss`] with its gradient with respect to the nested kernels.
pub fn gnolr_total_loss_grad(label: OrdinalLabel, nested: &[f64], hyper: &GnolrHyper) -> Result<(f64, Vec<f64>)> {
    check_nested(nested, hyper)?;
    let z = nested_logits(nested, hyper);
    let (loss, dz) = ordinal_nll_from_logits(label, &z, hyper.clip_floor, LossStructure::Nested);
    let grad = dz
        .iter()
        .enumerate()
        .map(|(i, d)| -((i + 1) as f64) * hyper.gamma * d)
        .collect();
    Ok((loss, grad))
}

/// `P(k > c) = 1 − σ(a_c − cγ·K(E^c))`; at `c = T` this is the unified
/// preference score.
pub fn task_score(c: usize, nested: &[f64], hyper: &GnolrHyper) -> Result<f64> {
    check_nested(nested, hyper)?;
    if c == 0 || c > hyper.num_levels() {
        return Err(GnolrError::Argument(format!(
            "task {c} outside 1..={}",
            hyper.num_levels()
        )));
    }
    Ok(stable_sigmoid(
        -(hyper.thresholds.a(c) - c as f64 * hyper.gamma * nested[c - 1]),
    ))
}

/// Plain ordinal negative log-likelihood on one shared kernel, using the same
/// `c·γ` scaling as the nested model.
pub fn neural_olr_loss(label: OrdinalLabel, kernel: f64, hyper: &GnolrHyper) -> f64 {
    ordinal_loss_grad(label, &[kernel], hyper, LogitLayout::Shared, LossStructure::Plain).0
}

/// Positive-weighted binary cross-entropy on a logit:
/// `−w·y·log σ(x) − (1−y)·log(1 − σ(x))`.
pub fn bce_loss(logit: f64, label: bool, positive_weight: f64) -> f64 {
    if label {
        positive_weight * softplus(-logit)
    } else {
        softplus(logit)
    }
}

/// `∂ bce_loss / ∂ logit`.
pub fn bce_grad(logit: f64, label: bool, positive_weight: f64) -> f64 {
    if label {
        positive_weight * (stable_sigmoid(logit) - 1.0)
    } else {
        stable_sigmoid(logit)
    }
}

/// Listwise term flavour. The logged form is the standard softmax
/// cross-entropy; the unlogged form sums raw softmax mass of positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ListNetForm {
    #[default]
    Logged,
    Unlogged,
}

/// Listwise logit of one pair: `γ·T·K(E^T) = γ Σ_j K(e^j)`.
pub fn listnet_logit(top_nested_kernel: f64, hyper: &GnolrHyper) -> f64 {
    hyper.gamma * hyper.num_levels() as f64 * top_nested_kernel
}

/// ListNet loss of a single list and its gradient with respect to the logits.
/// Lists without positives contribute zero.
pub fn listnet_list_loss(logits: &[f64], positives: &[bool], form: ListNetForm) -> (f64, Vec<f64>) {
    debug_assert_eq!(logits.len(), positives.len());
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 || logits.is_empty() {
        return (0.0, vec![0.0; logits.len()]);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let soft: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    match form {
        ListNetForm::Logged => {
            let loss = logits
                .iter()
                .zip(positives)
                .filter(|(_, &p)| p)
                .map(|(l, _)| lse - l)
                .sum();
            let grad = soft
                .iter()
                .zip(positives)
                .map(|(s, &p)| n_pos as f64 * s - if p { 1.0 } else { 0.0 })
                .collect();
            (loss, grad)
        }
        ListNetForm::Unlogged => {
            let pos_mass: f64 = soft.iter().zip(positives).filter(|(_, &p)| p).map(|(s, _)| s).sum();
            let grad = soft
                .iter()
                .zip(positives)
                .map(|(s, &p)| s * pos_mass - if p { *s } else { 0.0 })
                .collect();
            (-pos_mass, grad)
        }
    }
}

/// Mean ListNet loss over lists of `(K(E^T), is_positive)` entries.
pub fn listnet_loss(lists: &[Vec<(f64, bool)>], hyper: &GnolrHyper, form: ListNetForm) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    let total: f64 = lists
        .iter()
        .map(|list| {
            let logits: Vec<f64> = list.iter().map(|(k, _)| listnet_logit(*k, hyper)).collect();
            let pos: Vec<bool> = list.iter().map(|(_, p)| *p).collect();
            listnet_list_loss(&logits, &pos, form).0
        })
        .sum();
    total / lists.len() as f64
}

/// Pointwise ordinal loss plus the listwise term, unweighted.
#[inline]
pub fn combined_loss(pointwise: f64, listwise: f64) -> f64 {
    pointwise + listwise
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::feedback::ThresholdSet;
    use proptest::prelude::*;

    fn hyper(a: &[f64], gamma: f64) -> GnolrHyper {
        GnolrHyper::with_gamma(ThresholdSet::new(a.to_vec()).unwrap(), gamma).unwrap()
    }

    fn lbl(k: usize, t: usize) -> OrdinalLabel {
        OrdinalLabel::new(k, t).unwrap()
    }

    #[test]
    fn nan_kernels_are_not_mistaken_for_clipping() {
        let h = GnolrHyper::with_gamma(ThresholdSet::new(vec![0.5, 2.0]).unwrap(), 3.0).unwrap();
        let label = OrdinalLabel::new(2, 2).unwrap();
        assert!(gnolr_total_loss(label, &[f64::NAN, 0.1], &h).unwrap().is_nan());
        assert!(bce_loss(f64::NAN, true, 1.0).is_nan());
    }

    #[test]
    fn cumulative_examples() {
        let h = hyper(&[0.0], 1.0);
        assert_eq!(cumulative_prob(1, 0.0, &h).unwrap(), 0.5);
        assert_eq!(cumulative_prob(0, 0.3, &h).unwrap(), 0.0);
        assert_eq!(cumulative_prob(2, 0.3, &h).unwrap(), 1.0);
        assert!(cumulative_prob(3, 0.3, &h).is_err());
        let ali = hyper(&[3.2343], 7.0);
        assert!((cumulative_prob(1, 1.0, &ali).unwrap() - 0.0226275).abs() < 5e-7);
    }

    #[test]
    fn distribution_examples() {
        let h = hyper(&[0.0, 1.0], 1.0);
        let d = category_distribution(&[0.0, 0.0], &h).unwrap();
        let want = [0.5, 0.23106, 0.26894];
        for (p, w) in d.probs.iter().zip(want) {
            assert!((p - w).abs() < 5e-6, "{:?}", d.probs);
        }
        let d = category_distribution(&[0.0], &hyper(&[0.0], 1.0)).unwrap();
        assert_eq!(d.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn subtask_examples() {
        let h = hyper(&[0.0], 1.0);
        let l = subtask_loss(1, lbl(2, 1), &[0.0], &h).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        // k = 2 under subtask 2 with K₂ = 1 forces P(k=2) = 0: clipped
        let h = hyper(&[0.0, 1.0], 1.0);
        let l = subtask_loss(2, lbl(2, 2), &[0.0, 1.0], &h).unwrap();
        assert_eq!(l, -(1e-6f64).ln());
        assert!((l - 13.8155).abs() < 1e-4);

        let (a1, a2, g, k1, k2) = (0.3, 1.7, 2.0, 0.25, -0.1);
        let h = hyper(&[a1, a2], g);
        let p_ctr = 1.0 - stable_sigmoid(a1 - g * k1);
        let p_ctcvr = 1.0 - stable_sigmoid(a2 - 2.0 * g * k2);
        let l = subtask_loss(2, lbl(2, 2), &[k1, k2], &h).unwrap();
        assert!((l + (p_ctr - p_ctcvr).ln()).abs() < 1e-12);
    }

    #[test]
    fn task_score_examples() {
        let h = hyper(&[0.0], 1.0);
        assert_eq!(task_score(1, &[0.0], &h).unwrap(), 0.5);
        assert!(task_score(1, &[1.0], &h).unwrap() > task_score(1, &[-1.0], &h).unwrap());
        let ali = hyper(&[3.2343], 7.0);
        assert!((task_score(1, &[1.0], &ali).unwrap() - 0.9773725).abs() < 5e-7);
        assert!(task_score(2, &[0.0], &h).is_err());
        assert!(task_score(0, &[0.0], &h).is_err());
    }

    #[test]
    fn listnet_examples() {
        let n = 7;
        let (l, _) = listnet_list_loss(
            &vec![0.3; n],
            &[true, false, false, false, false, false, false],
            ListNetForm::Logged,
        );
        assert!((l - (n as f64).ln()).abs() < 1e-12);
        let (l, _) = listnet_list_loss(&[1000.0, 0.0, 0.0], &[true, false, false], ListNetForm::Logged);
        assert!(l.abs() < 1e-12);
        let (l, _) = listnet_list_loss(&[1.0, 0.0], &[true, false], ListNetForm::Logged);
        assert!((l - 0.31326).abs() < 5e-6);
        let (l, g) = listnet_list_loss(&[1.0, 0.0], &[false, false], ListNetForm::Logged);
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn listnet_mean_over_lists_counts_empty_lists() {
        let h = hyper(&[0.0], 1.0);
        let lists = vec![vec![(0.0, true), (0.0, false)], vec![(0.5, false)]];
        let l = listnet_loss(&lists, &h, ListNetForm::Logged);
        assert!((l - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn listnet_gradients_match_differences() {
        let logits = [0.4, -1.2, 2.0, 0.1];
        let pos = [true, false, true, false];
        for form in [ListNetForm::Logged, ListNetForm::Unlogged] {
            let (_, g) = listnet_list_loss(&logits, &pos, form);
            for i in 0..4 {
                let mut up = logits;
                let mut dn = logits;
                up[i] += 1e-6;
                dn[i] -= 1e-6;
                let num = (listnet_list_loss(&up, &pos, form).0 - listnet_list_loss(&dn, &pos, form).0) / 2e-6;
                assert!((num - g[i]).abs() < 1e-7, "{form:?} {i}: {num} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(1.25, 0.0), 1.25);
        assert_eq!(combined_loss(0.0, 0.75), 0.75);
        assert_eq!(combined_loss(0.5, 0.5), 1.0);
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.0, true, 1.0) - 0.693147).abs() < 1e-6);
        assert!((bce_loss(0.0, true, 10.0) - 6.93147).abs() < 1e-5);
        let l = bce_loss(100.0, true, 1.0);
        assert!(l.is_finite() && l < 1e-40);
        assert!(bce_loss(-800.0, false, 1.0).abs() < 1e-300);
        assert!(bce_loss(800.0, false, 1.0).is_finite());
    }

    #[test]
    fn neural_olr_examples() {
        let h = hyper(&[0.0, 1.0], 1.0);
        assert!((neural_olr_loss(lbl(2, 2), 0.0, &h) - 1.46508).abs() < 5e-6);
        let k = 0.37;
        let l = neural_olr_loss(lbl(1, 2), k, &h);
        assert!((l + stable_sigmoid(0.0 - k).ln()).abs() < 1e-12);
        let h1 = hyper(&[0.4], 2.0);
        for kk in 1..=2 {
            assert_eq!(
                neural_olr_loss(lbl(kk, 1), 0.3, &h1),
                gnolr_total_loss(lbl(kk, 1), &[0.3], &h1).unwrap()
            );
        }
    }

    #[test]
    fn prefix_layout_matches_nested_form() {
        // Σ_{j≤c} s_j = c·K(E^c) for unit subs
        let h = hyper(&[-0.5, 0.7, 2.0], 1.5);
        let subs = [0.3, -0.2, 0.9];
        let nested: Vec<f64> = (1..=3).map(|c| subs[..c].iter().sum::<f64>() / c as f64).collect();
        let a = LogitLayout::Prefix.logits(&subs, &h);
        let b = nested_logits(&nested, &h);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_grads_match_differences_for_every_layout() {
        let h = hyper(&[-0.3, 0.8, 1.9], 1.7);
        for (layout, structure) in [
            (LogitLayout::Prefix, LossStructure::Nested),
            (LogitLayout::Prefix, LossStructure::Plain),
            (LogitLayout::PerCategory, LossStructure::Plain),
            (LogitLayout::Shared, LossStructure::Plain),
        ] {
            let n = layout.num_kernels(3);
            let kernels: Vec<f64> = [0.21, -0.13, 0.05][..n].to_vec();
            for k in 1..=4 {
                let (_, g) = ordinal_loss_grad(lbl(k, 3), &kernels, &h, layout, structure);
                for i in 0..n {
                    let mut up = kernels.clone();
                    let mut dn = kernels.clone();
                    up[i] += 1e-6;
                    dn[i] -= 1e-6;
                    let f = |x: &[f64]| ordinal_loss_grad(lbl(k, 3), x, &h, layout, structure).0;
                    let num = (f(&up) - f(&dn)) / 2e-6;
                    assert!(
                        (num - g[i]).abs() <= 1e-6 * num.abs().max(1.0),
                        "{layout:?}/{structure:?} k={k} i={i}: {num} vs {}",
                        g[i]
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn distribution_sums_to_one(
            a0 in -4.0f64..4.0,
            gaps in proptest::collection::vec(0.01f64..3.0, 0..4),
            gamma in 0.1f64..8.0,
            ks in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let mut a = vec![a0];
            for g in &gaps { a.push(a.last().unwrap() + g); }
            let h = hyper(&a, gamma);
            let d = category_distribution(&ks[..a.len()], &h).unwrap();
            prop_assert!((d.sum() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn single_level_equals_cross_entropy(a1 in -4.0f64..4.0, gamma in 0.1f64..5.0, k in -1.0f64..1.0, y in any::<bool>()) {
            let h = hyper(&[a1], gamma);
            let label = lbl(if y { 2 } else { 1 }, 1);
            let g = gnolr_total_loss(label, &[k], &h).unwrap();
            prop_assert!((g - bce_loss(gamma * k - a1, y, 1.0)).abs() <= 1e-9);
        }

        #[test]
        fn top_category_rewards_every_sub_kernel(subs in proptest::collection::vec(-1.0f64..1.0, 3), gamma in 0.2f64..4.0) {
            let h = hyper(&[0.5, 1.5, 3.0], gamma);
            let (_, g) = ordinal_loss_grad(lbl(4, 3), &subs, &h, LogitLayout::Prefix, LossStructure::Nested);
            prop_assert!(g.iter().all(|&d| d < 0.0), "{:?}", g);
        }

        #[test]
        fn task_score_order_is_transform_invariant(ks in proptest::collection::vec(-1.0f64..1.0, 2..40)) {
            let h = hyper(&[0.7], 2.5);
            let scores: Vec<f64> = ks.iter().map(|k| task_score(1, &[*k], &h).unwrap()).collect();
            let transformed: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp() + 1.0).collect();
            let argsort = |v: &[f64]| {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap().then(i.cmp(&j)));
                idx
            };
            prop_assert_eq!(argsort(&scores), argsort(&transformed));
        }

        #[test]
        fn bce_grad_matches_difference(x in -20.0f64..20.0, y in any::<bool>(), w in 1.0f64..20.0) {
            let num = (bce_loss(x + 1e-6, y, w) - bce_loss(x - 1e-6, y, w)) / 2e-6;
            prop_assert!((num - bce_grad(x, y, w)).abs() < 1e-6 * w);
        }

        #[test]
        fn doubling_weight_doubles_positive_term(x in -10.0f64..10.0, w in 1.0f64..50.0) {
            prop_assert!((bce_loss(x, true, 2.0 * w) - 2.0 * bce_loss(x, true, w)).abs() < 1e-12 * w.max(1.0) * (1.0 + x.abs()));
            prop_assert_eq!(bce_loss(x, false, 2.0 * w), bce_loss(x, false, w));
        }
    }
}
