//! Per-sample losses of the reference models: pointwise BCE on one twin-tower
//! pair, the shared-encoder ordinal model, and independent per-task towers.

use crate::feedback::OrdinalLabel;
use crate::loss::{bce_grad, bce_loss, ordinal_loss_grad, GnolrHyper, LogitLayout, LossStructure};

/// How a cosine kernel becomes a BCE logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitHead {
    /// `w·K + b` with learnable scalars.
    #[default]
    Affine,
    /// The raw cosine, bounded to `[−1, 1]`.
    RawCosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadParams {
    pub w: f64,
    pub b: f64,
}

impl Default for HeadParams {
    fn default() -> Self {
        Self { w: 1.0, b: 0.0 }
    }
}

impl LogitHead {
    pub fn logit(self, kernel: f64, p: HeadParams) -> f64 {
        match self {
            LogitHead::Affine => p.w * kernel + p.b,
            LogitHead::RawCosine => kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BceOutput {
    pub loss: f64,
    pub d_kernel: f64,
    pub d_head: HeadParams,
}

/// Weighted BCE of one pair against a single raw feedback bit.
pub fn bce_forward_loss(kernel: f64, head: LogitHead, p: HeadParams, label: bool, weight: f64) -> BceOutput {
    let logit = head.logit(kernel, p);
    let loss = bce_loss(logit, label, weight);
    let g = bce_grad(logit, label, weight);
    match head {
        LogitHead::Affine => BceOutput {
            loss,
            d_kernel: g * p.w,
            d_head: HeadParams { w: g * kernel, b: g },
        },
        LogitHead::RawCosine => BceOutput {
            loss,
            d_kernel: g,
            d_head: HeadParams { w: 0.0, b: 0.0 },
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NsbOutput {
    pub loss: f64,
    pub d_kernels: Vec<f64>,
    pub d_heads: Vec<HeadParams>,
}

/// `Σ_t bce(logit_t, y_t, w_t)` with each logit from task `t`'s own pair.
pub fn nsb_forward_loss(
    kernels: &[f64],
    head: LogitHead,
    heads: &[HeadParams],
    bits: &[u8],
    weights: &[f64],
) -> NsbOutput {
    let mut out = NsbOutput {
        loss: 0.0,
        d_kernels: Vec::with_capacity(kernels.len()),
        d_heads: Vec::with_capacity(kernels.len()),
    };
    for t in 0..kernels.len() {
        let o = bce_forward_loss(kernels[t], head, heads[t], bits[t] != 0, weights[t]);
        out.loss += o.loss;
        out.d_kernels.push(o.d_kernel);
        out.d_heads.push(o.d_head);
    }
    out
}

/// Plain ordinal likelihood on one shared kernel; returns the loss and
/// `∂loss/∂K`.
pub fn neural_olr_forward_loss(label: OrdinalLabel, kernel: f64, hyper: &GnolrHyper) -> (f64, f64) {
    let (loss, d) = ordinal_loss_grad(label, &[kernel], hyper, LogitLayout::Shared, LossStructure::Plain);
    (loss, d[0])
}
