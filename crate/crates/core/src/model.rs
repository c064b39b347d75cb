//! A trainable model of any supported kind on top of the nested encoder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{bce_forward_loss, nsb_forward_loss, HeadParams, LogitHead};
use crate::data::{DatasetBundle, Sample};
use crate::encoders::{NestedEmbedding, NestedEncoder, Side, TowerConfig, EMBED_DIM};
use crate::error::{GnolrError, Result};
use crate::loss::{
    listnet_list_loss, ordinal_loss_grad, ordinal_scores, GnolrHyper, ListNetForm, LogitLayout, LossStructure,
};
use crate::tensor::{adam_step, dot, stable_sigmoid, AdamConfig, Matrix, Parameter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Gnolr,
    /// Nested ordinal loss plus the listwise term.
    GnolrL,
    /// Per-category sub-embeddings without nesting.
    GnolrV0,
    /// Nested embeddings with a single plain ordinal likelihood.
    GnolrV1,
    NeuralOlr,
    Bce,
    Nsb,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Gnolr,
        ModelKind::GnolrL,
        ModelKind::GnolrV0,
        ModelKind::GnolrV1,
        ModelKind::NeuralOlr,
        ModelKind::Bce,
        ModelKind::Nsb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gnolr => "GNOLR",
            ModelKind::GnolrL => "GNOLR_L",
            ModelKind::GnolrV0 => "GNOLR-V0",
            ModelKind::GnolrV1 => "GNOLR-V1",
            ModelKind::NeuralOlr => "NeuralOLR",
            ModelKind::Bce => "BCE",
            ModelKind::Nsb => "NSB",
        }
    }

    pub fn is_ordinal(self) -> bool {
        !matches!(self, ModelKind::Bce | ModelKind::Nsb)
    }

    pub fn is_listwise(self) -> bool {
        matches!(self, ModelKind::GnolrL)
    }

    fn layout(self) -> Option<(LogitLayout, LossStructure)> {
        match self {
            ModelKind::Gnolr | ModelKind::GnolrL => Some((LogitLayout::Prefix, LossStructure::Nested)),
            ModelKind::GnolrV1 => Some((LogitLayout::Prefix, LossStructure::Plain)),
            ModelKind::GnolrV0 => Some((LogitLayout::PerCategory, LossStructure::Plain)),
            ModelKind::NeuralOlr => Some((LogitLayout::Shared, LossStructure::Plain)),
            ModelKind::Bce | ModelKind::Nsb => None,
        }
    }

    /// Number of tower pairs for `t` feedback types.
    pub fn num_pairs(self, t: usize) -> usize {
        match self {
            ModelKind::NeuralOlr | ModelKind::Bce => 1,
            _ => t,
        }
    }

    pub fn default_tower(self) -> TowerConfig {
        match self {
            ModelKind::NeuralOlr => TowerConfig::wide(),
            _ => TowerConfig::default(),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = GnolrError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_uppercase().replace('_', "-") == norm)
            .ok_or_else(|| GnolrError::Config(format!("unknown model kind `{s}`")))
    }
}

/// Everything needed to rebuild a model besides its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub num_feedback: usize,
    pub hyper: GnolrHyper,
    pub tower: TowerConfig,
    pub embed_dim: usize,
    pub head: LogitHead,
    /// Positive weight per feedback level (BCE uses its target's entry).
    pub positive_weights: Vec<f64>,
    /// Level (1-based, sparsity order) whose raw bit the BCE model predicts.
    pub bce_target: usize,
    pub listnet_form: ListNetForm,
    /// Samples with `k ≥ list_positive_level` count as list positives.
    pub list_positive_level: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, hyper: GnolrHyper) -> Self {
        let t = hyper.num_levels();
        Self {
            kind,
            num_feedback: t,
            tower: kind.default_tower(),
            embed_dim: EMBED_DIM,
            head: LogitHead::Affine,
            positive_weights: vec![1.0; t],
            bce_target: t,
            listnet_form: ListNetForm::Logged,
            list_positive_level: t + 1,
            hyper,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tower.validate()?;
        let t = self.num_feedback;
        if t == 0 || self.hyper.num_levels() != t {
            return Err(GnolrError::Config(format!(
                "model expects {t} feedback types but has {} thresholds",
                self.hyper.num_levels()
            )));
        }
        if self.positive_weights.len() != t || self.positive_weights.iter().any(|w| !(w.is_finite() && *w >= 1.0)) {
            return Err(GnolrError::Config(format!(
                "positive weights must be {t} finite values ≥ 1, got {:?}",
                self.positive_weights
            )));
        }
        if self.bce_target == 0 || self.bce_target > t {
            return Err(GnolrError::Config(format!(
                "bce target {} outside 1..={t}",
                self.bce_target
            )));
        }
        if self.list_positive_level < 2 || self.list_positive_level > t + 1 {
            return Err(GnolrError::Config(format!(
                "list positive level {} outside 2..={}",
                self.list_positive_level,
                t + 1
            )));
        }
        if self.embed_dim == 0 {
            return Err(GnolrError::Config("embedding dimension must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Which embedding a retrieval query uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalView {
    /// Concatenation of every sub-embedding.
    Unified,
    /// One tower pair's sub-embedding.
    Pair(usize),
}

/// Training inputs of one step.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub user_rows: Vec<&'a [u32]>,
    pub item_rows: Vec<&'a [u32]>,
    pub samples: Vec<&'a Sample>,
    /// Lists as positions into `samples`, for listwise models.
    pub lists: Vec<Vec<usize>>,
}

impl<'a> Batch<'a> {
    pub fn pointwise(bundle: &'a DatasetBundle, samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        Self {
            user_rows: samples.iter().map(|s| bundle.user_feats(s)).collect(),
            item_rows: samples.iter().map(|s| bundle.item_feats(s)).collect(),
            samples,
            lists: Vec::new(),
        }
    }

    /// Concatenates training lists; every sample also takes part in the
    /// pointwise term.
    pub fn listwise(bundle: &'a DatasetBundle, list_ids: &[usize]) -> Self {
        let mut samples = Vec::new();
        let mut lists = Vec::with_capacity(list_ids.len());
        for &l in list_ids {
            let mut positions = Vec::new();
            for &i in &bundle.train_lists[l] {
                positions.push(samples.len());
                samples.push(&bundle.train[i as usize]);
            }
            lists.push(positions);
        }
        let mut b = Self::pointwise(bundle, samples);
        b.lists = lists;
        b
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub encoder: NestedEncoder,
    /// `1 × 2` `[w, b]` per BCE/NSB head; empty for ordinal kinds.
    pub heads: Vec<Parameter>,
}

impl Model {
    pub fn new(spec: ModelSpec, user_vocab: &[usize], item_vocab: &[usize], seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = spec.kind.num_pairs(spec.num_feedback);
        let encoder = NestedEncoder::new(user_vocab, item_vocab, spec.embed_dim, pairs, &spec.tower, &mut rng)?;
        let n_heads = match spec.kind {
            ModelKind::Bce => 1,
            ModelKind::Nsb => spec.num_feedback,
            _ => 0,
        };
        let heads = (0..n_heads)
            .map(|h| Parameter::new(format!("head{h}"), Matrix::from_rows(&[vec![1.0, 0.0]]).expect("1x2")))
            .collect();
        Ok(Self { spec, encoder, heads })
    }

    pub fn for_bundle(spec: ModelSpec, bundle: &DatasetBundle, seed: u64) -> Result<Self> {
        if spec.num_feedback != bundle.num_feedback() {
            return Err(GnolrError::Config(format!(
                "model expects {} feedback types, data has {}",
                spec.num_feedback,
                bundle.num_feedback()
            )));
        }
        Self::new(spec, &bundle.user_vocab_sizes(), &bundle.item_vocab_sizes(), seed)
    }

    fn head(&self, h: usize) -> HeadParams {
        let r = self.heads[h].value.row(0);
        HeadParams { w: r[0], b: r[1] }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.encoder.params();
        p.extend(self.heads.iter());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.encoder.params_mut();
        p.extend(self.heads.iter_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Applies one Adam update to every parameter and clears gradients.
    pub fn step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for p in self.params_mut() {
            adam_step(p, cfg)?;
            p.zero_grad();
        }
        Ok(())
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        let total = self.num_parameters();
        if values.len() != total {
            return Err(GnolrError::dim("set_flat_values", total, values.len()));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Loss and `∂loss/∂s` of one sample from its sub-kernels; head
    /// gradients are accumulated into `d_heads`.
    fn sample_loss(&self, sample: &Sample, s: &[f64], d_heads: &mut [HeadParams]) -> (f64, Vec<f64>) {
        let spec = &self.spec;
        match spec.kind.layout() {
            Some((layout, structure)) => ordinal_loss_grad(sample.label, s, &spec.hyper, layout, structure),
            None if spec.kind == ModelKind::Bce => {
                let t = spec.bce_target - 1;
                let o = bce_forward_loss(
                    s[0],
                    spec.head,
                    self.head(0),
                    sample.bits[t] != 0,
                    spec.positive_weights[t],
                );
                d_heads[0].w += o.d_head.w;
                d_heads[0].b += o.d_head.b;
                (o.loss, vec![o.d_kernel])
            }
            None => {
                let heads: Vec<HeadParams> = (0..self.heads.len()).map(|h| self.head(h)).collect();
                let o = nsb_forward_loss(s, spec.head, &heads, &sample.bits, &spec.positive_weights);
                for (acc, d) in d_heads.iter_mut().zip(&o.d_heads) {
                    acc.w += d.w;
                    acc.b += d.b;
                }
                (o.loss, o.d_kernels)
            }
        }
    }

    fn batch_objective(&self, batch: &Batch, kernels: &Matrix) -> (f64, Matrix, Vec<HeadParams>) {
        let n = batch.len();
        let p = kernels.cols();
        let mut d_k = Matrix::zeros(n, p);
        let mut d_heads = vec![HeadParams { w: 0.0, b: 0.0 }; self.heads.len()];
        let scale = 1.0 / n.max(1) as f64;
        let mut loss = 0.0;
        for (b, sample) in batch.samples.iter().enumerate() {
            let (l, d) = self.sample_loss(sample, kernels.row(b), &mut d_heads);
            loss += l * scale;
            for (dst, v) in d_k.row_mut(b).iter_mut().zip(&d) {
                *dst = v * scale;
            }
        }
        for h in &mut d_heads {
            h.w *= scale;
            h.b *= scale;
        }
        if self.spec.kind.is_listwise() && !batch.lists.is_empty() {
            let g = self.spec.hyper.gamma;
            let lscale = 1.0 / batch.lists.len() as f64;
            for list in &batch.lists {
                let logits: Vec<f64> = list.iter().map(|&b| g * kernels.row(b).iter().sum::<f64>()).collect();
                let pos: Vec<bool> = list
                    .iter()
                    .map(|&b| batch.samples[b].label.get() >= self.spec.list_positive_level)
                    .collect();
                let (l, dl) = listnet_list_loss(&logits, &pos, self.spec.listnet_form);
                loss += l * lscale;
                for (&b, d) in list.iter().zip(&dl) {
                    for v in d_k.row_mut(b) {
                        *v += g * d * lscale;
                    }
                }
            }
        }
        (loss, d_k, d_heads)
    }

    /// Mean batch loss without touching gradients.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        let trace = self.encoder.forward_batch(&batch.user_rows, &batch.item_rows)?;
        Ok(self.batch_objective(batch, &trace.sub_kernels()).0)
    }

    /// Mean batch loss; gradients are accumulated into every parameter.
    pub fn forward_backward(&mut self, batch: &Batch) -> Result<f64> {
        let trace = self.encoder.forward_batch(&batch.user_rows, &batch.item_rows)?;
        let (loss, d_k, d_heads) = self.batch_objective(batch, &trace.sub_kernels());
        if !loss.is_finite() {
            return Ok(loss);
        }
        for (p, d) in self.heads.iter_mut().zip(&d_heads) {
            let g = p.grad.row_mut(0);
            g[0] += d.w;
            g[1] += d.b;
        }
        self.encoder
            .backward_batch(&batch.user_rows, &batch.item_rows, &trace, &d_k)?;
        Ok(loss)
    }

    /// Per-level scores for `P(k > c)`, `c = 1..=T`, from sub-kernels.
    pub fn scores_from_kernels(&self, s: &[f64]) -> Vec<f64> {
        let spec = &self.spec;
        match spec.kind.layout() {
            Some((layout, _)) => ordinal_scores(s, &spec.hyper, layout),
            None if spec.kind == ModelKind::Bce => {
                let v = stable_sigmoid(spec.head.logit(s[0], self.head(0)));
                vec![v; spec.num_feedback]
            }
            None => s
                .iter()
                .enumerate()
                .map(|(t, &k)| stable_sigmoid(spec.head.logit(k, self.head(t))))
                .collect(),
        }
    }

    /// Sub-embeddings of every user and item in the bundle.
    pub fn encode_entities(&self, bundle: &DatasetBundle) -> Result<(Vec<NestedEmbedding>, Vec<NestedEmbedding>)> {
        let users: Vec<&[u32]> = bundle.users.iter().map(|e| e.feats.as_slice()).collect();
        let items: Vec<&[u32]> = bundle.items.iter().map(|e| e.feats.as_slice()).collect();
        Ok((
            self.encoder.encode_side(Side::User, &users)?,
            self.encoder.encode_side(Side::Item, &items)?,
        ))
    }

    /// Per-level scores of every sample, one row per sample.
    pub fn score_samples(&self, bundle: &DatasetBundle, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        let (users, items) = self.encode_entities(bundle)?;
        Ok(samples
            .iter()
            .map(|s| {
                let u = &users[s.user as usize];
                let i = &items[s.item as usize];
                let k: Vec<f64> = u.subs.iter().zip(&i.subs).map(|(a, b)| dot(a, b)).collect();
                self.scores_from_kernels(&k)
            })
            .collect())
    }

    /// Default retrieval view for feedback level `c` (1-based).
    pub fn retrieval_view(&self, c: usize) -> RetrievalView {
        match self.spec.kind {
            ModelKind::Nsb => RetrievalView::Pair(c.clamp(1, self.encoder.num_pairs()) - 1),
            _ => RetrievalView::Unified,
        }
    }
}

/// Embedding of one entity under a retrieval view.
pub fn view_embedding(e: &NestedEmbedding, view: RetrievalView) -> Vec<f64> {
    match view {
        RetrievalView::Unified => e.unified(),
        RetrievalView::Pair(j) => e.subs[j].clone(),
    }
}
