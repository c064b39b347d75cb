//! Epoch loop, validation-based model selection, checkpoints, evaluation and
//! multi-seed aggregation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::baselines::LogitHead;
use crate::binio::{write_atomic, Reader, Writer};
use crate::data::{
    make_batches, BatchMode, BinBoundaries, BinningSpec, DatasetBundle, Sample, SplitKind, LIST_BATCH, POINTWISE_BATCH,
};
use crate::encoders::NestedEmbedding;
use crate::encoders::{TowerConfig, EMBED_DIM};
use crate::error::{GnolrError, Result};
use crate::feedback::{estimate_thresholds, FeedbackSchema, ThresholdSet};
use crate::loss::{GnolrHyper, ListNetForm, DEFAULT_CLIP_FLOOR};
use crate::metrics::{auc, gauc, mean_recall, GaucWeighting, MetricReport, RetrievalIndex, ScoredSample};
use crate::model::{view_embedding, Batch, Model, ModelKind, ModelSpec, RetrievalView};
use crate::tensor::{AdamConfig, Matrix};

const CHECKPOINT_MAGIC: &[u8; 4] = b"GNC1";
const CHECKPOINT_VERSION: u32 = 1;

/// Which samples the automatic threshold estimate counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Population {
    #[default]
    Train,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdMode {
    Manual(Vec<f64>),
    Auto(Population),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub thresholds: ThresholdMode,
    pub gamma: f64,
    pub clip_floor: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub list_batch_size: usize,
    pub seed: u64,
    /// Per-level positive weights; all ones when absent.
    pub positive_weights: Option<Vec<f64>>,
    /// Tower widths; the model kind's default when absent.
    pub tower: Option<TowerConfig>,
    pub embed_dim: usize,
    pub head: LogitHead,
    /// BCE target level; the sparsest level when absent.
    pub bce_target: Option<usize>,
    pub listnet_form: ListNetForm,
    /// Lowest ordinal label counted as a list positive; `T + 1` when absent.
    pub list_positive_level: Option<usize>,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Gnolr,
            thresholds: ThresholdMode::Auto(Population::Train),
            gamma: 1.0,
            clip_floor: DEFAULT_CLIP_FLOOR,
            adam: AdamConfig::default(),
            epochs: 1,
            batch_size: POINTWISE_BATCH,
            list_batch_size: LIST_BATCH,
            seed: 0,
            positive_weights: None,
            tower: None,
            embed_dim: EMBED_DIM,
            head: LogitHead::Affine,
            bce_target: None,
            listnet_form: ListNetForm::Logged,
            list_positive_level: None,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(GnolrError::Config("epochs must be ≥ 1".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(GnolrError::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.list_batch_size == 0 {
            return Err(GnolrError::Config("batch sizes must be ≥ 1".into()));
        }
        self.adam.validate().map_err(|e| GnolrError::Config(e.to_string()))
    }

    pub fn thresholds_for(&self, bundle: &DatasetBundle) -> Result<ThresholdSet> {
        let t = bundle.num_feedback();
        match &self.thresholds {
            ThresholdMode::Manual(v) => {
                if v.len() != t {
                    return Err(GnolrError::Config(format!(
                        "{} thresholds given for {t} feedback types",
                        v.len()
                    )));
                }
                ThresholdSet::new(v.clone()).map_err(|e| GnolrError::Config(e.to_string()))
            }
            ThresholdMode::Auto(Population::Train) => estimate_thresholds(&bundle.train_labels(), t),
            ThresholdMode::Auto(Population::All) => estimate_thresholds(&bundle.all_labels(), t),
        }
    }

    pub fn model_spec(&self, bundle: &DatasetBundle) -> Result<ModelSpec> {
        let t = bundle.num_feedback();
        if self.kind == ModelKind::Nsb && t < 2 {
            return Err(GnolrError::Config("NSB needs at least two feedback types".into()));
        }
        let hyper = GnolrHyper::new(self.thresholds_for(bundle)?, self.gamma, self.clip_floor)?;
        let mut spec = ModelSpec::new(self.kind, hyper);
        if let Some(w) = &self.positive_weights {
            spec.positive_weights = w.clone();
        }
        if let Some(tower) = &self.tower {
            spec.tower = tower.clone();
        }
        spec.embed_dim = self.embed_dim;
        spec.head = self.head;
        if let Some(c) = self.bce_target {
            spec.bce_target = c;
        }
        spec.listnet_form = self.listnet_form;
        if let Some(l) = self.list_positive_level {
            spec.list_positive_level = l;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical `key=value` text of every setting, sorted by key.
    pub fn echo(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("model", self.kind.name().to_string());
        m.insert(
            "thresholds",
            match &self.thresholds {
                ThresholdMode::Manual(v) => join(v),
                ThresholdMode::Auto(Population::Train) => "auto:train".into(),
                ThresholdMode::Auto(Population::All) => "auto:all".into(),
            },
        );
        m.insert("gamma", self.gamma.to_string());
        m.insert("clip_floor", self.clip_floor.to_string());
        m.insert("learning_rate", self.adam.learning_rate.to_string());
        m.insert("beta1", self.adam.beta1.to_string());
        m.insert("beta2", self.adam.beta2.to_string());
        m.insert("adam_epsilon", self.adam.epsilon.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("list_batch_size", self.list_batch_size.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert(
            "positive_weights",
            self.positive_weights.as_deref().map(join).unwrap_or_default(),
        );
        m.insert(
            "tower",
            self.tower
                .as_ref()
                .map(|t| format!("{:?}/{}", t.hidden_sizes, t.slope))
                .unwrap_or_default(),
        );
        m.insert("embed_dim", self.embed_dim.to_string());
        m.insert("head", format!("{:?}", self.head));
        m.insert("bce_target", self.bce_target.map(|v| v.to_string()).unwrap_or_default());
        m.insert("listnet_form", format!("{:?}", self.listnet_form));
        m.insert(
            "list_positive_level",
            self.list_positive_level.map(|v| v.to_string()).unwrap_or_default(),
        );
        m.insert("patience", self.patience.map(|v| v.to_string()).unwrap_or_default());
        m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Trained parameters plus everything needed to reuse them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub schema: FeedbackSchema,
    pub binning: BinningSpec,
    pub config_echo: String,
    /// Hex SHA-256 of `config_echo`.
    pub config_hash: String,
    /// Epoch the parameters come from (0 = initialization).
    pub epoch: usize,
    /// Validation AUC on the sparsest target; NaN when undefined.
    pub best_val_metric: f64,
    pub log: Vec<String>,
}

pub fn config_hash(echo: &str) -> String {
    Sha256::digest(echo.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let spec = &self.model.spec;
        let mut w = Writer::new(Vec::new());
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        w.str(&self.config_echo)?;
        w.str(&self.config_hash)?;
        w.len(self.epoch)?;
        w.f64(self.best_val_metric)?;
        w.strs(&self.log)?;
        w.strs(&self.schema.names)?;
        w.u64s(&self.schema.positive_counts)?;
        w.u64s(&self.schema.order.iter().map(|&o| o as u64).collect::<Vec<_>>())?;
        w.len(self.binning.features.len())?;
        for (name, b) in &self.binning.features {
            w.str(name)?;
            w.f64s(&b.cuts)?;
        }
        w.str(spec.kind.name())?;
        w.len(spec.num_feedback)?;
        w.f64s(spec.hyper.thresholds.values())?;
        w.f64(spec.hyper.gamma)?;
        w.f64(spec.hyper.clip_floor)?;
        w.u64s(&spec.tower.hidden_sizes.iter().map(|&h| h as u64).collect::<Vec<_>>())?;
        w.f64(spec.tower.slope)?;
        w.len(spec.embed_dim)?;
        w.u8(matches!(spec.head, LogitHead::RawCosine) as u8)?;
        w.f64s(&spec.positive_weights)?;
        w.len(spec.bce_target)?;
        w.u8(matches!(spec.listnet_form, ListNetForm::Unlogged) as u8)?;
        w.len(spec.list_positive_level)?;
        let vocab = |v: Vec<usize>| v.into_iter().map(|x| x as u64).collect::<Vec<_>>();
        w.u64s(&vocab(self.model.encoder.user_tables.vocab_sizes()))?;
        w.u64s(&vocab(self.model.encoder.item_tables.vocab_sizes()))?;
        let params = self.model.params();
        w.len(params.len())?;
        for p in params {
            w.str(&p.name)?;
            w.len(p.value.rows())?;
            w.len(p.value.cols())?;
            for v in p.value.data() {
                w.f64(*v)?;
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(GnolrError::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_echo = r.str()?;
        let config_hash = r.str()?;
        let epoch = r.len()?;
        let best_val_metric = r.f64()?;
        let log = r.strs()?;
        let schema = FeedbackSchema {
            names: r.strs()?,
            positive_counts: r.u64s()?,
            order: r.u64s()?.into_iter().map(|o| o as usize).collect(),
        };
        let n_bins = r.len()?;
        let mut binning = BinningSpec::default();
        for _ in 0..n_bins {
            let name = r.str()?;
            binning.features.push((name, BinBoundaries { cuts: r.f64s()? }));
        }
        let fmt = |e: GnolrError| GnolrError::Format(format!("checkpoint: {e}"));
        let kind: ModelKind = r.str()?.parse().map_err(fmt)?;
        let num_feedback = r.len()?;
        let thresholds = ThresholdSet::new(r.f64s()?).map_err(fmt)?;
        let gamma = r.f64()?;
        let clip = r.f64()?;
        let hyper = GnolrHyper::new(thresholds, gamma, clip).map_err(fmt)?;
        let hidden: Vec<usize> = r.u64s()?.into_iter().map(|h| h as usize).collect();
        let slope = r.f64()?;
        let mut spec = ModelSpec::new(kind, hyper);
        spec.num_feedback = num_feedback;
        spec.tower = TowerConfig::new(hidden, slope).map_err(fmt)?;
        spec.embed_dim = r.len()?;
        spec.head = if r.u8()? == 1 {
            LogitHead::RawCosine
        } else {
            LogitHead::Affine
        };
        spec.positive_weights = r.f64s()?;
        spec.bce_target = r.len()?;
        spec.listnet_form = if r.u8()? == 1 {
            ListNetForm::Unlogged
        } else {
            ListNetForm::Logged
        };
        spec.list_positive_level = r.len()?;
        let user_vocab: Vec<usize> = r.u64s()?.into_iter().map(|v| v as usize).collect();
        let item_vocab: Vec<usize> = r.u64s()?.into_iter().map(|v| v as usize).collect();
        let mut model = Model::new(spec, &user_vocab, &item_vocab, 0).map_err(fmt)?;
        let n_params = r.len()?;
        if n_params != model.params().len() {
            return Err(GnolrError::Format("checkpoint parameter count mismatch".into()));
        }
        for p in model.params_mut() {
            let name = r.str()?;
            let rows = r.len()?;
            let cols = r.len()?;
            if name != p.name || rows != p.value.rows() || cols != p.value.cols() {
                return Err(GnolrError::Format(format!(
                    "checkpoint parameter `{name}` does not fit `{}`",
                    p.name
                )));
            }
            let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            p.value = Matrix::new(rows, cols, data)?;
        }
        r.expect_end()?;
        Ok(Self {
            model,
            schema,
            binning,
            config_echo,
            config_hash,
            epoch,
            best_val_metric,
            log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// AUC of level `c` scores against `k > c` labels; `None` if one-class.
fn level_auc(scores: &[Vec<f64>], samples: &[Sample], c: usize) -> Option<f64> {
    let s: Vec<f64> = scores.iter().map(|r| r[c - 1]).collect();
    let l: Vec<bool> = samples.iter().map(|x| x.label.exceeds(c)).collect();
    auc(&s, &l).ok()
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.6}"))
}

fn snapshot(
    model: &Model,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    epoch: usize,
    metric: f64,
    log: &[String],
) -> Checkpoint {
    let echo = cfg.echo();
    Checkpoint {
        model: model.clone(),
        schema: bundle.schema.clone(),
        binning: bundle.binning.clone(),
        config_hash: config_hash(&echo),
        config_echo: echo,
        epoch,
        best_val_metric: metric,
        log: log.to_vec(),
    }
}

/// Trains for `cfg.epochs` epochs and returns the checkpoint with the best
/// validation AUC on the sparsest level (the last epoch when validation is
/// empty or one-class). A non-finite loss or gradient aborts with the last
/// good checkpoint.
pub fn train(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if bundle.train.is_empty() {
        return Err(GnolrError::EmptyBundle);
    }
    let model = Model::for_bundle(cfg.model_spec(bundle)?, bundle, cfg.seed)?;
    train_model(model, bundle, cfg)
}

/// Same as [`train`] starting from an existing model.
pub fn train_model(mut model: Model, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if bundle.train.is_empty() {
        return Err(GnolrError::EmptyBundle);
    }
    let t = model.spec.num_feedback;
    let mut log: Vec<String> = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut last_good = snapshot(&model, bundle, cfg, 0, f64::NAN, &log);
    let mut since_best = 0usize;
    let mode = if model.spec.kind.is_listwise() {
        BatchMode::Listwise
    } else {
        BatchMode::Pointwise
    };
    let batch_size = match mode {
        BatchMode::Pointwise => cfg.batch_size,
        BatchMode::Listwise => cfg.list_batch_size,
    };
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(mode, bundle, batch_size, cfg.seed, epoch as u64)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for ids in &batches {
            let batch = match mode {
                BatchMode::Pointwise => Batch::pointwise(bundle, ids.iter().map(|&i| &bundle.train[i])),
                BatchMode::Listwise => Batch::listwise(bundle, ids),
            };
            if batch.is_empty() {
                continue;
            }
            let loss = model.forward_backward(&batch)?;
            let diverged = || GnolrError::Diverged {
                epoch,
                last_good: Box::new(last_good.clone()),
            };
            if !loss.is_finite() {
                return Err(diverged());
            }
            match model.step(&cfg.adam) {
                Err(GnolrError::Optimizer { .. }) => return Err(diverged()),
                other => other?,
            }
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let epoch_loss = total / count.max(1) as f64;
        let val_scores = model.score_samples(bundle, &bundle.validation)?;
        let mut line = format!("epoch={epoch} loss={epoch_loss:.6}");
        let mut select = None;
        for c in 1..=t {
            let a = level_auc(&val_scores, &bundle.validation, c);
            line.push_str(&format!(" val_auc_t{c}={}", fmt_metric(a)));
            if c == t {
                select = a;
            }
        }
        log::info!("{line}");
        log.push(line);
        let metric = select.unwrap_or(f64::NAN);
        last_good = snapshot(&model, bundle, cfg, epoch, metric, &log);
        let improved = match (&best, select) {
            (None, _) => true,
            (Some(b), Some(m)) => b.best_val_metric.is_nan() || m > b.best_val_metric,
            (Some(b), None) => b.best_val_metric.is_nan(),
        };
        if improved {
            best = Some(last_good.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                log::info!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    let mut out = best.unwrap_or(last_good);
    out.log = log;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub split: SplitKind,
    /// Recall@K cut-offs; empty disables retrieval metrics.
    pub ks: Vec<usize>,
    pub gauc_weighting: GaucWeighting,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: SplitKind::Test,
            ks: vec![5, 10, 15, 20],
            gauc_weighting: GaucWeighting::PairCount,
        }
    }
}

/// Per-level AUC and GAUC on a split plus Recall@K of the retrieval view.
/// Keys: `auc_t<c>`, `gauc_t<c>`, `recall@<K>_t<c>`.
pub fn evaluate(model: &Model, bundle: &DatasetBundle, opts: &EvalOptions) -> Result<MetricReport> {
    let samples = bundle.split(opts.split);
    if samples.is_empty() {
        return Err(GnolrError::EmptyBundle);
    }
    let t = model.spec.num_feedback;
    let (users, items) = model.encode_entities(bundle)?;
    let mut report = MetricReport::default();
    let scores: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let u = &users[s.user as usize];
            let i = &items[s.item as usize];
            let k: Vec<f64> = u
                .subs
                .iter()
                .zip(&i.subs)
                .map(|(a, b)| crate::tensor::dot(a, b))
                .collect();
            model.scores_from_kernels(&k)
        })
        .collect();
    for c in 1..=t {
        if let Some(a) = level_auc(&scores, samples, c) {
            report.insert(format!("auc_t{c}"), a);
        }
        let scored: Vec<ScoredSample> = samples
            .iter()
            .zip(&scores)
            .map(|(s, r)| ScoredSample {
                score: r[c - 1],
                label: s.label.exceeds(c),
                user: s.user,
            })
            .collect();
        if let Ok(g) = gauc(&scored, opts.gauc_weighting) {
            report.insert(format!("gauc_t{c}"), g);
        }
        if opts.ks.is_empty() {
            continue;
        }
        if let Ok(r) = recall_for_view(&users, &items, samples, model.retrieval_view(c), c, &opts.ks) {
            for (k, v) in opts.ks.iter().zip(r) {
                report.insert(format!("recall@{k}_t{c}"), v);
            }
        }
    }
    Ok(report)
}

fn recall_for_view(
    users: &[NestedEmbedding],
    items: &[NestedEmbedding],
    samples: &[Sample],
    view: RetrievalView,
    c: usize,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let mut positives: HashMap<u32, HashSet<u32>> = HashMap::new();
    for s in samples.iter().filter(|s| s.label.exceeds(c)) {
        positives.entry(s.user).or_default().insert(s.item);
    }
    let mut query_users: Vec<u32> = positives.keys().copied().collect();
    query_users.sort_unstable();
    let queries: Vec<(u32, Vec<f64>)> = query_users
        .iter()
        .map(|&u| (u, view_embedding(&users[u as usize], view)))
        .collect();
    let rows: Vec<Vec<f64>> = items.iter().map(|e| view_embedding(e, view)).collect();
    let index = RetrievalIndex::new((0..items.len() as u32).collect(), &rows)?;
    mean_recall(&queries, &index, ks, &positives)
}

/// Recall@K on target level `c` of `split`, retrieving over all items in the
/// embedding space selected by `view`.
pub fn view_recall(
    model: &Model,
    bundle: &DatasetBundle,
    split: SplitKind,
    view: RetrievalView,
    c: usize,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let samples = bundle.split(split);
    if samples.is_empty() {
        return Err(GnolrError::EmptyBundle);
    }
    if c == 0 || c > model.spec.num_feedback {
        return Err(GnolrError::Argument(format!(
            "target level {c} outside 1..={}",
            model.spec.num_feedback
        )));
    }
    let (users, items) = model.encode_entities(bundle)?;
    recall_for_view(&users, &items, samples, view, c, ks)
}

/// Trains and evaluates with seeds `seed, seed+1, …` and reports the mean and
/// sample standard deviation of every metric as `<metric>.mean` and
/// `<metric>.std`.
pub fn multi_run(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    n_seeds: usize,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if n_seeds == 0 {
        return Err(GnolrError::Argument("n_seeds must be ≥ 1".into()));
    }
    let mut runs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in 0..n_seeds as u64 {
        let run_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(s),
            ..cfg.clone()
        };
        let ck = train(bundle, &run_cfg)?;
        for (k, v) in evaluate(&ck.model, bundle, opts)?.values {
            runs.entry(k).or_default().push(v);
        }
    }
    let mut out = MetricReport::default();
    for (k, v) in runs {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        out.insert(format!("{k}.mean"), mean);
        out.insert(format!("{k}.std"), std);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_bundle, IngestConfig, RawInteraction, RawLog};

    /// Two-feedback log where users and items carry a planted ±1 taste and
    /// feedback depth follows their agreement.
    fn toy_bundle(n: usize) -> DatasetBundle {
        let mut rows = Vec::new();
        for i in 0..n {
            let u = (i * 7) % 40;
            let it = (i * 13 + i / 40) % 30;
            let agree = (u % 2) == (it % 2);
            let deep = agree && (u % 4 < 2);
            rows.push(RawInteraction {
                user_id: format!("u{u}"),
                item_id: format!("i{it}"),
                timestamp: Some(i as i64),
                user_features: vec![format!("{}", u % 2), format!("{}", u % 4 < 2)],
                item_features: vec![format!("{}", it % 2)],
                feedback: vec![agree as u8, deep as u8],
            });
        }
        let log = RawLog {
            user_feature_names: vec!["uf_taste".into(), "uf_depth".into()],
            item_feature_names: vec!["if_taste".into()],
            feedback_names: vec!["click".into(), "buy".into()],
            rows,
        };
        let cfg = IngestConfig {
            feedback: log.feedback_names.clone(),
            id_features: false,
            ..IngestConfig::default()
        };
        build_bundle(&log, &cfg).unwrap()
    }

    fn small_cfg(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            kind,
            gamma: 3.0,
            epochs: 3,
            batch_size: 64,
            list_batch_size: 4,
            adam: AdamConfig::with_learning_rate(0.01),
            tower: Some(TowerConfig::new(vec![16, 8], 0.01).unwrap()),
            embed_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let b = toy_bundle(600);
        let a = train(&b, &small_cfg(ModelKind::Gnolr)).unwrap();
        let c = train(&b, &small_cfg(ModelKind::Gnolr)).unwrap();
        assert_eq!(a.log, c.log);
        assert_eq!(a.log.len(), 3);
        assert!(a.log[0].starts_with("epoch=1 loss="));
        assert!(a.log[0].contains(" val_auc_t1=") && a.log[0].contains(" val_auc_t2="));
    }

    #[test]
    fn auto_thresholds_are_stored() {
        let b = toy_bundle(400);
        let ck = train(&b, &small_cfg(ModelKind::GnolrV1)).unwrap();
        let est = estimate_thresholds(&b.train_labels(), 2).unwrap();
        assert_eq!(ck.model.spec.hyper.thresholds, est);
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let b = toy_bundle(400);
        for kind in ModelKind::ALL {
            let ck = train(&b, &small_cfg(kind)).unwrap();
            let bytes = ck.to_bytes().unwrap();
            assert_eq!(&bytes[..4], b"GNC1");
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            let s1 = ck.model.score_samples(&b, &b.test).unwrap();
            let s2 = back.model.score_samples(&b, &b.test).unwrap();
            assert_eq!(s1, s2, "{kind}");
            assert_eq!(back.config_hash, config_hash(&back.config_echo));
            assert_eq!(back.log, ck.log);
        }
    }

    #[test]
    fn divergence_returns_last_good() {
        let b = toy_bundle(300);
        let cfg = small_cfg(ModelKind::Gnolr);
        let mut model = Model::for_bundle(cfg.model_spec(&b).unwrap(), &b, 0).unwrap();
        model.encoder.pairs[0].user.layers[0].bias.value.set(0, 0, f64::NAN);
        match train_model(model, &b, &cfg) {
            Err(GnolrError::Diverged { epoch, last_good }) => {
                assert_eq!(epoch, 1);
                assert_eq!(last_good.epoch, 0);
            }
            other => panic!("expected divergence, got {:?}", other.map(|c| c.epoch)),
        }
    }

    #[test]
    fn multi_run_reports_mean_and_std() {
        let b = toy_bundle(300);
        let cfg = TrainConfig {
            epochs: 1,
            ..small_cfg(ModelKind::Gnolr)
        };
        let opts = EvalOptions {
            ks: vec![5],
            ..EvalOptions::default()
        };
        let one = multi_run(&b, &cfg, 1, &opts).unwrap();
        assert!(one
            .values
            .iter()
            .filter(|(k, _)| k.ends_with(".std"))
            .all(|(_, v)| *v == 0.0));
        assert!(one.get("auc_t1.mean").is_some());
        let keys: Vec<&String> = one.values.keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn nsb_requires_two_levels() {
        let mut b = toy_bundle(200);
        b.schema.names.truncate(1);
        b.schema.positive_counts.truncate(1);
        b.schema.order.truncate(1);
        let err = small_cfg(ModelKind::Nsb).model_spec(&b).unwrap_err();
        assert!(err.is_usage());
    }
}
