//! Interaction log ingestion, chronological splitting, percentile binning,
//! ordinal labelling, per-user lists and batch assembly.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{write_atomic, Reader, Writer};
use crate::error::{GnolrError, Result};
use crate::feedback::{map_to_ordinal, FeedbackSchema, OrdinalLabel};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;
pub const DEFAULT_BINS: usize = 50;
pub const MAX_LIST_LEN: usize = 500;
pub const POINTWISE_BATCH: usize = 1024;
pub const LIST_BATCH: usize = 32;
pub const RATING_THRESHOLD: f64 = 4.0;

const BUNDLE_MAGIC: &[u8; 4] = b"GNB1";
const BUNDLE_VERSION: u32 = 1;

/// One logged impression before any encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: Option<i64>,
    pub user_features: Vec<String>,
    pub item_features: Vec<String>,
    /// 0/1 flags in declaration order.
    pub feedback: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawLog {
    pub user_feature_names: Vec<String>,
    pub item_feature_names: Vec<String>,
    pub feedback_names: Vec<String>,
    pub rows: Vec<RawInteraction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    /// Feedback columns in declaration order.
    pub feedback: Vec<String>,
    /// Feature columns holding raw numbers to be binned.
    pub numeric: Vec<String>,
    /// When set, feedback columns hold ratings and `rating > threshold` is
    /// the positive flag.
    pub rating_threshold: Option<f64>,
    /// Extra columns appended to `user_id` to form the user key.
    pub compose_user: Vec<String>,
    /// Use the user and item identifiers themselves as categorical features.
    pub id_features: bool,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub n_bins: usize,
    pub max_list_len: usize,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            feedback: Vec::new(),
            numeric: Vec::new(),
            rating_threshold: None,
            compose_user: Vec::new(),
            id_features: true,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            n_bins: DEFAULT_BINS,
            max_list_len: MAX_LIST_LEN,
            seed: 0,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feedback.is_empty() {
            return Err(GnolrError::Config("at least one feedback column is required".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(GnolrError::Config(format!(
                "train fraction {} outside (0,1]",
                self.train_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(GnolrError::Config(format!(
                "validation fraction {} outside [0,1)",
                self.validation_fraction
            )));
        }
        if self.n_bins < 2 || self.max_list_len == 0 {
            return Err(GnolrError::Config("n_bins must be ≥ 2 and max_list_len ≥ 1".into()));
        }
        Ok(())
    }
}

/// `1` iff `rating > threshold`.
pub fn binarize_ratings(rating: f64, threshold: f64) -> u8 {
    (rating > threshold) as u8
}

/// Reads a header-bearing CSV log. Required columns are `user_id`, `item_id`
/// and `timestamp`; `uf_*` and `if_*` columns are user and item features.
pub fn read_csv<R: Read>(reader: R, cfg: &IngestConfig) -> Result<RawLog> {
    cfg.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| {
        find(name).ok_or_else(|| GnolrError::Ingestion {
            line: Some(1),
            msg: format!("missing required column `{name}`"),
        })
    };
    let user_col = need("user_id")?;
    let item_col = need("item_id")?;
    let ts_col = need("timestamp")?;
    let feedback_cols = cfg.feedback.iter().map(|f| need(f)).collect::<Result<Vec<_>>>()?;
    let compose_cols = cfg.compose_user.iter().map(|f| need(f)).collect::<Result<Vec<_>>>()?;
    let mut user_cols = Vec::new();
    let mut item_cols = Vec::new();
    let mut log = RawLog {
        feedback_names: cfg.feedback.clone(),
        ..RawLog::default()
    };
    for (i, h) in headers.iter().enumerate() {
        let h = h.trim();
        if h.starts_with("uf_") {
            user_cols.push(i);
            log.user_feature_names.push(h.to_string());
        } else if h.starts_with("if_") {
            item_cols.push(i);
            log.item_feature_names.push(h.to_string());
        }
    }
    for name in &cfg.numeric {
        if !log.user_feature_names.contains(name) && !log.item_feature_names.contains(name) {
            return Err(GnolrError::Config(format!(
                "numeric column `{name}` is not a uf_/if_ feature"
            )));
        }
    }
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let err = |msg: String| GnolrError::Ingestion { line, msg };
        let ts = field(ts_col);
        if ts.is_empty() {
            return Err(err("missing timestamp".into()));
        }
        let timestamp = ts
            .parse::<i64>()
            .or_else(|_| ts.parse::<f64>().map(|v| v as i64))
            .map_err(|_| err(format!("bad timestamp {ts:?}")))?;
        let mut user_id = field(user_col).to_string();
        for &c in &compose_cols {
            user_id.push('|');
            user_id.push_str(field(c));
        }
        let feedback = feedback_cols
            .iter()
            .zip(&cfg.feedback)
            .map(|(&c, name)| {
                let raw = field(c);
                let v: f64 = raw
                    .parse()
                    .map_err(|_| err(format!("feedback `{name}` value {raw:?} is not numeric")))?;
                match cfg.rating_threshold {
                    Some(t) => Ok(binarize_ratings(v, t)),
                    None if v == 0.0 || v == 1.0 => Ok(v as u8),
                    None => Err(err(format!("feedback `{name}` must be 0 or 1, got {raw}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        log.rows.push(RawInteraction {
            user_id,
            item_id: field(item_col).to_string(),
            timestamp: Some(timestamp),
            user_features: user_cols.iter().map(|&c| field(c).to_string()).collect(),
            item_features: item_cols.iter().map(|&c| field(c).to_string()).collect(),
            feedback,
        });
    }
    Ok(log)
}

pub fn read_csv_path(path: &Path, cfg: &IngestConfig) -> Result<RawLog> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), cfg)
}

/// Loads the MovieLens-1M `::`-separated files from `dir`. Ratings above 4
/// become the single `like` feedback.
pub fn load_movielens_1m(dir: &Path) -> Result<RawLog> {
    let read = |name: &str| -> Result<String> {
        let bytes = std::fs::read(dir.join(name))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    };
    let mut users: HashMap<String, Vec<String>> = HashMap::new();
    for (n, line) in read("users.dat")?.lines().enumerate() {
        let f: Vec<&str> = line.split("::").collect();
        if f.len() < 4 {
            return Err(GnolrError::Ingestion {
                line: Some(n + 1),
                msg: "users.dat row needs UserID::Gender::Age::Occupation".into(),
            });
        }
        users.insert(f[0].into(), vec![f[1].into(), f[2].into(), f[3].into()]);
    }
    let mut movies: HashMap<String, Vec<String>> = HashMap::new();
    for (n, line) in read("movies.dat")?.lines().enumerate() {
        let f: Vec<&str> = line.split("::").collect();
        if f.len() < 3 {
            return Err(GnolrError::Ingestion {
                line: Some(n + 1),
                msg: "movies.dat row needs MovieID::Title::Genres".into(),
            });
        }
        movies.insert(f[0].into(), vec![f[2].into()]);
    }
    let mut log = RawLog {
        user_feature_names: vec!["uf_gender".into(), "uf_age".into(), "uf_occupation".into()],
        item_feature_names: vec!["if_genres".into()],
        feedback_names: vec!["like".into()],
        rows: Vec::new(),
    };
    for (n, line) in read("ratings.dat")?.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| GnolrError::Ingestion {
            line: Some(n + 1),
            msg: msg.into(),
        };
        let f: Vec<&str> = line.split("::").collect();
        if f.len() < 4 {
            return Err(err("ratings.dat row needs UserID::MovieID::Rating::Timestamp"));
        }
        let rating: f64 = f[2].parse().map_err(|_| err("bad rating"))?;
        let ts: i64 = f[3].parse().map_err(|_| err("bad timestamp"))?;
        log.rows.push(RawInteraction {
            user_id: f[0].into(),
            item_id: f[1].into(),
            timestamp: Some(ts),
            user_features: users.get(f[0]).cloned().unwrap_or_else(|| vec![String::new(); 3]),
            item_features: movies.get(f[1]).cloned().unwrap_or_else(|| vec![String::new()]),
            feedback: vec![binarize_ratings(rating, RATING_THRESHOLD)],
        });
    }
    Ok(log)
}

/// Row indices of each split in chronological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn floor_frac(n: usize, frac: f64) -> usize {
    ((n as f64) * frac + 1e-9).floor() as usize
}

/// Stable chronological split. The first `train_fraction` of the ordered
/// rows is training data, of which the latest `validation_fraction` (at least
/// one row once training holds two or more) is held out for validation.
pub fn chronological_split(
    timestamps: &[Option<i64>],
    train_fraction: f64,
    validation_fraction: f64,
) -> Result<SplitIndices> {
    if timestamps.is_empty() {
        return Err(GnolrError::EmptyBundle);
    }
    let mut ts = Vec::with_capacity(timestamps.len());
    for (i, t) in timestamps.iter().enumerate() {
        ts.push(t.ok_or(GnolrError::Ingestion {
            line: Some(i + 2),
            msg: "missing timestamp".into(),
        })?);
    }
    let mut order: Vec<usize> = (0..ts.len()).collect();
    order.sort_by_key(|&i| ts[i]);
    let n_train = floor_frac(ts.len(), train_fraction).min(ts.len());
    let n_val = if n_train >= 2 && validation_fraction > 0.0 {
        floor_frac(n_train, validation_fraction).max(1)
    } else {
        0
    };
    let test = order.split_off(n_train);
    let validation = order.split_off(n_train - n_val);
    Ok(SplitIndices {
        train: order,
        validation,
        test,
    })
}

/// Nearest-rank percentile boundaries of one numeric feature.
#[derive(Debug, Clone, PartialEq)]
pub struct BinBoundaries {
    pub cuts: Vec<f64>,
}

impl BinBoundaries {
    /// Number of boundaries strictly below `value`.
    pub fn apply(&self, value: f64) -> usize {
        self.cuts.partition_point(|&c| c < value)
    }

    pub fn num_bins(&self) -> usize {
        self.cuts.len() + 1
    }
}

/// Boundaries at the nearest-rank quantiles `i / n_bins`, `i = 1..n_bins−1`,
/// with duplicates collapsed. Non-finite values are ignored.
pub fn fit_bins(values: &[f64], n_bins: usize) -> BinBoundaries {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() || n_bins < 2 {
        return BinBoundaries { cuts: Vec::new() };
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mut cuts: Vec<f64> = (1..n_bins)
        .map(|i| {
            let rank = (i * n).div_ceil(n_bins).max(1);
            v[rank - 1]
        })
        .collect();
    cuts.dedup();
    BinBoundaries { cuts }
}

pub fn apply_bins(value: f64, spec: &BinBoundaries) -> usize {
    spec.apply(value)
}

/// Boundaries for every numeric feature, keyed by column name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BinningSpec {
    pub features: Vec<(String, BinBoundaries)>,
}

impl BinningSpec {
    pub fn get(&self, name: &str) -> Option<&BinBoundaries> {
        self.features.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureInfo {
    pub name: String,
    pub kind: FeatureKind,
    /// Table rows including the out-of-vocabulary row 0.
    pub vocab_size: usize,
}

/// A distinct user or item with its encoded feature ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub key: String,
    pub feats: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Index into `DatasetBundle::users`.
    pub user: u32,
    /// Index into `DatasetBundle::items`.
    pub item: u32,
    pub timestamp: i64,
    /// Feedback bits in sparsity order.
    pub bits: Vec<u8>,
    pub label: OrdinalLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub schema: FeedbackSchema,
    pub user_features: Vec<FeatureInfo>,
    pub item_features: Vec<FeatureInfo>,
    pub binning: BinningSpec,
    pub users: Vec<Entity>,
    pub items: Vec<Entity>,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Per-user lists over `train`, as indices into it.
    pub train_lists: Vec<Vec<u32>>,
    /// Per-user lists over `test`, as indices into it.
    pub test_lists: Vec<Vec<u32>>,
}

/// Builds categorical vocabularies over the training rows and maps every
/// value to an id; unseen values map to 0.
struct FeatureEncoder {
    vocab: HashMap<String, u32>,
    bins: Option<BinBoundaries>,
}

impl FeatureEncoder {
    fn fit<'a>(kind: FeatureKind, train_values: impl Iterator<Item = &'a str>, n_bins: usize) -> Self {
        match kind {
            FeatureKind::Categorical => {
                let mut vocab = HashMap::new();
                for v in train_values {
                    let next = vocab.len() as u32 + 1;
                    vocab.entry(v.to_string()).or_insert(next);
                }
                Self { vocab, bins: None }
            }
            FeatureKind::Numeric => {
                let nums: Vec<f64> = train_values.filter_map(|v| v.parse().ok()).collect();
                Self {
                    vocab: HashMap::new(),
                    bins: Some(fit_bins(&nums, n_bins)),
                }
            }
        }
    }

    fn vocab_size(&self) -> usize {
        match &self.bins {
            Some(b) => b.num_bins() + 1,
            None => self.vocab.len() + 1,
        }
    }

    fn encode(&self, value: &str) -> u32 {
        match &self.bins {
            Some(b) => match value.parse::<f64>() {
                Ok(x) if x.is_finite() => b.apply(x) as u32 + 1,
                _ => 0,
            },
            None => self.vocab.get(value).copied().unwrap_or(0),
        }
    }
}

/// Runs the whole preparation pipeline on an ingested log.
pub fn build_bundle(log: &RawLog, cfg: &IngestConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    if log.rows.is_empty() {
        return Err(GnolrError::EmptyBundle);
    }
    let t = log.feedback_names.len();
    if t == 0 {
        return Err(GnolrError::Schema("no feedback types declared".into()));
    }
    let timestamps: Vec<Option<i64>> = log.rows.iter().map(|r| r.timestamp).collect();
    let split = chronological_split(&timestamps, cfg.train_fraction, cfg.validation_fraction)?;
    let fit_rows: Vec<&RawInteraction> = split
        .train
        .iter()
        .chain(&split.validation)
        .map(|&i| &log.rows[i])
        .collect();

    let mut counts = vec![0u64; t];
    for r in &fit_rows {
        for (c, b) in counts.iter_mut().zip(&r.feedback) {
            *c += *b as u64;
        }
    }
    let schema = FeedbackSchema::from_declared(&log.feedback_names, &counts)?;

    let kind_of = |name: &str| {
        if cfg.numeric.iter().any(|n| n == name) {
            FeatureKind::Numeric
        } else {
            FeatureKind::Categorical
        }
    };
    let mut binning = BinningSpec::default();
    let mut fit_side = |names: &[String], id_name: &str, value: &dyn Fn(&RawInteraction, usize) -> String| {
        let mut infos = Vec::new();
        let mut encoders = Vec::new();
        let mut push = |name: &str, kind: FeatureKind, col: Option<usize>| {
            let values: Vec<String> = fit_rows
                .iter()
                .map(|r| match col {
                    Some(c) => value(r, c),
                    None => value(r, usize::MAX),
                })
                .collect();
            let enc = FeatureEncoder::fit(kind, values.iter().map(String::as_str), cfg.n_bins);
            if let Some(b) = &enc.bins {
                binning.features.push((name.to_string(), b.clone()));
            }
            infos.push(FeatureInfo {
                name: name.to_string(),
                kind,
                vocab_size: enc.vocab_size(),
            });
            encoders.push((enc, col));
        };
        if cfg.id_features || names.is_empty() {
            push(id_name, FeatureKind::Categorical, None);
        }
        for (c, name) in names.iter().enumerate() {
            push(name, kind_of(name), Some(c));
        }
        (infos, encoders)
    };
    let user_value = |r: &RawInteraction, c: usize| {
        if c == usize::MAX {
            r.user_id.clone()
        } else {
            r.user_features[c].clone()
        }
    };
    let item_value = |r: &RawInteraction, c: usize| {
        if c == usize::MAX {
            r.item_id.clone()
        } else {
            r.item_features[c].clone()
        }
    };
    let (user_features, user_enc) = fit_side(&log.user_feature_names, "user_id", &user_value);
    let (item_features, item_enc) = fit_side(&log.item_feature_names, "item_id", &item_value);

    // entities in chronological order of first appearance
    let mut chrono: Vec<usize> = split
        .train
        .iter()
        .chain(&split.validation)
        .chain(&split.test)
        .copied()
        .collect();
    chrono.sort_by_key(|&i| (log.rows[i].timestamp, i));
    let mut user_index: HashMap<&str, u32> = HashMap::new();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut users = Vec::new();
    let mut items = Vec::new();
    let encode =
        |r: &RawInteraction, encs: &[(FeatureEncoder, Option<usize>)], v: &dyn Fn(&RawInteraction, usize) -> String| {
            encs.iter()
                .map(|(e, col)| e.encode(&v(r, col.unwrap_or(usize::MAX))))
                .collect::<Vec<u32>>()
        };
    for &i in &chrono {
        let r = &log.rows[i];
        if !user_index.contains_key(r.user_id.as_str()) {
            user_index.insert(&r.user_id, users.len() as u32);
            users.push(Entity {
                key: r.user_id.clone(),
                feats: encode(r, &user_enc, &user_value),
            });
        }
        if !item_index.contains_key(r.item_id.as_str()) {
            item_index.insert(&r.item_id, items.len() as u32);
            items.push(Entity {
                key: r.item_id.clone(),
                feats: encode(r, &item_enc, &item_value),
            });
        }
    }
    let make = |idx: &[usize]| -> Vec<Sample> {
        idx.iter()
            .map(|&i| {
                let r = &log.rows[i];
                let bits = schema.reorder_bits(&r.feedback);
                Sample {
                    user: user_index[r.user_id.as_str()],
                    item: item_index[r.item_id.as_str()],
                    timestamp: r.timestamp.unwrap_or_default(),
                    label: map_to_ordinal(&bits),
                    bits,
                }
            })
            .collect()
    };
    let train = make(&split.train);
    let validation = make(&split.validation);
    let test = make(&split.test);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_lists = build_lists(&train, cfg.max_list_len, &mut rng);
    let test_lists = build_lists(&test, cfg.max_list_len, &mut rng);
    Ok(DatasetBundle {
        schema,
        user_features,
        item_features,
        binning,
        users,
        items,
        train,
        validation,
        test,
        train_lists,
        test_lists,
    })
}

/// Groups samples by user (ascending user index). Groups longer than
/// `max_len` are shuffled and cut into `⌈n / max_len⌉` chunks, all full
/// except the last.
pub fn build_lists(samples: &[Sample], max_len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let max_len = max_len.max(1);
    let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.user).or_default().push(i as u32);
    }
    let mut lists = Vec::with_capacity(groups.len());
    for (_, mut g) in groups {
        if g.len() > max_len {
            g.shuffle(rng);
            lists.extend(g.chunks(max_len).map(<[u32]>::to_vec));
        } else {
            lists.push(g);
        }
    }
    lists
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Pointwise,
    Listwise,
}

/// Shuffles `0..n` with a generator seeded by `seed + epoch` and cuts it into
/// batches; the final short batch is kept.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(GnolrError::Argument("batch size must be ≥ 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch));
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches over training samples (pointwise) or training lists (listwise).
pub fn make_batches(
    mode: BatchMode,
    bundle: &DatasetBundle,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    let n = match mode {
        BatchMode::Pointwise => bundle.train.len(),
        BatchMode::Listwise => bundle.train_lists.len(),
    };
    shuffled_batches(n, batch_size, seed, epoch)
}

impl DatasetBundle {
    pub fn num_feedback(&self) -> usize {
        self.schema.len()
    }

    pub fn split(&self, kind: SplitKind) -> &[Sample] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }

    pub fn user_vocab_sizes(&self) -> Vec<usize> {
        self.user_features.iter().map(|f| f.vocab_size).collect()
    }

    pub fn item_vocab_sizes(&self) -> Vec<usize> {
        self.item_features.iter().map(|f| f.vocab_size).collect()
    }

    pub fn user_feats(&self, s: &Sample) -> &[u32] {
        &self.users[s.user as usize].feats
    }

    pub fn item_feats(&self, s: &Sample) -> &[u32] {
        &self.items[s.item as usize].feats
    }

    /// Positive counts per feedback (sparsity order) over a split.
    pub fn positive_counts(&self, kind: SplitKind) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_feedback()];
        for s in self.split(kind) {
            for (c, b) in counts.iter_mut().zip(&s.bits) {
                *c += *b as u64;
            }
        }
        counts
    }

    /// Ordinal labels of the training data.
    pub fn train_labels(&self) -> Vec<OrdinalLabel> {
        self.train.iter().map(|s| s.label).collect()
    }

    /// Ordinal labels of every split.
    pub fn all_labels(&self) -> Vec<OrdinalLabel> {
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .map(|s| s.label)
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(Vec::new());
        w.bytes(BUNDLE_MAGIC)?;
        w.u32(BUNDLE_VERSION)?;
        w.strs(&self.schema.names)?;
        w.u64s(&self.schema.positive_counts)?;
        w.u64s(&self.schema.order.iter().map(|&o| o as u64).collect::<Vec<_>>())?;
        for side in [&self.user_features, &self.item_features] {
            w.len(side.len())?;
            for f in side {
                w.str(&f.name)?;
                w.u8(matches!(f.kind, FeatureKind::Numeric) as u8)?;
                w.len(f.vocab_size)?;
            }
        }
        w.len(self.binning.features.len())?;
        for (name, b) in &self.binning.features {
            w.str(name)?;
            w.f64s(&b.cuts)?;
        }
        for side in [&self.users, &self.items] {
            w.len(side.len())?;
            for e in side {
                w.str(&e.key)?;
                w.u32s(&e.feats)?;
            }
        }
        for split in [&self.train, &self.validation, &self.test] {
            w.len(split.len())?;
            for s in split {
                w.u32(s.user)?;
                w.u32(s.item)?;
                w.i64(s.timestamp)?;
                w.bytes(&s.bits)?;
            }
        }
        for lists in [&self.train_lists, &self.test_lists] {
            w.len(lists.len())?;
            for l in lists {
                w.u32s(l)?;
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(BUNDLE_MAGIC)?;
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(GnolrError::Format(format!("unsupported bundle version {version}")));
        }
        let names = r.strs()?;
        let positive_counts = r.u64s()?;
        let order = r.u64s()?.into_iter().map(|o| o as usize).collect::<Vec<_>>();
        let t = names.len();
        if positive_counts.len() != t || order.len() != t || t == 0 || t > 254 {
            return Err(GnolrError::Format("inconsistent feedback schema".into()));
        }
        let schema = FeedbackSchema {
            names,
            positive_counts,
            order,
        };
        let read_features = |r: &mut Reader<&[u8]>| -> Result<Vec<FeatureInfo>> {
            let n = r.len()?;
            (0..n)
                .map(|_| {
                    Ok(FeatureInfo {
                        name: r.str()?,
                        kind: if r.u8()? == 1 {
                            FeatureKind::Numeric
                        } else {
                            FeatureKind::Categorical
                        },
                        vocab_size: r.len()?,
                    })
                })
                .collect()
        };
        let user_features = read_features(&mut r)?;
        let item_features = read_features(&mut r)?;
        let n_bins = r.len()?;
        let mut binning = BinningSpec::default();
        for _ in 0..n_bins {
            let name = r.str()?;
            binning.features.push((name, BinBoundaries { cuts: r.f64s()? }));
        }
        let read_entities = |r: &mut Reader<&[u8]>, width: usize| -> Result<Vec<Entity>> {
            let n = r.len()?;
            (0..n)
                .map(|_| {
                    let e = Entity {
                        key: r.str()?,
                        feats: r.u32s()?,
                    };
                    if e.feats.len() != width {
                        return Err(GnolrError::Format("entity feature width mismatch".into()));
                    }
                    Ok(e)
                })
                .collect()
        };
        let users = read_entities(&mut r, user_features.len())?;
        let items = read_entities(&mut r, item_features.len())?;
        let read_split = |r: &mut Reader<&[u8]>| -> Result<Vec<Sample>> {
            let n = r.len()?;
            (0..n)
                .map(|_| {
                    let user = r.u32()?;
                    let item = r.u32()?;
                    let timestamp = r.i64()?;
                    let bits = r.bytes(t)?;
                    if user as usize >= users.len() || item as usize >= items.len() || bits.iter().any(|&b| b > 1) {
                        return Err(GnolrError::Format("sample out of range".into()));
                    }
                    Ok(Sample {
                        user,
                        item,
                        timestamp,
                        label: map_to_ordinal(&bits),
                        bits,
                    })
                })
                .collect()
        };
        let train = read_split(&mut r)?;
        let validation = read_split(&mut r)?;
        let test = read_split(&mut r)?;
        let read_lists = |r: &mut Reader<&[u8]>, n_samples: usize| -> Result<Vec<Vec<u32>>> {
            let n = r.len()?;
            (0..n)
                .map(|_| {
                    let l = r.u32s()?;
                    if l.iter().any(|&i| i as usize >= n_samples) {
                        return Err(GnolrError::Format("list index out of range".into()));
                    }
                    Ok(l)
                })
                .collect()
        };
        let train_lists = read_lists(&mut r, train.len())?;
        let test_lists = read_lists(&mut r, test.len())?;
        r.expect_end()?;
        Ok(Self {
            schema,
            user_features,
            item_features,
            binning,
            users,
            items,
            train,
            validation,
            test,
            train_lists,
            test_lists,
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
