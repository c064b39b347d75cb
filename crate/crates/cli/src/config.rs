//! INI run configuration with sections `[data]`, `[model]`, `[train]` and
//! `[eval]`. Unknown sections or keys are rejected. Relative paths resolve
//! against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gnolr_core::baselines::LogitHead;
use gnolr_core::data::{IngestConfig, SplitKind};
use gnolr_core::encoders::{TowerConfig, DEFAULT_SLOPE};
use gnolr_core::loss::ListNetForm;
use gnolr_core::metrics::GaucWeighting;
use gnolr_core::train::{EvalOptions, Population, ThresholdMode, TrainConfig};
use gnolr_core::{GnolrError, Result};
use ini::Ini;

const DATA_KEYS: &[&str] = &[
    "csv",
    "movielens_dir",
    "bundle",
    "feedback",
    "numeric",
    "rating_threshold",
    "compose_user",
    "id_features",
    "train_fraction",
    "validation_fraction",
    "bins",
    "max_list_len",
];
const MODEL_KEYS: &[&str] = &[
    "kind",
    "thresholds",
    "gamma",
    "clip_floor",
    "embed_dim",
    "tower",
    "slope",
    "head",
    "positive_weights",
    "bce_target",
    "listnet_form",
    "list_positive_level",
];
const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "list_batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "patience",
    "seed",
    "checkpoint",
];
const EVAL_KEYS: &[&str] = &["ks", "split", "gauc_weighting", "level"];

fn sections() -> [(&'static str, &'static [&'static str]); 4] {
    [
        ("data", DATA_KEYS),
        ("model", MODEL_KEYS),
        ("train", TRAIN_KEYS),
        ("eval", EVAL_KEYS),
    ]
}

#[derive(Debug, Clone)]
pub enum Source {
    Csv(PathBuf),
    MovieLens(PathBuf),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub source: Option<Source>,
    pub bundle: PathBuf,
    pub ingest: IngestConfig,
    pub train: TrainConfig,
    pub checkpoint: PathBuf,
    pub eval: EvalOptions,
    /// Feedback level used by `retrieve`, `angles` and `export`; `None`
    /// means the sparsest level.
    pub level: Option<usize>,
}

fn config_err(msg: impl Into<String>) -> GnolrError {
    GnolrError::Config(msg.into())
}

type Section = BTreeMap<String, String>;

fn parse<T: FromStr>(sec: &str, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| config_err(format!("[{sec}] {key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(sec: &str, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(sec, key, s))
        .collect()
}

fn names(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_bool(sec: &str, key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(config_err(format!("[{sec}] {key}: expected a boolean, got {v:?}"))),
    }
}

pub fn parse_split(v: &str) -> Result<SplitKind> {
    match v.trim().to_ascii_lowercase().as_str() {
        "train" => Ok(SplitKind::Train),
        "validation" | "val" => Ok(SplitKind::Validation),
        "test" => Ok(SplitKind::Test),
        _ => Err(config_err(format!("unknown split {v:?} (train, validation, test)"))),
    }
}

pub fn parse_population(v: &str) -> Result<Population> {
    match v.trim().to_ascii_lowercase().as_str() {
        "train" => Ok(Population::Train),
        "all" => Ok(Population::All),
        _ => Err(config_err(format!("unknown threshold population {v:?} (train, all)"))),
    }
}

fn parse_thresholds(v: &str) -> Result<ThresholdMode> {
    let t = v.trim().to_ascii_lowercase();
    match t.as_str() {
        "auto" | "auto:train" => Ok(ThresholdMode::Auto(Population::Train)),
        "auto:all" => Ok(ThresholdMode::Auto(Population::All)),
        _ => Ok(ThresholdMode::Manual(list("model", "thresholds", v)?)),
    }
}

/// Applies `section.key=value` overrides on top of the file contents.
fn apply_overrides(ini: &mut Ini, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (path, value) = o
            .split_once('=')
            .ok_or_else(|| config_err(format!("override {o:?} must look like section.key=value")))?;
        let (sec, key) = path
            .split_once('.')
            .ok_or_else(|| config_err(format!("override {o:?} must look like section.key=value")))?;
        ini.with_section(Some(sec.trim())).set(key.trim(), value.trim());
    }
    Ok(())
}

fn collect(ini: &Ini) -> Result<BTreeMap<String, Section>> {
    let known = sections();
    let mut out: BTreeMap<String, Section> = known.iter().map(|(s, _)| (s.to_string(), Section::new())).collect();
    for (name, props) in ini.iter() {
        let Some(name) = name else {
            if props.iter().next().is_some() {
                return Err(config_err("keys outside a section are not allowed"));
            }
            continue;
        };
        let Some((_, keys)) = known.iter().find(|(s, _)| *s == name) else {
            return Err(config_err(format!("unknown section [{name}]")));
        };
        for (k, v) in props.iter() {
            if !keys.contains(&k) {
                return Err(config_err(format!("unknown key {k:?} in [{name}]")));
            }
            out.get_mut(name).unwrap().insert(k.to_string(), v.to_string());
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut ini =
            Ini::load_from_file(path).map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        apply_overrides(&mut ini, overrides)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_ini(&ini, &base, seed)
    }

    pub fn from_ini(ini: &Ini, base: &Path, seed: Option<u64>) -> Result<Self> {
        let s = collect(ini)?;
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p.trim());
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let data = &s["data"];
        let mut ingest = IngestConfig::default();
        let source = match (data.get("csv"), data.get("movielens_dir")) {
            (Some(_), Some(_)) => return Err(config_err("[data] set only one of csv and movielens_dir")),
            (Some(p), None) => Some(Source::Csv(resolve(p))),
            (None, Some(p)) => Some(Source::MovieLens(resolve(p))),
            (None, None) => None,
        };
        match &source {
            Some(Source::Csv(p)) if !p.is_file() => {
                return Err(config_err(format!("[data] csv {} does not exist", p.display())))
            }
            Some(Source::MovieLens(p)) if !p.is_dir() => {
                return Err(config_err(format!(
                    "[data] movielens_dir {} does not exist",
                    p.display()
                )))
            }
            _ => {}
        }
        let bundle = resolve(
            data.get("bundle")
                .ok_or_else(|| config_err("[data] bundle is required"))?,
        );
        for (k, v) in data {
            match k.as_str() {
                "feedback" => ingest.feedback = names(v),
                "numeric" => ingest.numeric = names(v),
                "rating_threshold" => ingest.rating_threshold = Some(parse("data", k, v)?),
                "compose_user" => ingest.compose_user = names(v),
                "id_features" => ingest.id_features = parse_bool("data", k, v)?,
                "train_fraction" => ingest.train_fraction = parse("data", k, v)?,
                "validation_fraction" => ingest.validation_fraction = parse("data", k, v)?,
                "bins" => ingest.n_bins = parse("data", k, v)?,
                "max_list_len" => ingest.max_list_len = parse("data", k, v)?,
                _ => {}
            }
        }

        let mut train = TrainConfig::default();
        let mut tower: Option<Vec<usize>> = None;
        let mut slope = DEFAULT_SLOPE;
        for (k, v) in &s["model"] {
            match k.as_str() {
                "kind" => train.kind = v.parse()?,
                "thresholds" => train.thresholds = parse_thresholds(v)?,
                "gamma" => train.gamma = parse("model", k, v)?,
                "clip_floor" => train.clip_floor = parse("model", k, v)?,
                "embed_dim" => train.embed_dim = parse("model", k, v)?,
                "tower" => tower = Some(list("model", k, v)?),
                "slope" => slope = parse("model", k, v)?,
                "head" => {
                    train.head = match v.trim().to_ascii_lowercase().as_str() {
                        "affine" => LogitHead::Affine,
                        "raw-cosine" | "raw_cosine" | "cosine" => LogitHead::RawCosine,
                        _ => return Err(config_err(format!("[model] head: unknown {v:?} (affine, raw-cosine)"))),
                    }
                }
                "positive_weights" => train.positive_weights = Some(list("model", k, v)?),
                "bce_target" => train.bce_target = Some(parse("model", k, v)?),
                "listnet_form" => {
                    train.listnet_form = match v.trim().to_ascii_lowercase().as_str() {
                        "logged" => ListNetForm::Logged,
                        "unlogged" => ListNetForm::Unlogged,
                        _ => {
                            return Err(config_err(format!(
                                "[model] listnet_form: unknown {v:?} (logged, unlogged)"
                            )))
                        }
                    }
                }
                "list_positive_level" => train.list_positive_level = Some(parse("model", k, v)?),
                _ => {}
            }
        }
        if tower.is_some() || s["model"].contains_key("slope") {
            let hidden = tower.unwrap_or_else(|| train.kind.default_tower().hidden_sizes);
            train.tower = Some(TowerConfig::new(hidden, slope).map_err(|e| config_err(format!("[model] tower: {e}")))?);
        }

        let mut checkpoint = None;
        for (k, v) in &s["train"] {
            match k.as_str() {
                "epochs" => train.epochs = parse("train", k, v)?,
                "batch_size" => train.batch_size = parse("train", k, v)?,
                "list_batch_size" => train.list_batch_size = parse("train", k, v)?,
                "learning_rate" => train.adam.learning_rate = parse("train", k, v)?,
                "beta1" => train.adam.beta1 = parse("train", k, v)?,
                "beta2" => train.adam.beta2 = parse("train", k, v)?,
                "epsilon" => train.adam.epsilon = parse("train", k, v)?,
                "patience" => train.patience = Some(parse("train", k, v)?),
                "seed" => train.seed = parse("train", k, v)?,
                "checkpoint" => checkpoint = Some(resolve(v)),
                _ => {}
            }
        }
        if let Some(seed) = seed {
            train.seed = seed;
        }
        ingest.seed = train.seed;
        let checkpoint = checkpoint.unwrap_or_else(|| bundle.with_extension("gnc"));

        let mut eval = EvalOptions::default();
        let mut level = None;
        for (k, v) in &s["eval"] {
            match k.as_str() {
                "ks" => eval.ks = list("eval", k, v)?,
                "split" => eval.split = parse_split(v)?,
                "gauc_weighting" => {
                    eval.gauc_weighting = match v.trim().to_ascii_lowercase().as_str() {
                        "pairs" | "pair-count" => GaucWeighting::PairCount,
                        "uniform" => GaucWeighting::Uniform,
                        _ => {
                            return Err(config_err(format!(
                                "[eval] gauc_weighting: unknown {v:?} (pairs, uniform)"
                            )))
                        }
                    }
                }
                "level" => level = Some(parse("eval", k, v)?),
                _ => {}
            }
        }

        if matches!(source, Some(Source::MovieLens(_))) && ingest.feedback.is_empty() {
            ingest.feedback = vec!["like".into()];
        }
        if source.is_some() {
            ingest.validate().map_err(|e| config_err(format!("[data] {e}")))?;
        }
        train.validate()?;
        Ok(Self {
            source,
            bundle,
            ingest,
            train,
            checkpoint,
            eval,
            level,
        })
    }
}
