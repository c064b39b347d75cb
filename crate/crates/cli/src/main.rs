mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use gnolr_core::data::{build_bundle, load_movielens_1m, read_csv_path, DatasetBundle, SplitKind};
use gnolr_core::encoders::EmbeddingFile;
use gnolr_core::feedback::{estimate_thresholds, estimate_thresholds_from_counts, ThresholdSet};
use gnolr_core::metrics::{topk_retrieve, AngleHistogram, RetrievalIndex};
use gnolr_core::model::view_embedding;
use gnolr_core::train::{evaluate, train, Checkpoint, Population};
use gnolr_core::GnolrError;

use config::{parse_population, parse_split, RunConfig, Source};

#[derive(Parser, Debug)]
#[command(name = "gnolr", version, about = "Nested ordinal twin-tower recommender")]
struct Cli {
    /// INI run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides `[train] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Ingest the raw log and write the bundle cache.
    Prepare,
    /// Estimate ordinal thresholds from positive fractions.
    Thresholds {
        /// Population counted: `train` or `all`.
        #[arg(long)]
        mode: Option<String>,
        /// Positive counts per level, densest first; skips the bundle.
        #[arg(long, value_delimiter = ',', requires = "total")]
        counts: Vec<u64>,
        /// Sample total matching `--counts`.
        #[arg(long)]
        total: Option<u64>,
    },
    /// Train and write the checkpoint.
    Train,
    /// Evaluate the checkpoint on a split.
    Eval {
        /// Recall cut-offs, e.g. `5,10,15,20`.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// `train`, `validation` or `test`.
        #[arg(long)]
        split: Option<String>,
        /// Print JSON instead of `key=value` lines.
        #[arg(long)]
        json: bool,
    },
    /// Top-K items per user as `user_id<TAB>item_id<TAB>rank`.
    Retrieve {
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Feedback level whose embedding space is searched.
        #[arg(long)]
        level: Option<usize>,
        /// Raw user ids; all users when omitted.
        #[arg(long = "user")]
        users: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of user–item angles as CSV.
    Angles {
        #[arg(long)]
        level: Option<usize>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write user or item embeddings as TSV.
    Export {
        #[arg(long, value_enum)]
        side: ExportSide,
        #[arg(long)]
        level: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportSide {
    User,
    Item,
}

fn init_logging() -> anyhow::Result<()> {
    let level = match std::env::var("GNOLR_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => {
            return Err(GnolrError::Config(format!("GNOLR_LOG must be quiet, info or debug, got {other:?}")).into())
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    Ok(())
}

fn output(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| GnolrError::Config("--config is required for this command".into()))?;
    Ok(RunConfig::load(path, &cli.overrides, cli.seed)?)
}

fn load_bundle(cfg: &RunConfig) -> anyhow::Result<DatasetBundle> {
    if !cfg.bundle.is_file() {
        return Err(GnolrError::Config(format!(
            "bundle {} not found; run `gnolr prepare` first",
            cfg.bundle.display()
        ))
        .into());
    }
    Ok(DatasetBundle::read_from(&cfg.bundle)?)
}

/// Loads the checkpoint and checks it against the bundle it is applied to.
fn load_checkpoint(cfg: &RunConfig, bundle: &DatasetBundle) -> anyhow::Result<Checkpoint> {
    if !cfg.checkpoint.is_file() {
        return Err(GnolrError::Config(format!(
            "checkpoint {} not found; run `gnolr train` first",
            cfg.checkpoint.display()
        ))
        .into());
    }
    let ck = Checkpoint::load(&cfg.checkpoint)?;
    let t = ck.model.spec.num_feedback;
    if t != bundle.num_feedback() {
        return Err(GnolrError::Config(format!(
            "checkpoint has {t} feedback levels but the bundle has {}",
            bundle.num_feedback()
        ))
        .into());
    }
    if ck.schema.names != bundle.schema.names {
        return Err(GnolrError::Config(format!(
            "checkpoint feedback {:?} differs from bundle feedback {:?}",
            ck.schema.names, bundle.schema.names
        ))
        .into());
    }
    Ok(ck)
}

fn resolve_level(requested: Option<usize>, cfg: &RunConfig, t: usize) -> anyhow::Result<usize> {
    let c = requested.or(cfg.level).unwrap_or(t);
    if c == 0 || c > t {
        return Err(GnolrError::Argument(format!("level {c} outside 1..={t}")).into());
    }
    Ok(c)
}

fn print_thresholds(t: &ThresholdSet) {
    let values: Vec<String> = t.values().iter().map(|a| format!("{a:.4}")).collect();
    println!("[model]");
    println!("thresholds = {}", values.join(","));
}

fn cmd_prepare(cfg: &RunConfig) -> anyhow::Result<()> {
    let log = match &cfg.source {
        Some(Source::Csv(p)) => read_csv_path(p, &cfg.ingest)?,
        Some(Source::MovieLens(dir)) => load_movielens_1m(dir)?,
        None => return Err(GnolrError::Config("[data] needs csv or movielens_dir".into()).into()),
    };
    let mut ingest = cfg.ingest.clone();
    if ingest.feedback.is_empty() {
        ingest.feedback = log.feedback_names.clone();
    }
    let bundle = build_bundle(&log, &ingest)?;
    bundle.write_to(&cfg.bundle)?;

    let mut out = io::stdout().lock();
    writeln!(out, "users={} items={}", bundle.users.len(), bundle.items.len())?;
    let mut header = vec!["split".to_string(), "rows".to_string()];
    for name in &bundle.schema.names {
        header.push(format!("{name}_pos"));
        header.push(format!("{name}_frac"));
    }
    writeln!(out, "{}", header.join("\t"))?;
    for (label, kind) in [
        ("train", SplitKind::Train),
        ("validation", SplitKind::Validation),
        ("test", SplitKind::Test),
    ] {
        let n = bundle.split(kind).len();
        let mut row = vec![label.to_string(), n.to_string()];
        for c in bundle.positive_counts(kind) {
            row.push(c.to_string());
            row.push(if n > 0 {
                format!("{:.4}", c as f64 / n as f64)
            } else {
                "nan".into()
            });
        }
        writeln!(out, "{}", row.join("\t"))?;
    }
    log::info!("wrote {}", cfg.bundle.display());
    Ok(())
}

fn cmd_thresholds(cli: &Cli, mode: &Option<String>, counts: &[u64], total: Option<u64>) -> anyhow::Result<()> {
    if let Some(total) = total {
        if counts.is_empty() {
            return Err(GnolrError::Argument("--total needs --counts".into()).into());
        }
        print_thresholds(&estimate_thresholds_from_counts(counts, total)?);
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let population = match mode {
        Some(m) => parse_population(m)?,
        None => match cfg.train.thresholds {
            gnolr_core::train::ThresholdMode::Auto(p) => p,
            gnolr_core::train::ThresholdMode::Manual(_) => Population::Train,
        },
    };
    let bundle = load_bundle(&cfg)?;
    let labels = match population {
        Population::Train => bundle.train_labels(),
        Population::All => bundle.all_labels(),
    };
    let t = estimate_thresholds(&labels, bundle.num_feedback()).map_err(|e| {
        let name = match &e {
            GnolrError::ThresholdEstimation { category, .. } => bundle.schema.names.get(category - 1).cloned(),
            _ => None,
        };
        match name {
            Some(n) => anyhow::Error::new(e).context(format!("feedback {n:?}")),
            None => e.into(),
        }
    })?;
    print_thresholds(&t);
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let bundle = load_bundle(cfg)?;
    match train(&bundle, &cfg.train) {
        Ok(ck) => {
            ck.save(&cfg.checkpoint)?;
            println!(
                "best_epoch={} best_val_auc_t{}={:.6}",
                ck.epoch,
                bundle.num_feedback(),
                ck.best_val_metric
            );
            log::info!("wrote {}", cfg.checkpoint.display());
            Ok(())
        }
        Err(GnolrError::Diverged { epoch, last_good }) => {
            last_good.save(&cfg.checkpoint)?;
            Err(anyhow!(
                "training diverged at epoch {epoch}; saved the last good checkpoint (epoch {}) to {}",
                last_good.epoch,
                cfg.checkpoint.display()
            ))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(cfg: &RunConfig, ks: &Option<Vec<usize>>, split: &Option<String>, json: bool) -> anyhow::Result<()> {
    let bundle = load_bundle(cfg)?;
    let ck = load_checkpoint(cfg, &bundle)?;
    let mut opts = cfg.eval.clone();
    if let Some(ks) = ks {
        opts.ks = ks.clone();
    }
    if let Some(s) = split {
        opts.split = parse_split(s)?;
    }
    let report = evaluate(&ck.model, &bundle, &opts)?;
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_lines());
    }
    Ok(())
}

fn cmd_retrieve(
    cfg: &RunConfig,
    k: usize,
    level: Option<usize>,
    users: &[String],
    out: &Option<PathBuf>,
) -> anyhow::Result<()> {
    let bundle = load_bundle(cfg)?;
    let ck = load_checkpoint(cfg, &bundle)?;
    let c = resolve_level(level, cfg, bundle.num_feedback())?;
    let mut w = output(out)?;
    if k == 0 {
        w.flush()?;
        return Ok(());
    }
    let query_users: Vec<usize> = if users.is_empty() {
        (0..bundle.users.len()).collect()
    } else {
        users
            .iter()
            .map(|id| {
                bundle
                    .users
                    .iter()
                    .position(|e| &e.key == id)
                    .ok_or_else(|| GnolrError::Argument(format!("unknown user id {id:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    let (user_emb, item_emb) = ck.model.encode_entities(&bundle)?;
    let view = ck.model.retrieval_view(c);
    let rows: Vec<Vec<f64>> = item_emb.iter().map(|e| view_embedding(e, view)).collect();
    let index = RetrievalIndex::new((0..rows.len() as u32).collect(), &rows)?;
    for u in query_users {
        let q = view_embedding(&user_emb[u], view);
        for (rank, item) in topk_retrieve(&q, &index, k)?.into_iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}",
                bundle.users[u].key,
                bundle.items[item as usize].key,
                rank + 1
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_angles(
    cfg: &RunConfig,
    level: Option<usize>,
    split: &Option<String>,
    out: &Option<PathBuf>,
) -> anyhow::Result<()> {
    let bundle = load_bundle(cfg)?;
    let ck = load_checkpoint(cfg, &bundle)?;
    let c = resolve_level(level, cfg, bundle.num_feedback())?;
    let split = match split {
        Some(s) => parse_split(s)?,
        None => cfg.eval.split,
    };
    let (users, items) = ck.model.encode_entities(&bundle)?;
    let view = ck.model.retrieval_view(c);
    let mut hist = AngleHistogram::default();
    for s in bundle.split(split) {
        let u = view_embedding(&users[s.user as usize], view);
        let i = view_embedding(&items[s.item as usize], view);
        hist.add(&u, &i, s.label.exceeds(c))?;
    }
    let mut w = output(out)?;
    hist.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_export(cfg: &RunConfig, side: ExportSide, level: Option<usize>, out: &Option<PathBuf>) -> anyhow::Result<()> {
    let bundle = load_bundle(cfg)?;
    let ck = load_checkpoint(cfg, &bundle)?;
    let c = resolve_level(level, cfg, bundle.num_feedback())?;
    let (users, items) = ck.model.encode_entities(&bundle)?;
    let view = ck.model.retrieval_view(c);
    let (embs, entities) = match side {
        ExportSide::User => (users, &bundle.users),
        ExportSide::Item => (items, &bundle.items),
    };
    let rows: Vec<Vec<f32>> = embs
        .iter()
        .map(|e| view_embedding(e, view).into_iter().map(|v| v as f32).collect())
        .collect();
    let file = EmbeddingFile {
        levels: bundle.num_feedback(),
        dim: rows.first().map_or(0, Vec::len),
        ids: entities.iter().map(|e| e.key.clone()).collect(),
        rows,
    };
    let mut w = output(out)?;
    file.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(GnolrError::Argument("--threads must be ≥ 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if let Cmd::Thresholds { mode, counts, total } = &cli.cmd {
        return cmd_thresholds(cli, mode, counts, *total);
    }
    let cfg = load_config(cli)?;
    eprintln!("seed={}", cfg.train.seed);
    match &cli.cmd {
        Cmd::Prepare => cmd_prepare(&cfg),
        Cmd::Train => cmd_train(&cfg),
        Cmd::Eval { ks, split, json } => cmd_eval(&cfg, ks, split, *json),
        Cmd::Retrieve { k, level, users, out } => cmd_retrieve(&cfg, *k, *level, users, out),
        Cmd::Angles { level, split, out } => cmd_angles(&cfg, *level, split, out),
        Cmd::Export { side, level, out } => cmd_export(&cfg, *side, *level, out),
        Cmd::Thresholds { .. } => unreachable!(),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<GnolrError>() {
        Some(e) if e.is_usage() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e:#}");
        return ExitCode::from(exit_code(&e));
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
