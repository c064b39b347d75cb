use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const USERS: usize = 30;
const ITEMS: usize = 20;

/// Two-feedback log: 30 users × 12 impressions with clicks on nearby items
/// and purchases on a subset of the clicks.
fn write_csv(dir: &Path, with_timestamp: bool) -> (PathBuf, [usize; 2]) {
    let mut text = String::new();
    if with_timestamp {
        text.push_str("user_id,item_id,timestamp,uf_group,if_group,click,buy\n");
    } else {
        text.push_str("user_id,item_id,uf_group,if_group,click,buy\n");
    }
    let mut pos = [0; 2];
    let mut n = 0usize;
    for u in 0..USERS {
        for j in 0..12 {
            let i = (u * 7 + j * 3) % ITEMS;
            let click = (u % 4 == i % 4) || (u + j) % 5 == 0;
            let buy = click && u % 4 == i % 4 && j % 2 == 0;
            pos[0] += click as usize;
            pos[1] += buy as usize;
            let ts = (n * 7919) % 100_000;
            if with_timestamp {
                writeln!(
                    text,
                    "u{u},i{i},{ts},g{},h{},{},{}",
                    u % 4,
                    i % 4,
                    click as u8,
                    buy as u8
                )
                .unwrap();
            } else {
                writeln!(text, "u{u},i{i},g{},h{},{},{}", u % 4, i % 4, click as u8, buy as u8).unwrap();
            }
            n += 1;
        }
    }
    let path = dir.join("log.csv");
    std::fs::write(&path, text).unwrap();
    (path, pos)
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "[data]\ncsv = log.csv\nbundle = cache.gnb\nfeedback = click,buy\n\n\
         [model]\nkind = gnolr\ngamma = 2\ntower = 16,8\nembed_dim = 4\n\n\
         [train]\nepochs = 2\nbatch_size = 64\nlearning_rate = 0.01\ncheckpoint = model.gnc\n\n\
         [eval]\nks = 5,10\n{extra}"
    );
    let path = dir.join("run.ini");
    std::fs::write(&path, text).unwrap();
    path
}

fn gnolr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnolr"))
        .args(args)
        .env("GNOLR_LOG", "quiet")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn setup() -> (TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path(), true);
    let cfg = write_config(dir.path(), "");
    (dir, cfg.to_string_lossy().into_owned())
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "status {:?}\nstderr: {}", o.status, stderr(&o));
    o
}

#[test]
fn prepare_reports_counts_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (_, pos) = write_csv(dir.path(), true);
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let out = stdout(&ok(gnolr(&["--config", cfg, "prepare"])));
    let first = std::fs::read(dir.path().join("cache.gnb")).unwrap();

    let mut totals = [0usize; 2];
    let mut rows = 0;
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].starts_with("users=30 items=20"));
    assert_eq!(lines[1], "split\trows\tclick_pos\tclick_frac\tbuy_pos\tbuy_frac");
    for line in &lines[2..] {
        let f: Vec<&str> = line.split('\t').collect();
        let n: usize = f[1].parse().unwrap();
        rows += n;
        for (t, total) in totals.iter_mut().enumerate() {
            let c: usize = f[2 + 2 * t].parse().unwrap();
            *total += c;
            let frac: f64 = f[3 + 2 * t].parse().unwrap();
            assert!((frac - c as f64 / n as f64).abs() < 5e-5);
        }
    }
    assert_eq!(rows, USERS * 12);
    assert_eq!(totals, pos);

    ok(gnolr(&["--config", cfg, "prepare"]));
    assert_eq!(std::fs::read(dir.path().join("cache.gnb")).unwrap(), first);
}

#[test]
fn missing_timestamp_column_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path(), false);
    let cfg = write_config(dir.path(), "");
    let o = gnolr(&["--config", cfg.to_str().unwrap(), "prepare"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("timestamp"));
}

#[test]
fn unknown_config_key_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path(), true);
    let cfg = write_config(dir.path(), "bogus = 1\n");
    let o = gnolr(&["--config", cfg.to_str().unwrap(), "prepare"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
}

fn parse_thresholds(out: &str) -> Vec<f64> {
    let line = out.lines().find(|l| l.starts_with("thresholds")).unwrap();
    line.split('=')
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.trim().parse().unwrap())
        .collect()
}

#[test]
fn thresholds_from_aggregate_counts() {
    let o = ok(gnolr(&[
        "thresholds",
        "--counts",
        "2620000,13100",
        "--total",
        "69100000",
    ]));
    let a = parse_thresholds(&stdout(&o));
    assert!((a[0] - 3.2343).abs() <= 0.01, "{a:?}");
    assert!((a[1] - 8.5681).abs() <= 0.01, "{a:?}");
    let o = ok(gnolr(&["thresholds", "--counts", "50", "--total", "100"]));
    assert!(stdout(&o).contains("thresholds = 0.0000"));
}

#[test]
fn thresholds_round_trip_into_the_config() {
    let (dir, cfg) = setup();
    ok(gnolr(&["--config", &cfg, "prepare"]));
    let out = stdout(&ok(gnolr(&["--config", &cfg, "thresholds", "--mode", "all"])));
    assert!(out.starts_with("[model]\nthresholds = "));
    let a = parse_thresholds(&out);
    assert_eq!(a.len(), 2);
    assert!(a[0] < a[1]);
    let value = out
        .lines()
        .nth(1)
        .unwrap()
        .split('=')
        .nth(1)
        .unwrap()
        .trim()
        .to_string();
    ok(gnolr(&[
        "--config",
        &cfg,
        "--set",
        &format!("model.thresholds={value}"),
        "--set",
        "train.epochs=1",
        "train",
    ]));
    assert!(dir.path().join("model.gnc").is_file());
}

#[test]
fn single_class_feedback_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("user_id,item_id,timestamp,click,buy\n");
    for n in 0..40 {
        writeln!(text, "u{},i{},{n},{},0", n % 5, n % 7, (n % 3 == 0) as u8).unwrap();
    }
    std::fs::write(dir.path().join("log.csv"), text).unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(gnolr(&["--config", cfg, "prepare"]));
    let o = gnolr(&["--config", cfg, "thresholds"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("buy"), "{}", stderr(&o));
}

#[test]
fn train_eval_retrieve_angles_export() {
    let (dir, cfg) = setup();
    ok(gnolr(&["--config", &cfg, "prepare"]));
    let train = ok(gnolr(&["--config", &cfg, "--seed", "7", "train"]));
    assert!(stderr(&train).contains("seed=7"));
    assert!(stdout(&train).starts_with("best_epoch="));

    let eval = |extra: &[&str]| {
        let mut args = vec!["--config", cfg.as_str(), "eval"];
        args.extend_from_slice(extra);
        stdout(&ok(gnolr(&args)))
    };
    let report = eval(&["--ks", "5,10,15,20"]);
    for c in 1..=2 {
        let recalls = report
            .lines()
            .filter(|l| l.contains(&format!("_t{c}=")) && l.starts_with("recall@"))
            .count();
        assert_eq!(recalls, 4, "{report}");
        assert!(report.contains(&format!("auc_t{c}=")));
    }
    let json = eval(&["--json"]);
    assert!(json.trim_start().starts_with('{'));

    let none = ok(gnolr(&["--config", &cfg, "retrieve", "--k", "0"]));
    assert!(stdout(&none).is_empty());
    let top = stdout(&ok(gnolr(&[
        "--config", &cfg, "retrieve", "--k", "3", "--user", "u1", "--user", "u2",
    ])));
    let lines: Vec<&str> = top.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("u1\ti"));
    assert!(lines[0].ends_with("\t1"));
    assert!(lines[5].starts_with("u2\t") && lines[5].ends_with("\t3"));

    let angles_path = dir.path().join("angles.csv");
    ok(gnolr(&[
        "--config",
        &cfg,
        "angles",
        "--out",
        angles_path.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(&angles_path).unwrap();
    assert_eq!(csv.lines().next(), Some("bin_deg,pos,neg"));
    assert_eq!(csv.lines().count(), 181);

    let emb = stdout(&ok(gnolr(&["--config", &cfg, "export", "--side", "item"])));
    assert!(
        emb.starts_with("#gnolr-emb v1 dim=16 T=2\n"),
        "{}",
        emb.lines().next().unwrap()
    );
    assert_eq!(emb.lines().count(), 1 + ITEMS);
}

#[test]
fn same_seed_gives_identical_reports() {
    let (_dir, cfg) = setup();
    ok(gnolr(&["--config", &cfg, "prepare"]));
    let run = || {
        ok(gnolr(&["--config", &cfg, "--seed", "7", "train"]));
        stdout(&ok(gnolr(&["--config", &cfg, "eval", "--json"])))
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_level_mismatch_exits_with_usage_code() {
    let (dir, cfg) = setup();
    ok(gnolr(&["--config", &cfg, "prepare"]));
    ok(gnolr(&["--config", &cfg, "train"]));
    let other = [
        "--config",
        &cfg,
        "--set",
        "data.feedback=click",
        "--set",
        "data.bundle=single.gnb",
    ];
    let mut prep = other.to_vec();
    prep.push("prepare");
    ok(gnolr(&prep));
    assert!(dir.path().join("single.gnb").is_file());
    let mut eval = other.to_vec();
    eval.extend_from_slice(&["--set", "train.checkpoint=model.gnc", "eval"]);
    let o = gnolr(&eval);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("feedback levels"));
}

#[test]
fn bad_log_setting_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_gnolr"))
        .args(["thresholds", "--counts", "1", "--total", "2"])
        .env("GNOLR_LOG", "loud")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
