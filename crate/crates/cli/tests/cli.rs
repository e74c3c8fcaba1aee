use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rebalance::corpus::{load_corpus, write_corpus, CorpusFormat};
use rebalance_cli::{fixture_config, Manifest};

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn config() -> PathBuf {
    fixtures_dir().join("config.toml")
}

fn rebalance(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rebalance")).args(args).output().expect("binary runs")
}

fn run_ok(out: &Path, args: &[&str]) -> Output {
    let cfg = config();
    let mut full = vec!["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    full.extend_from_slice(args);
    let o = rebalance(&full);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn ingest_reports_class_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_ok(tmp.path(), &["ingest"]);
    let summary = read_json(&tmp.path().join("ingest/summary.json"));
    assert_eq!(summary["positive"], 946);
    assert_eq!(summary["negative"], 122);
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"negative\":122"));
}

#[test]
fn tsv_input_gives_the_same_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = load_corpus(&fixtures_dir().join("corpus.csv"), CorpusFormat::Csv).unwrap();
    let tsv = tmp.path().join("corpus.tsv");
    write_corpus(&corpus, &tsv, CorpusFormat::Tsv).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(&a, &["ingest"]);
    run_ok(&b, &["ingest", "--input", tsv.to_str().unwrap(), "--format", "tsv"]);
    assert_eq!(fs::read(a.join("ingest/summary.json")).unwrap(), fs::read(b.join("ingest/summary.json")).unwrap());
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere.csv");
    let cfg = config();
    let o = rebalance(&["--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "ingest", "--input", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.csv"));
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\ncolour = \"red\"\n").unwrap();
    let o = rebalance(&["--config", cfg.to_str().unwrap(), "ingest"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn json_config_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    let corpus = fixtures_dir().join("corpus.csv");
    fs::write(&cfg, serde_json::json!({"corpus": {"path": corpus}}).to_string()).unwrap();
    let o = rebalance(&["--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap(), "ingest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn runtime_failure_exits_3() {
    // Swaps never change the bag of words, so every candidate is a duplicate.
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fixture_config(42);
    cfg.balance.source_methods = vec!["swap_random".into()];
    cfg.resolve_paths(&fixtures_dir());
    let path = tmp.path().join("swap_only.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    let o = rebalance(&["--config", path.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap(), "balance"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn augment_reports_one_row_per_method() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(tmp.path(), &["augment", "--methods", "swap_random,substitute_synonym"]);
    let rows = csv_rows(&tmp.path().join("augment/similarity.csv"));
    let methods: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(methods, ["substitute_synonym", "swap_random"]);
}

#[test]
fn all_traditional_ranks_substitution_above_insertion() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(tmp.path(), &["augment", "--all-traditional"]);
    let rows = csv_rows(&tmp.path().join("augment/similarity.csv"));
    let mean = |m: &str| rows.iter().find(|r| &r[0] == m).unwrap()[1].parse::<f64>().unwrap();
    for m in ["substitute_embedding", "substitute_synonym", "swap_random"] {
        assert!(mean(m) > mean("insert_embedding"), "{m}");
    }
}

#[test]
fn llm_replay_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let transcript = fixtures_dir().join("transcript.jsonl");
    let args = ["augment", "--llm", "--replay", transcript.to_str().unwrap()];
    run_ok(&tmp.path().join("a"), &args);
    run_ok(&tmp.path().join("b"), &args);
    let a = fs::read(tmp.path().join("a/augment/records.jsonl")).unwrap();
    assert_eq!(a, fs::read(tmp.path().join("b/augment/records.jsonl")).unwrap());
    assert_eq!(csv_rows(&tmp.path().join("a/augment/similarity.csv")).len(), 7);
}

#[test]
fn cv_writes_fold_reports_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(tmp.path(), &["cv", "--k", "5"]);
    let report = read_json(&tmp.path().join("cv/report.json"));
    assert_eq!(report["folds"].as_array().unwrap().len(), 5);
    assert!(report["mean"]["accuracy"].is_number());
    assert!(report["stddev"]["accuracy"].is_number());
}

#[test]
fn rules_compare_writes_both_reports() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(tmp.path(), &["rules", "--compare"]);
    let without = read_json(&tmp.path().join("rules/without.json"));
    let with = read_json(&tmp.path().join("rules/with.json"));
    let f1 = |r: &serde_json::Value| r["per_class"]["negative"]["f1"].as_f64().unwrap();
    assert!(f1(&with) >= f1(&without));
    assert_eq!(csv_rows(&tmp.path().join("rules/per_rule.csv")).len(), 3);
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(tmp.path(), &["train"]);
    run_ok(tmp.path(), &["eval"]);
    let report = read_json(&tmp.path().join("eval/report.json"));
    let support: u64 = ["negative", "positive"].iter().map(|c| report["per_class"][c]["support"].as_u64().unwrap()).sum();
    // 1068 minus the 757 + 98 training examples.
    assert_eq!(support, 213);
}

#[test]
fn trend_final_minority_f1_not_below_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(tmp.path(), &["trend"]);
    let rows: Vec<_> = csv_rows(&tmp.path().join("trend/trend.csv")).into_iter().filter(|r| &r[2] == "negative").collect();
    let f1 = |r: &csv::StringRecord| r[5].parse::<f64>().unwrap();
    assert!(rows.len() >= 2);
    assert!(f1(rows.last().unwrap()) >= f1(&rows[0]));
    assert!(fs::read_to_string(tmp.path().join("trend/trend.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn manifest_artifacts_exist_and_parse() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["ingest"][..], &["augment", "--all-traditional"], &["train"], &["eval"], &["trend"]] {
        run_ok(tmp.path(), args);
    }
    let manifest = Manifest::load(&tmp.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.seeds["global"], 42);
    assert_eq!(manifest.commands.len(), 5);
    for a in manifest.commands.values().flatten() {
        let path = tmp.path().join(&a.path);
        let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", a.path));
        match a.schema.as_str() {
            "json" => {
                serde_json::from_str::<serde_json::Value>(&text).unwrap();
            }
            "jsonl" => {
                for line in text.lines() {
                    serde_json::from_str::<serde_json::Value>(line).unwrap();
                }
            }
            "csv" => {
                assert!(!csv_rows(&path).is_empty(), "{}", a.path);
            }
            "svg" => assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>")),
            other => panic!("unexpected schema {other}"),
        }
    }
}

#[test]
fn seed_override_changes_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(&tmp.path().join("a"), &["ingest"]);
    run_ok(&tmp.path().join("b"), &["--seed", "7", "ingest"]);
    let a = Manifest::load(&tmp.path().join("a/manifest.json")).unwrap();
    let b = Manifest::load(&tmp.path().join("b/manifest.json")).unwrap();
    assert_ne!(a.config_hash, b.config_hash);
    assert_eq!(b.seeds["global"], 7);
}

#[test]
fn regenerated_fixtures_match_the_shipped_set() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rebalance(&["fixtures", "generate", "--dir", tmp.path().to_str().unwrap()]);
    assert!(o.status.success());
    let mut compared = 0;
    for entry in walk(tmp.path()) {
        let rel = entry.strip_prefix(tmp.path()).unwrap();
        let shipped = fixtures_dir().join(rel);
        assert_eq!(fs::read(&entry).unwrap(), fs::read(&shipped).unwrap(), "{}", rel.display());
        compared += 1;
    }
    assert_eq!(compared, 14);
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}
