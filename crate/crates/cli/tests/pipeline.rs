use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};
use tda_cli::config::{schema, Overrides};
use tda_cli::pipeline::{read_summary, Paths, Pipeline, PointStatus, TruthKind, SUMMARY_HEADER};
use tda_cli::report::{run_report, Uncertainty, SEED_RUNS};
use tda_cli::{CliError, RunConfig};
use tda_core::attrib::{ScoreMatrix, ScoreMetadata};
use tda_core::metrics::MetricKind;
use tda_core::truth::TruthData;

fn base(out: &Path) -> Value {
    json!({
        "dataset": {
            "source": {"kind": "synthetic", "n": 200, "dim": 5, "n_classes": 3, "separation": 1.5, "seed": 11},
            "train": {"kind": "range", "lo": 0, "hi": 60},
            "test": {"kind": "range", "lo": 150, "hi": 160}
        },
        "model": {"arch": "log_reg", "in_dim": 5, "n_classes": 3},
        "train": {"lr": 0.5, "momentum": 0.0, "batch_size": 60, "epochs": 60, "weight_decay": 1e-3},
        "method": {"name": "if-explicit"},
        "truth": {"loo": true},
        "seeds": {"train": 1, "truth": 2, "method": 3},
        "output_dir": out
    })
}

fn config(v: &Value) -> RunConfig {
    RunConfig::from_json(&serde_json::to_vec(v).unwrap()).unwrap()
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn tda(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_tda"))
        .args(args)
        .env("RUST_LOG", "error")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn files_in(dir: &Path, suffix: &str) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(suffix))
        .collect();
    v.sort();
    v
}

#[test]
fn exit_code_ok_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(&dir.path().join("out"));
    let p = write_config(dir.path(), &v);
    assert_eq!(tda(&["train", "--config", p.to_str().unwrap()]), 0);

    v["dataset"]["source"] = json!({"kind": "idx", "images": "/no/such/images", "labels": "/no/such/labels"});
    let p = write_config(dir.path(), &v);
    assert_eq!(tda(&["train", "--config", p.to_str().unwrap()]), 2);

    let mut v = base(&dir.path().join("out"));
    v["method"]["colour"] = json!("blue");
    let p = write_config(dir.path(), &v);
    assert_eq!(tda(&["train", "--config", p.to_str().unwrap()]), 2);
    assert_eq!(tda(&["train", "--config", "/no/such/config.json"]), 2);
}

#[test]
fn exit_code_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(&dir.path().join("out"));
    v["train"]["lr"] = json!(1e300);
    let p = write_config(dir.path(), &v);
    assert_eq!(tda(&["train", "--config", p.to_str().unwrap()]), 3);
}

#[test]
fn exit_code_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let p = write_config(dir.path(), &base(&out));
    let cfg = p.to_str().unwrap();
    assert_eq!(tda(&["truth", "loo", "--config", cfg]), 0);
    std::fs::write(out.join("truth/loo/manifest.json"), b"{ not json").unwrap();
    assert_eq!(tda(&["truth", "loo", "--config", cfg]), 4);

    // A tampered checkpoint is caught by its recorded hash.
    assert_eq!(tda(&["train", "--config", cfg]), 0);
    let ckpt = out.join("model").join(&files_in(&out.join("model"), ".ckpt")[0]);
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    assert_eq!(tda(&["train", "--config", cfg]), 4);
}

#[test]
fn cli_overrides_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &base(&dir.path().join("out")));
    let o = Overrides {
        output_dir: Some(dir.path().join("elsewhere")),
        seed_train: Some(9),
        seed_truth: None,
        seed_method: Some(8),
    };
    let cfg = RunConfig::load(&p, &o).unwrap();
    assert_eq!(cfg.output_dir, dir.path().join("elsewhere"));
    assert_eq!((cfg.seeds.train, cfg.seeds.truth, cfg.seeds.method), (9, 2, 8));
}

#[test]
fn rerun_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(&dir.path().join("a"));
    v["method"] = json!({"name": "trak", "ensemble": {"mode": "independent_models", "sizes": [1, 2]}});
    v["train"]["checkpoint_epochs"] = json!([20, 40]);
    let a = Pipeline::new(config(&v)).unwrap();
    a.attribute().unwrap();
    v["output_dir"] = json!(dir.path().join("b"));
    let b = Pipeline::new(config(&v)).unwrap();
    b.attribute().unwrap();
    for sub in ["model", "scores/trak"] {
        let (da, db) = (dir.path().join("a").join(sub), dir.path().join("b").join(sub));
        let names = files_in(&da, "");
        assert_eq!(names, files_in(&db, ""));
        for n in names.iter().filter(|n| n.ends_with(".ckpt") || n.ends_with(".csv")) {
            assert_eq!(std::fs::read(da.join(n)).unwrap(), std::fs::read(db.join(n)).unwrap(), "{sub}/{n}");
        }
    }
}

#[test]
fn truth_bundle_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(&dir.path().join("out"));
    v["truth"] = json!({"loo": true, "lds": {"m": 4, "alpha": 0.5}, "noisy": {"fraction": 0.1}});
    let p = Pipeline::new(config(&v)).unwrap();
    assert_eq!(p.truth(TruthKind::Loo).unwrap().1, 61);
    assert_eq!(p.truth(TruthKind::Lds).unwrap().1, 4);
    for kind in [TruthKind::Loo, TruthKind::Lds, TruthKind::Noisy] {
        assert_eq!(p.truth(kind).unwrap().1, 0);
    }
    // A different truth seed invalidates the cache.
    v["seeds"]["truth"] = json!(99);
    let p = Pipeline::new(config(&v)).unwrap();
    assert_eq!(p.truth(TruthKind::Lds).unwrap().1, 4);
}

#[test]
fn if_cg_writes_one_score_file_per_regularization() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(&dir.path().join("out"));
    v["method"] = json!({"name": "if-cg"});
    let sweep = Pipeline::new(config(&v)).unwrap().attribute().unwrap();
    assert_eq!(sweep.points.len(), 6);
    assert!(sweep.points.iter().all(|p| p.status == PointStatus::Ok));
    let files = files_in(&dir.path().join("out/scores/if-cg"), ".csv");
    assert_eq!(files.len(), 6);
    assert!(files.iter().all(|f| f.contains("max_iter=10")));
}

#[test]
fn trak_writes_two_files_per_ensemble_size() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(&dir.path().join("out"));
    v["method"] = json!({"name": "trak", "ensemble": {"mode": "independent_models", "sizes": [1, 3]}});
    Pipeline::new(config(&v)).unwrap().attribute().unwrap();
    let files = files_in(&dir.path().join("out/scores/trak"), ".csv");
    assert_eq!(files.len(), 4);
    for size in [1, 3] {
        assert_eq!(files.iter().filter(|f| f.contains(&format!("ensemble_size={size}"))).count(), 2);
    }
}

#[test]
fn diverging_grid_point_is_recorded_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut v = base(&out);
    v["method"] = json!({"name": "if-lissa", "grid": [
        {"recursion_depth": 200, "batch_size": 10},
        {"recursion_depth": 200, "batch_size": 10, "scale": 0.01}
    ]});
    let p = write_config(dir.path(), &v);
    assert_eq!(tda(&["evaluate", "--config", p.to_str().unwrap()]), 0);

    let sweep: Value = serde_json::from_slice(&std::fs::read(out.join("scores/if-lissa/sweep.json")).unwrap()).unwrap();
    let bad = &sweep["points"][1];
    assert_eq!(bad["status"], "failed");
    assert!(bad["message"].as_str().unwrap().contains("LiSSA"));
    let files = files_in(&out.join("scores/if-lissa"), ".csv");
    assert_eq!(files, vec!["recursion_depth=200_batch_size=10.csv"]);

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let bad_row = summary.lines().find(|l| l.contains("scale=1e-2")).unwrap();
    assert_eq!(bad_row, "if-lissa,recursion_depth=200_batch_size=10_scale=1e-2,loo,,,true");
}

#[test]
fn oracle_scores_give_perfect_loo() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(&dir.path().join("out"));
    v["method"] = json!({"name": "grad-dot"});
    let p = Pipeline::new(config(&v)).unwrap();
    p.attribute().unwrap();
    let TruthData::Loo(truth) = p.truth(TruthKind::Loo).unwrap().0 else { panic!("expected LOO truth") };
    // Removing a helpful point lowers the output, so the oracle score is the
    // negated change.
    let columns = (0..truth.n_test).map(|t| truth.deltas(t).iter().map(|d| -d).collect()).collect();
    let oracle = ScoreMatrix::from_columns(truth.n_train, columns, ScoreMetadata::default()).unwrap();
    oracle.write(&dir.path().join("out/scores/grad-dot/default.csv")).unwrap();
    let eval = p.evaluate().unwrap();
    let best = eval.best.iter().find(|b| b.metric == MetricKind::Loo).unwrap();
    assert!((best.aggregate - 1.0).abs() < 1e-12, "{}", best.aggregate);
    assert!(best.stderr < 1e-12);
}

#[test]
fn best_point_has_the_highest_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(&dir.path().join("out"));
    v["truth"] = json!({"loo": true, "lds": {"m": 6, "alpha": 0.5}});
    let eval = Pipeline::new(config(&v)).unwrap().evaluate().unwrap();
    assert_eq!(eval.rows.len(), 12);
    for b in &eval.best {
        let max = eval
            .rows
            .iter()
            .filter(|r| r.metric == b.metric)
            .filter_map(|r| r.aggregate)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(b.aggregate, max);
        let first = eval.rows.iter().find(|r| r.metric == b.metric && r.aggregate == Some(max)).unwrap();
        assert_eq!(b.grid_point, first.grid_point);
    }
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), SUMMARY_HEADER.join(","));
    assert_eq!(summary.lines().count(), 13);
}

#[test]
fn changed_method_seed_recomputes_scores() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(&dir.path().join("out"));
    v["method"] = json!({"name": "trak", "grid": [{"projection_dim": 8, "ensemble_size": 1}]});
    let a = Pipeline::new(config(&v)).unwrap().evaluate().unwrap();
    v["seeds"]["method"] = json!(4);
    let b = Pipeline::new(config(&v)).unwrap().evaluate().unwrap();
    assert_ne!(a.best[0].aggregate, b.best[0].aggregate);
}

#[test]
fn algorithm_report_mean_and_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&base(&dir.path().join("out")));
    let report = run_report(&cfg, Uncertainty::Algorithm).unwrap();
    let runs: Vec<f64> =
        report.rows.iter().filter(|r| r.metric == MetricKind::Loo && r.run != "mean").map(|r| r.aggregate).collect();
    assert_eq!(runs.len(), SEED_RUNS);
    let mean = runs.iter().sum::<f64>() / 5.0;
    let var = runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
    let row = report.mean(MetricKind::Loo).unwrap();
    assert!((row.aggregate - mean).abs() < 1e-12);
    assert!((row.stderr - (var / 5.0).sqrt()).abs() < 1e-12);
    // Attribution seeds vary; the ground truth is shared.
    let seeds: Vec<_> = report.rows.iter().filter_map(|r| r.seeds).collect();
    assert!(seeds.iter().all(|s| s.truth == 2));
    assert!(seeds.windows(2).any(|w| w[0].train != w[1].train));
    let csv = std::fs::read_to_string(dir.path().join("out/report/algorithm/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + SEED_RUNS + 1);
}

#[test]
fn ground_truth_report_varies_only_truth_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&base(&dir.path().join("out")));
    let report = run_report(&cfg, Uncertainty::GroundTruth).unwrap();
    let seeds: Vec<_> = report.rows.iter().filter_map(|r| r.seeds).collect();
    assert_eq!(seeds.len(), SEED_RUNS);
    assert!(seeds.iter().all(|s| s.train == 1 && s.method == 3));
    let mut truth: Vec<u64> = seeds.iter().map(|s| s.truth).collect();
    truth.dedup();
    assert_eq!(truth.len(), SEED_RUNS);
    let none = run_report(&cfg, Uncertainty::None).unwrap();
    assert_eq!(none.rows.len(), 1);
}

#[test]
fn paths_follow_the_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&base(&dir.path().join("out")));
    let paths = Paths::for_config(&cfg);
    assert_eq!(paths.truth_dir(TruthKind::Lds), dir.path().join("out/truth/lds"));
    assert_eq!(paths.summary(), dir.path().join("out/summary.csv"));
}

#[test]
fn schema_describes_the_config() {
    let s = schema();
    let props = s["properties"].as_object().unwrap();
    for key in ["dataset", "model", "train", "method", "truth", "seeds", "output_dir", "budget_secs"] {
        assert!(props.contains_key(key), "{key}");
    }
    assert_eq!(s["additionalProperties"], json!(false));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("schema.json");
    assert_eq!(tda(&["schema", "--output", out.to_str().unwrap()]), 0);
    let written: Value = serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!(written, s);
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(&dir.path().join("out"));
    v["truth"] = json!({"lds": {"m": 1, "alpha": 0.5}});
    let err = Pipeline::new(config(&v)).and_then(|p| p.evaluate()).unwrap_err();
    assert!(matches!(err, CliError::Config(_) | CliError::Core(tda_core::Error::Config(_))), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn summary_accumulates_methods() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(&dir.path().join("out"));
    for name in ["grad-dot", "grad-cos", "grad-dot"] {
        v["method"] = json!({"name": name});
        Pipeline::new(config(&v)).unwrap().evaluate().unwrap();
    }
    let rows = read_summary(&dir.path().join("out/summary.csv")).unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["grad-cos", "grad-dot"]);
    assert_eq!(rows[0].metric, MetricKind::Loo);
    assert!(rows.iter().all(|r| r.aggregate.is_some() && !r.infeasible));
}
