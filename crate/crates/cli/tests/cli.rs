use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};
use taskhedge::market_models::ModelSpec;
use taskhedge::neural::NetworkParams;
use taskhedge_cli::commands::{self, Layout};
use taskhedge_cli::storage;
use taskhedge_cli::ExperimentConfig;

fn base_config(out: &Path) -> Value {
    json!({
        "schema_version": 1,
        "name": "smoke",
        "family": {"kind": "gbm_uniform", "n_tasks": 4, "sigma": {"min": 0.1, "max": 0.8}},
        "grid": {"maturity": 10.0 / 365.0, "n_steps": 10},
        "paths_per_task": 80,
        "arch": {"hidden": [6, 6], "embed_dim": 1},
        "train": {"batch_size": 64, "epochs": 4, "lr_initial": 0.005, "lr_final": 0.001},
        "output_dir": out,
        "seed": 11
    })
}

fn config(v: &Value) -> ExperimentConfig {
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn run_bin(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_taskhedge")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn all_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn simulate_writes_datasets_and_manifest_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config(&tmp.path().join("a"));
    v["family"]["n_tasks"] = json!(8);
    let cfg = config(&v);
    let rows = commands::cmd_simulate(&cfg, &tmp.path().join("a")).unwrap();
    assert_eq!(rows.len(), 8);
    let layout = Layout::new(tmp.path().join("a"));
    let (_, manifest) = csv_rows(&layout.manifest());
    assert_eq!(manifest.len(), 8);
    for i in 0..8 {
        let set = storage::load_dataset(&layout.datasets_dir().join(Layout::dataset_name(i))).unwrap();
        assert_eq!((set.task_id, set.n_paths(), set.n_steps()), (i, 80, 10));
    }
    commands::cmd_simulate(&cfg, &tmp.path().join("b")).unwrap();
    assert_eq!(all_files(&tmp.path().join("a")), all_files(&tmp.path().join("b")));
}

#[test]
fn sampled_family_manifest_stays_in_range() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config(tmp.path());
    v["family"]["n_tasks"] = json!(32);
    v["paths_per_task"] = json!(2);
    commands::cmd_simulate(&config(&v), tmp.path()).unwrap();
    let rows = storage::read_manifest(&Layout::new(tmp.path()).manifest()).unwrap();
    assert_eq!(rows.len(), 32);
    for r in rows {
        let ModelSpec::Gbm(p) = r.model else { panic!("expected gbm") };
        assert!((0.1..=0.8).contains(&p.sigma), "{}", p.sigma);
    }
}

#[test]
fn train_smoke_zero_epochs_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config(tmp.path());
    v["train"]["epochs"] = json!(15);
    let cfg = config(&v);
    commands::cmd_simulate(&cfg, tmp.path()).unwrap();
    let log = commands::cmd_train(&cfg, tmp.path(), false).unwrap();
    let (first, last) = (log.initial.unwrap(), *log.final_record().unwrap());
    assert!(last.eval_loss.unwrap() < first.eval_loss.unwrap());
    let (header, rows) = csv_rows(&Layout::new(tmp.path()).train_log());
    assert_eq!(header, ["epoch", "learning_rate", "train_loss", "eval_loss"]);
    assert_eq!(rows.len(), 16);

    let trained = fs::read(Layout::new(tmp.path()).checkpoint()).unwrap();
    v["train"]["epochs"] = json!(0);
    let zero = config(&v);
    commands::cmd_train(&zero, tmp.path(), true).unwrap();
    assert_eq!(fs::read(Layout::new(tmp.path()).checkpoint()).unwrap(), trained);

    commands::cmd_train(&zero, tmp.path(), false).unwrap();
    let init = NetworkParams::init(&zero.network_arch().unwrap(), zero.train_config().seed).unwrap();
    assert_eq!(commands::load_params(tmp.path()).unwrap(), init);
}

#[test]
fn recalibration_freezes_shared_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config(tmp.path());
    v["recalibration"] = json!({
        "model": {"kind": "gbm", "sigma": 0.45},
        "paths": 20,
        "eval_paths": 200,
        "epochs": 5
    });
    let cfg = config(&v);
    commands::cmd_simulate(&cfg, tmp.path()).unwrap();
    commands::cmd_train(&cfg, tmp.path(), false).unwrap();
    let layout = Layout::new(tmp.path());
    let base = storage::load_checkpoint(&layout.checkpoint()).unwrap();
    let rows = commands::cmd_recalibrate(&cfg, tmp.path()).unwrap();
    let strategies: Vec<_> = rows.iter().map(|r| r.strategy).collect();
    assert_eq!(strategies, ["recalibrated", "scratch", "black_scholes"]);
    let recal = storage::load_checkpoint(&layout.recal_checkpoint()).unwrap();
    assert_eq!(recal.n_tasks(), base.n_tasks() + 1);
    let bytes = |x: &[f64]| x.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
    assert_eq!(bytes(recal.shared_weights()), bytes(base.shared_weights()));
    assert_eq!(bytes(&recal.embedding()[..base.n_tasks()]), bytes(base.embedding()));
    let (_, report) = csv_rows(&layout.recal_report());
    assert_eq!(report.len(), 3);

    v["recalibration"]["epochs"] = json!(0);
    commands::cmd_recalibrate(&config(&v), tmp.path()).unwrap();
    let fresh = storage::load_checkpoint(&layout.recal_checkpoint()).unwrap();
    assert_eq!(fresh.embed(base.n_tasks()).unwrap(), base.mean_embedding().as_slice());

    v["arch"]["hidden"] = json!([5, 6]);
    let err = commands::cmd_recalibrate(&config(&v), tmp.path()).unwrap_err();
    assert!(err.to_string().contains("does not match"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn evaluate_writes_requested_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config(tmp.path());
    let cfg = config(&v);
    commands::cmd_simulate(&cfg, tmp.path()).unwrap();
    commands::cmd_train(&cfg, tmp.path(), false).unwrap();
    assert!(commands::cmd_evaluate(&cfg, tmp.path()).unwrap().is_empty());
    assert!(!tmp.path().join("pnl_stats.csv").exists());

    v["evaluation"] = json!({
        "pnl_stats": true, "variance_aggregate": true, "baseline": true, "histograms": true,
        "histogram_bins": 8, "delta_slices": true, "embeddings": true, "implied_vols": true
    });
    let files = commands::cmd_evaluate(&config(&v), tmp.path()).unwrap();
    assert_eq!(files.len(), 7);
    let (header, rows) = csv_rows(&tmp.path().join("pnl_stats.csv"));
    assert_eq!(header, ["simulations_per_task", "mean", "std", "std_min", "std_max", "q01", "q10"]);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "16");

    let (_, agg) = csv_rows(&tmp.path().join("variance_aggregate.csv"));
    let labels: Vec<(String, String)> = agg.iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    assert_eq!(
        labels,
        [
            ("deep_hedging".to_string(), String::new()),
            ("bs_realized_vol".into(), "-0.05".into()),
            ("bs_realized_vol".into(), "0".into()),
            ("bs_realized_vol".into(), "0.05".into()),
        ]
    );

    let (_, hist) = csv_rows(&tmp.path().join("histograms.csv"));
    assert_eq!(hist.len(), 2 * 4 * 8);
    let network_count: usize = hist.iter().filter(|r| r[0] == "network").map(|r| r[5].parse::<usize>().unwrap()).sum();
    assert_eq!(network_count, 4 * 16);

    let (header, emb) = csv_rows(&tmp.path().join("embeddings.csv"));
    assert_eq!(header, ["task_id", "model_kind", "model", "embed_0", "atm_price"]);
    assert_eq!(emb.len(), 4);
    let params = commands::load_params(tmp.path()).unwrap();
    for (i, row) in emb.iter().enumerate() {
        assert_eq!(row[3].parse::<f64>().unwrap().to_bits(), params.embed(i).unwrap()[0].to_bits());
    }
    for name in ["delta_slices.csv", "implied_vols.csv", "pnl_task_stats.csv"] {
        let (_, rows) = csv_rows(&tmp.path().join(name));
        assert!(rows.len() >= 4, "{name}");
    }
}

#[test]
fn report_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config(tmp.path());
    v["recalibration"] = json!({"model": {"kind": "gbm", "sigma": 0.45}, "paths": 20, "eval_paths": 100, "epochs": 3});
    v["evaluation"] = json!({"pnl_stats": true, "variance_aggregate": true, "baseline": true, "histograms": true,
        "delta_slices": true, "embeddings": true, "implied_vols": true});
    let cfg = config(&v);
    commands::cmd_report(&cfg, &tmp.path().join("one")).unwrap();
    commands::cmd_report(&cfg, &tmp.path().join("two")).unwrap();
    let (a, b) = (all_files(&tmp.path().join("one")), all_files(&tmp.path().join("two")));
    assert!(a.len() >= 14, "{:?}", a.keys().collect::<Vec<_>>());
    assert_eq!(a, b);
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &base_config(&out));
    let cfg = cfg.to_str().unwrap();

    let (code, stdout, _) = run_bin(&["simulate", "--config", cfg, "--seed", "5", "--threads", "1"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("simulated 4 tasks"));
    let (code, _, _) = run_bin(&["evaluate", "--config", cfg]);
    assert_eq!(code, 0);

    assert_eq!(run_bin(&[]).0, 1);
    assert_eq!(run_bin(&["train"]).0, 1);
    assert_eq!(run_bin(&["--help"]).0, 0);
    assert_eq!(run_bin(&["train", "--config", tmp.path().join("missing.json").to_str().unwrap()]).0, 1);

    let broken = tmp.path().join("broken.json");
    fs::write(&broken, "{\"schema_version\": 1").unwrap();
    let (code, _, stderr) = run_bin(&["simulate", "--config", broken.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stderr.contains("invalid config"));

    let other = tmp.path().join("fresh");
    let (code, _, stderr) = run_bin(&["train", "--config", cfg, "--out", other.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stderr.contains("no datasets"), "{stderr}");

    fs::write(out.join(".lock"), "").unwrap();
    let (code, _, stderr) = run_bin(&["simulate", "--config", cfg]);
    assert_eq!(code, 1);
    assert!(stderr.contains("locked"));
    fs::remove_file(out.join(".lock")).unwrap();

    let mut diverge = base_config(&out);
    diverge["train"]["lr_initial"] = json!(1e300);
    diverge["train"]["lr_final"] = json!(1e300);
    let diverge = write_config(tmp.path(), &diverge);
    let (code, _, stderr) = run_bin(&["train", "--config", diverge.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("non-finite"), "{stderr}");
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
            n += 1;
        }
    }
    assert!(n >= 3);
}
