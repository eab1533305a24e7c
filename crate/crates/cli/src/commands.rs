//! The simulate → train → recalibrate → evaluate pipeline.
//!
//! Every step reads and writes a fixed layout under the output directory:
//!
//! ```text
//! manifest.csv                 task_id, model_kind, seed, file, model (JSON)
//! datasets/task_NNNN.bin       one binary path set per task (+ .csv on request)
//! checkpoint.bin, train_log.csv
//! datasets/new_task.bin, checkpoint_recalibrated.bin,
//! recalibration_log.csv, recalibration.csv
//! pnl_stats.csv, pnl_task_stats.csv, variance_aggregate.csv, histograms.csv,
//! delta_slices.csv, embeddings.csv, implied_vols.csv
//! ```

use std::path::{Path, PathBuf};

use taskhedge::analytic::{bs_hedge_pnl, bs_price, realized_vol};
use taskhedge::claims::{mc_premium, HedgeResult};
use taskhedge::evaluation::{
    delta_slice, export_embeddings, histogram, implied_vol, pnl_stats, sample_mean, sample_variance,
    variance_aggregate,
};
use taskhedge::market_models::{simulate, ModelSpec, PathSet};
use taskhedge::neural::{NetworkArch, NetworkParams};
use taskhedge::rng::mix_seed;
use taskhedge::training::{network_hedge, recalibrate, train, train_from, TrainLog, TrainMode};

use crate::config::{salt, ExperimentConfig};
use crate::storage::{self, ManifestRow, OutputLock};
use crate::CliError;

/// Benchmark volatility shifts, in absolute volatility.
pub const VOL_SHIFTS: [f64; 3] = [-0.05, 0.0, 0.05];

/// File locations under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.csv")
    }

    pub fn datasets_dir(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn dataset_name(task_id: usize) -> String {
        format!("task_{task_id:04}.bin")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn recal_dataset(&self) -> PathBuf {
        self.datasets_dir().join("new_task.bin")
    }

    pub fn recal_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint_recalibrated.bin")
    }

    pub fn recal_log(&self) -> PathBuf {
        self.root.join("recalibration_log.csv")
    }

    pub fn recal_report(&self) -> PathBuf {
        self.root.join("recalibration.csv")
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    storage::write_file(path, &w.into_inner().map_err(|e| CliError::Format(e.to_string()))?)
}

fn num(x: f64) -> String {
    x.to_string()
}

fn model_json(m: &ModelSpec) -> String {
    serde_json::to_string(m).expect("model serializes")
}

fn std_of(x: &[f64]) -> f64 {
    sample_variance(x).sqrt()
}

/// Volatility for Black-Scholes comparisons: the model's own for GBM,
/// otherwise the realized volatility of `paths`.
fn benchmark_vol(model: &ModelSpec, paths: &PathSet) -> Result<f64, CliError> {
    match model {
        ModelSpec::Gbm(p) if p.sigma > 0.0 => Ok(p.sigma),
        _ => Ok(realized_vol(paths)?),
    }
}

fn check_arch(found: &NetworkArch, expected: &NetworkArch) -> Result<(), CliError> {
    if found == expected {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "checkpoint architecture (tasks {}, embed {}, hidden {:?}) does not match the config (tasks {}, embed {}, hidden {:?})",
            found.n_tasks, found.embed_dim, found.hidden, expected.n_tasks, expected.embed_dim, expected.hidden
        )))
    }
}

pub fn simulate_in(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<ManifestRow>, CliError> {
    let models = cfg.models()?;
    create_dir(&layout.datasets_dir())?;
    let mut rows = Vec::with_capacity(models.len());
    for (i, model) in models.iter().enumerate() {
        let seed = cfg.dataset_seed(i);
        let set = simulate(model, &cfg.grid, cfg.paths_per_task, cfg.s0, seed)?.with_task_id(i);
        let file = Layout::dataset_name(i);
        let path = layout.datasets_dir().join(&file);
        storage::save_dataset(&path, &set)?;
        if cfg.export_csv {
            storage::write_file(&path.with_extension("csv"), &storage::dataset_csv(&set)?)?;
        }
        rows.push(ManifestRow { task_id: i, model: *model, seed, file });
    }
    storage::write_manifest(&layout.manifest(), &rows)?;
    Ok(rows)
}

/// Datasets listed in the manifest, checked against the config.
pub fn load_datasets(cfg: &ExperimentConfig, layout: &Layout) -> Result<(Vec<ManifestRow>, Vec<PathSet>), CliError> {
    if !layout.manifest().exists() {
        return Err(CliError::Config(format!(
            "no datasets found: {} is missing (run `simulate` first)",
            layout.manifest().display()
        )));
    }
    let rows = storage::read_manifest(&layout.manifest())?;
    if rows.len() != cfg.family.n_tasks() {
        return Err(CliError::Config(format!(
            "manifest lists {} tasks but the config has {}",
            rows.len(),
            cfg.family.n_tasks()
        )));
    }
    let mut sets = Vec::with_capacity(rows.len());
    for row in &rows {
        let set = storage::load_dataset(&layout.datasets_dir().join(&row.file))?;
        if set.grid != cfg.grid {
            return Err(CliError::Config(format!("dataset {} was simulated on a different grid", row.file)));
        }
        if set.task_id != row.task_id || set.model != row.model {
            return Err(CliError::Format(format!("dataset {} does not match its manifest row", row.file)));
        }
        sets.push(set);
    }
    Ok((rows, sets))
}

pub fn train_in(cfg: &ExperimentConfig, layout: &Layout, resume: bool) -> Result<TrainLog, CliError> {
    let (_, sets) = load_datasets(cfg, layout)?;
    let arch = cfg.network_arch()?;
    let tc = cfg.train_config();
    let (params, log) = if resume {
        let start = storage::load_checkpoint(&layout.checkpoint())?;
        check_arch(start.arch(), &arch)?;
        train_from(start, &sets, &cfg.claim, &tc)?
    } else {
        train(&sets, &arch, &cfg.claim, &tc)?
    };
    storage::save_checkpoint(&layout.checkpoint(), &params)?;
    storage::write_file(&layout.train_log(), log.to_csv().as_bytes())?;
    Ok(log)
}

/// Held-out PnL moments of one strategy on the recalibration task.
#[derive(Debug, Clone, PartialEq)]
pub struct RecalRow {
    pub strategy: &'static str,
    pub train_paths: usize,
    pub eval_paths: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn recalibrate_in(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<RecalRow>, CliError> {
    let rc = cfg
        .recalibration
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no recalibration section".into()))?;
    let base = storage::load_checkpoint(&layout.checkpoint())?;
    check_arch(base.arch(), &cfg.network_arch()?)?;
    let m = base.n_tasks();

    let new = simulate(&rc.model, &cfg.grid, rc.paths, cfg.s0, mix_seed(cfg.seed, salt::RECAL_PATHS))?.with_task_id(m);
    create_dir(&layout.datasets_dir())?;
    storage::save_dataset(&layout.recal_dataset(), &new)?;

    let tc = taskhedge::training::TrainConfig {
        epochs: rc.epochs.unwrap_or(cfg.train.epochs),
        eval_fraction: 0.0,
        mode: TrainMode::EmbeddingOnly { new_task_id: m },
        ..cfg.train_config()
    };
    let (params, log) = recalibrate(&base, &new, &cfg.claim, &tc)?;
    storage::save_checkpoint(&layout.recal_checkpoint(), &params)?;
    storage::write_file(&layout.recal_log(), log.to_csv().as_bytes())?;

    let eval = simulate(&rc.model, &cfg.grid, rc.eval_paths, cfg.s0, mix_seed(cfg.seed, salt::RECAL_EVAL))?;
    let row = |strategy, train_paths, r: &HedgeResult| RecalRow {
        strategy,
        train_paths,
        eval_paths: r.n_paths(),
        mean: sample_mean(&r.pnl),
        std: std_of(&r.pnl),
    };
    let mut rows = vec![row("recalibrated", rc.paths, &network_hedge(&params, &cfg.claim, &eval, m)?)];
    if rc.compare_scratch {
        let single = cfg.arch.to_arch(1)?;
        let tc = taskhedge::training::TrainConfig { mode: TrainMode::Full, ..tc };
        let (scratch, _) = train(&[new.clone().with_task_id(0)], &single, &cfg.claim, &tc)?;
        rows.push(row("scratch", rc.paths, &network_hedge(&scratch, &cfg.claim, &eval, 0)?));
    }
    let vol = benchmark_vol(&rc.model, &eval)?;
    rows.push(row("black_scholes", 0, &bs_hedge_pnl(&eval, &cfg.claim, vol, 0.0)?));

    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.strategy.into(), r.train_paths.to_string(), r.eval_paths.to_string(), num(r.mean), num(r.std)])
        .collect();
    write_csv(&layout.recal_report(), &["strategy", "train_paths", "eval_paths", "mean", "std"], &table)?;
    Ok(rows)
}

fn with_premium(mut r: HedgeResult) -> HedgeResult {
    r.pnl = r.pnl_with_premium();
    r
}

pub fn evaluate_in(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>, CliError> {
    let flags = &cfg.evaluation;
    if !flags.any() {
        return Ok(Vec::new());
    }
    let params = storage::load_checkpoint(&layout.checkpoint())?;
    check_arch(params.arch(), &cfg.network_arch()?)?;
    let (rows, sets) = load_datasets(cfg, layout)?;

    let evals: Vec<PathSet> = sets
        .iter()
        .enumerate()
        .map(|(i, set)| match flags.fresh_paths_per_task {
            Some(n) => Ok(simulate(&set.model, &cfg.grid, n, cfg.s0, cfg.eval_seed(i))?.with_task_id(i)),
            None => Ok(set.split(cfg.train.eval_fraction)?.1.unwrap_or_else(|| set.clone())),
        })
        .collect::<Result<_, CliError>>()?;
    let adjust = |r: HedgeResult| if flags.include_premium { with_premium(r) } else { r };
    let network: Vec<HedgeResult> = evals
        .iter()
        .enumerate()
        .map(|(i, e)| Ok(adjust(network_hedge(&params, &cfg.claim, e, i)?)))
        .collect::<Result<_, CliError>>()?;
    let vols: Vec<f64> = evals.iter().map(realized_vol).collect::<Result<_, _>>()?;
    let benchmark = |shift: f64| -> Result<Vec<HedgeResult>, CliError> {
        evals.iter().zip(&vols).map(|(e, &v)| Ok(adjust(bs_hedge_pnl(e, &cfg.claim, v, shift)?))).collect()
    };
    let mut written = Vec::new();

    if flags.pnl_stats {
        let s = pnl_stats(&network)?;
        let path = layout.output("pnl_stats.csv");
        write_csv(
            &path,
            &["simulations_per_task", "mean", "std", "std_min", "std_max", "q01", "q10"],
            &[vec![
                s.simulations_per_task.to_string(),
                num(s.mean),
                num(s.std),
                num(s.std_min),
                num(s.std_max),
                num(s.quantile_1pct),
                num(s.quantile_10pct),
            ]],
        )?;
        written.push(path);
        let per_task: Vec<Vec<String>> = s
            .per_task
            .iter()
            .map(|t| vec![t.task_id.to_string(), t.n.to_string(), num(t.mean), num(t.std), num(t.variance)])
            .collect();
        let path = layout.output("pnl_task_stats.csv");
        write_csv(&path, &["task_id", "n", "mean", "std", "variance"], &per_task)?;
        written.push(path);
    }

    if flags.variance_aggregate {
        let mut table = Vec::new();
        let mut push = |strategy: &str, shift: Option<f64>, rs: &[HedgeResult]| -> Result<(), CliError> {
            let v = variance_aggregate(rs)?;
            table.push(vec![
                strategy.to_string(),
                shift.map(num).unwrap_or_default(),
                num(v.mean_variance),
                num(v.median_variance),
                num(v.max_variance),
            ]);
            Ok(())
        };
        push("deep_hedging", None, &network)?;
        if flags.baseline {
            for shift in VOL_SHIFTS {
                push("bs_realized_vol", Some(shift), &benchmark(shift)?)?;
            }
        }
        let path = layout.output("variance_aggregate.csv");
        write_csv(&path, &["strategy", "vol_shift", "mean_variance", "median_variance", "max_variance"], &table)?;
        written.push(path);
    }

    if flags.histograms {
        let range = match flags.histogram_range {
            Some([lo, hi]) => (lo, hi),
            None => {
                let pooled = network.iter().flat_map(|r| r.pnl.iter().copied());
                let (lo, hi) = pooled.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
                if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) }
            }
        };
        let mut sources = vec![("network", network.clone())];
        if flags.baseline {
            sources.push(("bs_realized_vol", benchmark(0.0)?));
        }
        let mut table = Vec::new();
        for (strategy, results) in &sources {
            for r in results {
                let h = histogram(&r.pnl, flags.histogram_bins, range)?;
                for (b, count) in h.counts.iter().enumerate() {
                    table.push(vec![
                        strategy.to_string(),
                        r.task_id.to_string(),
                        b.to_string(),
                        num(h.edges[b]),
                        num(h.edges[b + 1]),
                        count.to_string(),
                    ]);
                }
            }
        }
        let path = layout.output("histograms.csv");
        write_csv(&path, &["strategy", "task_id", "bin", "lower", "upper", "count"], &table)?;
        written.push(path);
    }

    if flags.delta_slices {
        let tau = flags.delta_tau_days / 365.0;
        let [lo, hi] = flags.delta_spot_range;
        let spots: Vec<f64> =
            (0..flags.delta_points).map(|i| lo + (hi - lo) * i as f64 / (flags.delta_points - 1) as f64).collect();
        let mut table = Vec::new();
        for (i, set) in sets.iter().enumerate() {
            let vol = benchmark_vol(&set.model, &evals[i])?;
            for d in delta_slice(&params, i, cfg.claim.strike, tau, vol, &spots)? {
                table.push(vec![i.to_string(), num(tau), num(d.spot), num(d.network), num(d.black_scholes)]);
            }
        }
        let path = layout.output("delta_slices.csv");
        write_csv(&path, &["task_id", "tau", "spot", "network_delta", "bs_delta"], &table)?;
        written.push(path);
    }

    let mc_prices: Vec<f64> = sets.iter().map(|s| mc_premium(&cfg.claim, s)).collect();

    if flags.embeddings {
        let models: Vec<ModelSpec> = rows.iter().map(|r| r.model).collect();
        let atm: Vec<f64> = models
            .iter()
            .zip(&mc_prices)
            .map(|(m, &mc)| match m {
                ModelSpec::Gbm(p) => bs_price(cfg.s0, cfg.claim.strike, p.sigma, cfg.grid.maturity()),
                _ => mc,
            })
            .collect();
        let export = export_embeddings(&params, &models, &atm)?;
        let mut header = vec!["task_id".to_string(), "model_kind".into(), "model".into()];
        header.extend((0..params.arch().embed_dim).map(|j| format!("embed_{j}")));
        header.push("atm_price".into());
        let table: Vec<Vec<String>> = export
            .iter()
            .map(|e| {
                let mut row = vec![e.task_id.to_string(), e.model.kind().as_str().into(), model_json(&e.model)];
                row.extend(e.embedding.iter().map(|&x| num(x)));
                row.push(num(e.atm_price));
                row
            })
            .collect();
        let path = layout.output("embeddings.csv");
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&path, &header, &table)?;
        written.push(path);
    }

    if flags.implied_vols {
        let table: Vec<Vec<String>> = rows
            .iter()
            .zip(&mc_prices)
            .map(|(r, &price)| {
                let iv = implied_vol(price, cfg.s0, cfg.claim.strike, cfg.grid.maturity()).map(num).unwrap_or_default();
                vec![r.task_id.to_string(), r.model.kind().as_str().into(), num(price), iv]
            })
            .collect();
        let path = layout.output("implied_vols.csv");
        write_csv(&path, &["task_id", "model_kind", "atm_price", "implied_vol"], &table)?;
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ManifestRow>, CliError> {
    let _lock = OutputLock::acquire(out)?;
    simulate_in(cfg, &Layout::new(out))
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<TrainLog, CliError> {
    let _lock = OutputLock::acquire(out)?;
    train_in(cfg, &Layout::new(out), resume)
}

pub fn cmd_recalibrate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RecalRow>, CliError> {
    let _lock = OutputLock::acquire(out)?;
    recalibrate_in(cfg, &Layout::new(out))
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let _lock = OutputLock::acquire(out)?;
    evaluate_in(cfg, &Layout::new(out))
}

/// Full pipeline: simulate, train, recalibrate when configured, evaluate.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let _lock = OutputLock::acquire(out)?;
    let layout = Layout::new(out);
    simulate_in(cfg, &layout)?;
    train_in(cfg, &layout, false)?;
    if cfg.recalibration.is_some() {
        recalibrate_in(cfg, &layout)?;
    }
    evaluate_in(cfg, &layout)
}

/// Convenience for callers holding a loaded checkpoint.
pub fn load_params(out: &Path) -> Result<NetworkParams, CliError> {
    storage::load_checkpoint(&Layout::new(out).checkpoint())
}
