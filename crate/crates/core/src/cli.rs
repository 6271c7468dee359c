//! Command-line surface: dataset generation, training in three modes,
//! ablation sweeps, and report emission. Every command is deterministic
//! given its config and seeds; run manifests record enough to replay a
//! run bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{save_checkpoint, DetectorConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::report::{collect_rows, write_csv, write_json, write_svg, MetricsRow, METRICS_HEADER};
use crate::synthdata::{generate, load_dataset, save_dataset, split, SceneSpec};
use crate::trainer::{evaluate_model, TrainConfig, TrainMode, Trainer};

pub const ENV_PREFIX: &str = "SSDLAB_";

/// Everything a run needs: mode, data locations, split, and the training
/// and detector configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    pub out_dir: PathBuf,
    pub labeled_fraction: f64,
    pub fold: usize,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: TrainMode::SparseSsod,
            train_data: PathBuf::from("data/train"),
            test_data: PathBuf::from("data/test"),
            out_dir: PathBuf::from("runs/run0"),
            labeled_fraction: 0.10,
            fold: 0,
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fold > 4 {
            return Err(Error::Config(format!(
                "fold {} outside the five standard folds 0..=4",
                self.fold
            )));
        }
        if !(0.0 < self.labeled_fraction && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction {} outside (0, 1]",
                self.labeled_fraction
            )));
        }
        self.train.validate()?;
        self.detector.validate()?;
        Ok(())
    }
}

/// Load a run config from JSON, then apply `SSDLAB_<KEY>` environment
/// overrides (double underscore descends into nested objects, e.g.
/// `SSDLAB_TRAIN__SEED=7`). Values parse as JSON with a string fallback.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
    apply_env_overrides(&mut value, std::env::vars());
    serde_json::from_value(value).map_err(|e| Error::Config(format!("bad config: {e}")))
}

pub fn apply_env_overrides(
    value: &mut serde_json::Value,
    vars: impl Iterator<Item = (String, String)>,
) {
    for (key, raw) in vars {
        let Some(stripped) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let path: Vec<String> = stripped
            .split("__")
            .map(|p| p.to_ascii_lowercase())
            .collect();
        let parsed = serde_json::from_str::<serde_json::Value>(&raw)
            .unwrap_or(serde_json::Value::String(raw));
        let mut node = &mut *value;
        for (i, part) in path.iter().enumerate() {
            let obj = match node.as_object_mut() {
                Some(o) => o,
                None => break,
            };
            if i + 1 == path.len() {
                obj.insert(part.clone(), parsed);
                break;
            }
            node = obj
                .entry(part.clone())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
    }
}

/// Reproducibility record written next to the metrics CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub train_dataset_hash: String,
    pub test_dataset_hash: String,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub final_report: EvalReport,
}

/// Result of one full training run.
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub final_report: EvalReport,
    pub rows: Vec<MetricsRow>,
}

/// Execute a full training run: split, train with periodic evaluation of
/// the EMA teacher, and write metrics.csv, manifest.json, eval_report.json
/// and the final checkpoint into the run directory.
pub fn run_training(cfg: &RunConfig, quiet: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let train_ds = load_dataset(&cfg.train_data)?;
    let test_ds = load_dataset(&cfg.test_data)?;
    let sp = split(
        train_ds.samples.len(),
        cfg.labeled_fraction,
        cfg.fold,
        cfg.train.seed,
    )?;
    fs::create_dir_all(&cfg.out_dir)?;

    let run_name = run_label(cfg);
    let mut trainer = Trainer::new(
        cfg.mode,
        cfg.train.clone(),
        cfg.detector.clone(),
        &train_ds,
        &sp,
    )?;

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut window = LossWindow::default();
    let total = trainer.cfg.total_iterations;
    let interval = trainer.cfg.eval_interval.max(1);
    for i in 0..total {
        let m = trainer.train_step()?;
        window.push(&m);
        if (i + 1) % interval == 0 || i + 1 == total {
            let report = evaluate_model(&trainer.state.teacher, &test_ds.samples, &test_ds)?;
            let row = MetricsRow {
                run: run_name.clone(),
                iteration: i + 1,
                map: report.map,
                ap50: report.ap50,
                ap75: report.ap75,
                ap_small: report.ap_small,
                ap_medium: report.ap_medium,
                ap_large: report.ap_large,
                duplicate_rate: report.duplicate_rate,
                n_predictions: report.n_predictions,
                loss_total: window.mean_total(),
                loss_supervised: window.mean_sup(),
                loss_unsupervised: window.mean_unsup(),
                loss_consistency: window.mean_cons(),
                pseudo_confident_per_image: window.mean_confident(),
                pseudo_reliable_per_image: window.mean_reliable(),
            };
            if !quiet {
                println!(
                    "[{}] iter {:>6}  mAP {}  dup {:.4}",
                    run_name,
                    i + 1,
                    row.map.map_or("  -  ".into(), |v| format!("{v:.4}")),
                    row.duplicate_rate
                );
            }
            rows.push(row);
            window = LossWindow::default();
        }
    }

    // Run artifacts.
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv_line());
        csv.push('\n');
    }
    fs::write(cfg.out_dir.join("metrics.csv"), csv)?;

    let final_report = evaluate_model(&trainer.state.teacher, &test_ds.samples, &test_ds)?;
    fs::write(
        cfg.out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&final_report)?,
    )?;

    let manifest = RunManifest {
        config: cfg.clone(),
        train_dataset_hash: train_ds.header_hash(),
        test_dataset_hash: test_ds.header_hash(),
        n_labeled: sp.labeled.len(),
        n_unlabeled: sp.unlabeled.len(),
        final_report: final_report.clone(),
    };
    fs::write(
        cfg.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let mut merged = crate::params::ParamSet::new();
    for (name, t) in trainer.state.student.params.iter() {
        merged.insert(&format!("student.{name}"), t.clone());
    }
    for (name, t) in trainer.state.teacher.params.iter() {
        merged.insert(&format!("teacher.{name}"), t.clone());
    }
    save_checkpoint(
        &cfg.out_dir.join("checkpoint.ckpt"),
        &merged,
        &cfg.detector.hash(),
    )?;

    Ok(RunOutcome {
        run_dir: cfg.out_dir.clone(),
        final_report,
        rows,
    })
}

fn run_label(cfg: &RunConfig) -> String {
    format!(
        "{}_f{}_s{}",
        cfg.mode.as_str(),
        cfg.fold,
        cfg.train.seed
    )
}

#[derive(Default)]
struct LossWindow {
    n: usize,
    total: f64,
    sup: f64,
    unsup: f64,
    cons: f64,
    confident: f64,
    reliable: f64,
    images: f64,
}

impl LossWindow {
    fn push(&mut self, m: &crate::trainer::StepMetrics) {
        self.n += 1;
        self.total += m.total_loss;
        self.sup += m.supervised_loss;
        self.unsup += m.unsupervised_loss;
        self.cons += m.consistency_loss;
        self.confident += m.n_pseudo_confident as f64;
        self.reliable += m.n_pseudo_reliable as f64;
        self.images += m.unlabeled_ids.len() as f64;
    }
    fn mean_total(&self) -> f64 {
        self.total / self.n.max(1) as f64
    }
    fn mean_sup(&self) -> f64 {
        self.sup / self.n.max(1) as f64
    }
    fn mean_unsup(&self) -> f64 {
        self.unsup / self.n.max(1) as f64
    }
    fn mean_cons(&self) -> f64 {
        self.cons / self.n.max(1) as f64
    }
    fn mean_confident(&self) -> f64 {
        self.confident / self.images.max(1.0)
    }
    fn mean_reliable(&self) -> f64 {
        self.reliable / self.images.max(1.0)
    }
}

// ---- command-line interface -------------------------------------------------

#[derive(Parser)]
#[command(
    name = "ssdlab",
    about = "Desk-scale semi-supervised detection lab",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset (train + test splits).
    GenData {
        /// Scene spec JSON; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training images; the test set gets a quarter of this.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's mode.
        #[arg(long)]
        mode: Option<String>,
        /// Override the config's fold (0..=4).
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Sweep one parameter over values × seeds, in parallel.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of: m, k, sigma, toggles, similarity, attention_placement.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Merge run metrics into a table (csv/json) or plot (svg).
    Report {
        /// Run directories or previously merged CSVs.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn cmd_gen_data(
    spec_path: Option<&Path>,
    out: &Path,
    n: usize,
    seed: Option<u64>,
) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be >= 1".into()));
    }
    let mut spec = match spec_path {
        Some(p) => serde_json::from_str::<SceneSpec>(&fs::read_to_string(p).map_err(|e| {
            Error::Config(format!("cannot read spec {}: {e}", p.display()))
        })?)
        .map_err(|e| Error::Config(format!("bad scene spec: {e}")))?,
        None => SceneSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let train = generate(&spec, n)?;
    let test_spec = SceneSpec {
        seed: spec.seed.wrapping_add(1),
        ..spec.clone()
    };
    let test = generate(&test_spec, (n / 4).max(1))?;
    save_dataset(&out.join("train"), &train)?;
    save_dataset(&out.join("test"), &test)?;
    println!("{}", serde_json::to_string_pretty(&train.header)?);
    Ok(())
}

pub fn cmd_train(config: &Path, mode: Option<&str>, fold: Option<usize>) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(m) = mode {
        cfg.mode = m.parse()?;
    }
    if let Some(f) = fold {
        cfg.fold = f;
    }
    let outcome = run_training(&cfg, false)?;
    println!(
        "run complete: {} (final mAP {})",
        outcome.run_dir.display(),
        outcome
            .final_report
            .map
            .map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

/// Ablation axes over the filtering and refinement modules.
fn apply_ablation_value(cfg: &mut RunConfig, param: &str, value: &str) -> Result<()> {
    match param {
        "m" => {
            let m: usize = value
                .parse()
                .map_err(|e| Error::Config(format!("bad m {value}: {e}")))?;
            cfg.train.filter.m = m;
            cfg.train.filter.k = cfg.train.filter.k.min(m);
        }
        "k" => {
            let k: usize = value
                .parse()
                .map_err(|e| Error::Config(format!("bad k {value}: {e}")))?;
            cfg.train.filter.k = k;
            cfg.train.filter.m = cfg.train.filter.m.max(k);
        }
        "sigma" => {
            cfg.train.filter.sigma = value
                .parse()
                .map_err(|e| Error::Config(format!("bad sigma {value}: {e}")))?;
        }
        "toggles" => {
            let (qr, pf) = match value {
                "none" => (false, false),
                "refinement" => (true, false),
                "filtering" => (false, true),
                "both" => (true, true),
                other => {
                    return Err(Error::Config(format!(
                        "unknown toggles value {other} (none|refinement|filtering|both)"
                    )))
                }
            };
            cfg.train.enable_query_refinement = qr;
            cfg.train.enable_pseudo_filtering = pf;
        }
        "similarity" => match value {
            "on" => {
                cfg.train.refine.similarity_enabled = true;
                cfg.train.refine.similarity_argmax = false;
            }
            "argmax" => {
                cfg.train.refine.similarity_enabled = true;
                cfg.train.refine.similarity_argmax = true;
            }
            "off" => cfg.train.refine.similarity_enabled = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown similarity value {other} (on|argmax|off)"
                )))
            }
        },
        "attention_placement" => {
            use crate::query_refine::AttentionPlacement as P;
            cfg.train.refine.attention_placement = match value {
                "none" => P::None,
                "both" => P::Both,
                "high" => P::HighRes,
                "low" => P::LowRes,
                other => {
                    return Err(Error::Config(format!(
                        "unknown attention placement {other} (none|both|high|low)"
                    )))
                }
            };
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation parameter {other} (m|k|sigma|toggles|similarity|attention_placement)"
            )))
        }
    }
    Ok(())
}

pub fn cmd_ablate(config: &Path, param: &str, values: &[String], seeds: &[u64]) -> Result<()> {
    let base = load_run_config(config)?;
    if values.is_empty() {
        return Err(Error::Config("--values must not be empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("--seeds must not be empty".into()));
    }
    // Validate every (value, seed) config up front so a bad grid fails
    // before any run starts.
    let mut jobs = Vec::new();
    for value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            apply_ablation_value(&mut cfg, param, value)?;
            cfg.train.seed = seed;
            cfg.out_dir = base
                .out_dir
                .join(format!("ablate_{param}"))
                .join(format!("{value}_s{seed}"));
            cfg.validate()?;
            jobs.push((value.clone(), seed, cfg));
        }
    }

    let outcomes: Vec<Result<(String, u64, RunOutcome)>> = jobs
        .par_iter()
        .map(|(value, seed, cfg)| {
            let outcome = run_training(cfg, true)?;
            Ok((value.clone(), *seed, outcome))
        })
        .collect();

    let mut merged_rows: Vec<MetricsRow> = Vec::new();
    let mut finals: Vec<(String, u64, EvalReport)> = Vec::new();
    for o in outcomes {
        let (value, seed, outcome) = o?;
        merged_rows.extend(outcome.rows);
        finals.push((value, seed, outcome.final_report));
    }
    let sweep_dir = base.out_dir.join(format!("ablate_{param}"));
    fs::create_dir_all(&sweep_dir)?;
    write_csv(&sweep_dir.join("runs.csv"), &merged_rows)?;

    // Table-shaped summary: one row per value, mean ± std over seeds.
    let mut summary = String::from("param,value,n_seeds,map_mean,map_std,ap50_mean,ap75_mean,duplicate_rate_mean\n");
    for value in values {
        let group: Vec<&EvalReport> = finals
            .iter()
            .filter(|(v, _, _)| v == value)
            .map(|(_, _, r)| r)
            .collect();
        let maps: Vec<f64> = group.iter().filter_map(|r| r.map).collect();
        let ap50s: Vec<f64> = group.iter().filter_map(|r| r.ap50).collect();
        let ap75s: Vec<f64> = group.iter().filter_map(|r| r.ap75).collect();
        let dups: Vec<f64> = group.iter().map(|r| r.duplicate_rate).collect();
        summary.push_str(&format!(
            "{param},{value},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            group.len(),
            mean(&maps),
            std_dev(&maps),
            mean(&ap50s),
            mean(&ap75s),
            mean(&dups),
        ));
    }
    fs::write(sweep_dir.join("summary.csv"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let rows = collect_rows(runs)?;
    match out.extension().and_then(|e| e.to_str()) {
        Some("csv") => write_csv(out, &rows)?,
        Some("json") => write_json(out, &rows)?,
        Some("svg") => write_svg(out, &rows)?,
        other => {
            return Err(Error::Config(format!(
                "unsupported report format {other:?} (csv|json|svg)"
            )))
        }
    }
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

/// Dispatch a parsed command; the binary maps errors to exit codes.
pub fn run_command(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, n, seed } => {
            cmd_gen_data(spec.as_deref(), &out, n, seed)
        }
        Command::Train { config, mode, fold } => {
            cmd_train(&config, mode.as_deref(), fold)
        }
        Command::Ablate {
            config,
            param,
            values,
            seeds,
        } => cmd_ablate(&config, &param, &values, &seeds),
        Command::Report { runs, out } => cmd_report(&runs, &out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_nested_keys() {
        let mut v = serde_json::json!({
            "mode": "sparse_ssod",
            "train": {"seed": 0, "total_iterations": 100}
        });
        let vars = vec![
            ("SSDLAB_TRAIN__SEED".to_string(), "7".to_string()),
            ("SSDLAB_MODE".to_string(), "\"supervised\"".to_string()),
            ("OTHER_VAR".to_string(), "ignored".to_string()),
        ];
        apply_env_overrides(&mut v, vars.into_iter());
        assert_eq!(v["train"]["seed"], 7);
        assert_eq!(v["mode"], "supervised");
        assert_eq!(v["train"]["total_iterations"], 100);
    }

    #[test]
    fn run_config_rejects_unknown_keys_and_bad_fold() {
        let bad: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"modee": "supervised"}"#);
        assert!(bad.is_err());
        let mut cfg = RunConfig::default();
        cfg.fold = 5;
        assert!(cfg.validate().is_err());
        cfg.fold = 4;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn ablation_value_application() {
        let mut cfg = RunConfig::default();
        apply_ablation_value(&mut cfg, "m", "2").unwrap();
        assert_eq!(cfg.train.filter.m, 2);
        assert_eq!(cfg.train.filter.k, 2); // clamped to m

        let mut cfg = RunConfig::default();
        apply_ablation_value(&mut cfg, "k", "8").unwrap();
        assert_eq!(cfg.train.filter.k, 8);
        assert_eq!(cfg.train.filter.m, 8); // raised to k

        let mut cfg = RunConfig::default();
        apply_ablation_value(&mut cfg, "sigma", "0.3").unwrap();
        assert!((cfg.train.filter.sigma - 0.3).abs() < 1e-12);

        let mut cfg = RunConfig::default();
        apply_ablation_value(&mut cfg, "toggles", "none").unwrap();
        assert!(!cfg.train.enable_query_refinement && !cfg.train.enable_pseudo_filtering);

        let mut cfg = RunConfig::default();
        apply_ablation_value(&mut cfg, "attention_placement", "high").unwrap();
        assert!(apply_ablation_value(&mut cfg, "attention_placement", "sideways").is_err());
        assert!(apply_ablation_value(&mut cfg, "nonsense", "1").is_err());
    }

    #[test]
    fn gen_data_rejects_zero_n() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_gen_data(None, dir.path(), 0, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
