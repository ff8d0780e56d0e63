//! Command-line front end: dataset generation, training, evaluation, sweeps and plots.
//!
//! Logs go to standard error (`RUST_LOG` controls the level, default `info`).
//! Every machine-readable output is written to a file under `--out`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use csifb::channel::{reciprocity_report, Dataset, Summary};
use csifb::experiments::{
    ablation_on, evaluate_sweep, load_checkpoint, load_splits, read_results_csv, save_checkpoint, sort_rows, train,
    with_seed, write_log_csv, write_results_csv, write_svg, ExperimentConfig, ResultRow,
};
use csifb::networks::Variant;
use csifb::{CsiError, Result};

#[derive(Parser)]
#[command(name = "csifb", version, about = "FDD CSI feedback with uplink-assisted deep joint source-channel coding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, replacing the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dot-path config override such as `train.epochs=5`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a channel dataset file (`dataset.fdds`) from the channel config.
    GenerateData(Common),
    /// Pearson reciprocity statistics of a dataset (`reciprocity.csv`).
    AnalyzeReciprocity {
        #[command(flatten)]
        common: Common,
        /// Number of samples to analyze; defaults to the whole dataset.
        #[arg(long)]
        n_eval: Option<usize>,
    },
    /// Train one model (`model.ckpt`, `train_log.csv`, `config.toml`).
    Train(Common),
    /// Evaluate a checkpoint over the SNR grid (`results.csv`, `timing.csv`).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate several variants and seeds on one dataset (`results.csv`).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant names; all variants when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Comma-separated seeds; the master seed when omitted.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Render NMSE-vs-SNR line plots from a results CSV, one SVG per (K, L, CE mode).
    ExportPlots {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p, &c.overrides)?,
        None => {
            let text = ExperimentConfig::default().to_toml_string()?;
            ExperimentConfig::from_toml_str(&text, &c.overrides)?
        }
    };
    if let Some(seed) = c.seed {
        cfg = with_seed(&cfg, seed);
    }
    std::fs::create_dir_all(&c.out)?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateData(c) => {
            let mut cfg = load_config(&c)?;
            if let Some(seed) = c.seed {
                cfg.channel.seed = seed;
            }
            let ds = Dataset::generate(&cfg.channel, cfg.n_total())?;
            let path = c.out.join("dataset.fdds");
            ds.write(&mut BufWriter::new(File::create(&path)?))?;
            log::info!("wrote {} samples to {} (sha256 {})", ds.len(), path.display(), ds.content_hash()?);
        }
        Command::AnalyzeReciprocity { common, n_eval } => {
            let cfg = load_config(&common)?;
            let ds = match &cfg.dataset_path {
                Some(p) => Dataset::read(&mut BufReader::new(File::open(p)?))?,
                None => Dataset::generate(&cfg.channel, cfg.n_total())?,
            };
            let report = reciprocity_report(&ds.samples, n_eval.unwrap_or(ds.len()))?;
            let path = common.out.join("reciprocity.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["statistic", "count", "mean", "min", "q1", "median", "q3", "max"])?;
            for (name, s) in [("r_hg", &report.r_hg), ("r_hh", &report.r_hh), ("r_gg", &report.r_gg)] {
                w.write_record(summary_record(name, s))?;
            }
            w.flush()?;
            log::info!(
                "mean r_gg {:.3}, r_hh {:.3}, r_hg {:.3} ({} skipped)",
                report.r_gg.mean,
                report.r_hh.mean,
                report.r_hg.mean,
                report.skipped
            );
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let splits = load_splits(&cfg)?;
            let trained = train(&cfg, &splits)?;
            save_checkpoint(&c.out.join("model.ckpt"), &trained)?;
            write_log_csv(&trained.log, &c.out.join("train_log.csv"))?;
            std::fs::write(c.out.join("config.toml"), cfg.to_toml_string()?)?;
            log::info!("wrote checkpoint and log to {}", c.out.display());
        }
        Command::Evaluate { common, checkpoint } => {
            let mut trained = load_checkpoint(&checkpoint)?;
            if common.config.is_some() || !common.overrides.is_empty() || common.seed.is_some() {
                let cfg = load_config(&common)?;
                if cfg.model != trained.config.model || cfg.channel != trained.config.channel {
                    return Err(CsiError::CheckpointMismatch(
                        "model or channel settings differ from the checkpoint".into(),
                    ));
                }
                trained.config = cfg;
            } else {
                std::fs::create_dir_all(&common.out)?;
            }
            let splits = load_splits(&trained.config)?;
            if splits.dataset_hash != trained.dataset_hash {
                log::warn!("evaluating on a different dataset than the model was trained on");
            }
            let started = Instant::now();
            let rows = evaluate_sweep(&trained, &splits.test)?;
            write_results_csv(&rows, &common.out.join("results.csv"))?;
            write_timing(&common.out.join("timing.csv"), &trained.config, started.elapsed().as_secs_f64())?;
            log::info!("wrote {} rows to {}", rows.len(), common.out.display());
        }
        Command::Sweep { common, variants, seeds } => {
            let cfg = load_config(&common)?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| parse_variant(v)).collect::<Result<_>>()?
            };
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let splits = load_splits(&cfg)?;
            let started = Instant::now();
            let rows = ablation_on(&cfg, &splits, &variants, &seeds)?;
            write_results_csv(&rows, &common.out.join("results.csv"))?;
            write_timing(&common.out.join("timing.csv"), &cfg, started.elapsed().as_secs_f64())?;
            log::info!("wrote {} rows to {}", rows.len(), common.out.display());
        }
        Command::ExportPlots { input, out } => {
            let mut rows = read_results_csv(&input)?;
            if rows.is_empty() {
                return Err(CsiError::Config(format!("{} has no rows", input.display())));
            }
            sort_rows(&mut rows);
            std::fs::create_dir_all(&out)?;
            let mut groups: BTreeMap<String, Vec<ResultRow>> = BTreeMap::new();
            for r in rows {
                groups.entry(format!("K{}_L{}_{}", r.k, r.l, r.ce_mode)).or_default().push(r);
            }
            for (name, rows) in &groups {
                let path = out.join(format!("nmse_{name}.svg"));
                write_svg(rows, &format!("NMSE vs uplink SNR ({})", name.replace('_', ", ")), &path)?;
                log::info!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn parse_variant(name: &str) -> Result<Variant> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name().eq_ignore_ascii_case(name.trim()))
        .ok_or_else(|| CsiError::Config(format!("unknown variant `{name}`")))
}

fn summary_record(name: &str, s: &Summary) -> Vec<String> {
    let mut rec = vec![name.to_string(), s.count.to_string()];
    rec.extend([s.mean, s.min, s.q1, s.median, s.q3, s.max].iter().map(|v| format!("{v:.6}")));
    rec
}

/// Wall time lives beside the results so that `results.csv` stays bit-reproducible.
fn write_timing(path: &Path, cfg: &ExperimentConfig, seconds: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["config_hash", "seed", "wall_seconds"])?;
    w.write_record([cfg.hash(), cfg.seed.to_string(), format!("{seconds:.3}")])?;
    w.flush()?;
    Ok(())
}
