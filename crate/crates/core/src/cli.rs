//! Command-line front end: dataset generation, experiment runs and the
//! cross-run comparison table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, Strategy};
use crate::error::{Error, Result};
use crate::synthdata::{self, SynthSample};
use crate::trainer::{self, History, MetricsRow};

#[derive(Debug, Parser)]
#[command(name = "egad", version, about = "Active learning with semi-supervised co-training on synthetic ultrasound")]
pub struct Cli {
    /// Worker threads for scoring and evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (manifest.json plus 8-bit PGM images and masks).
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Run one experiment and write its run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `al.strategy`.
        #[arg(long, value_enum)]
        strategy: Option<Strategy>,
        /// Overrides `seeds.run`.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `runs/<strategy>_seed<run seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect finished runs into one CSV row each.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidSplit(_) | Error::InvalidBudget { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Parse(_) => EXIT_IO,
        _ => EXIT_INVARIANT,
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // only fails if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match cli.command {
        Command::GenData { n, out, seed } => gen_data(n, &out, seed),
        Command::Run {
            config,
            strategy,
            seed,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = strategy {
                cfg.al.strategy = s;
            }
            if let Some(s) = seed {
                cfg.seeds.run = s;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}_seed{}", cfg.al.strategy, cfg.seeds.run)));
            let report = run(&cfg, &out)?;
            println!(
                "{} seed {}: test DSC {:.2} HD {:.2} with {:.1}% labeled -> {}",
                cfg.al.strategy,
                cfg.seeds.run,
                report.final_dsc,
                report.final_hd,
                report.labeled_pct,
                out.display()
            );
            Ok(())
        }
        Command::Report { runs, out } => {
            let rows = report(&runs, &out)?;
            for m in aggregate(&rows) {
                println!(
                    "{:<10} runs {}  labeled {:.1}%  DSC {:.2}  HD {:.2}",
                    m.strategy, m.runs, m.labeled_pct, m.final_dsc, m.final_hd
                );
            }
            Ok(())
        }
    }
}

pub fn gen_data(n: usize, out: &Path, seed: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be >= 1".into()));
    }
    synthdata::save_dataset(out, &synthdata::generate(n, seed), seed)
}

/// Corpus for a run: loaded from `data.dataset_dir` when set, otherwise
/// generated in memory from `seeds.dataset`.
pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<SynthSample>> {
    let need = cfg.data.n_train + cfg.data.n_val + cfg.data.n_test;
    match &cfg.data.dataset_dir {
        Some(dir) => {
            let (_, samples) = synthdata::load_dataset(dir)?;
            if samples.len() < need {
                return Err(Error::Config(format!(
                    "{} holds {} samples, the split needs {need}",
                    dir.display(),
                    samples.len()
                )));
            }
            Ok(samples)
        }
        None => Ok(synthdata::generate(need, cfg.seeds.dataset)),
    }
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<ReportRow> {
    let samples = load_corpus(cfg)?;
    let report = trainer::run_al_experiment(cfg, &samples)?;
    trainer::write_run(out, &report)?;
    Ok(ReportRow {
        strategy: cfg.al.strategy,
        labeled_pct: report.labeled_pct(),
        final_dsc: report.final_test.dsc_mean,
        final_hd: report.final_test.hd_mean,
        seed: cfg.seeds.run,
    })
}

pub const REPORT_HEADER: &str = "strategy,labeled_pct,final_dsc,final_hd,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub strategy: Strategy,
    pub labeled_pct: f64,
    pub final_dsc: f64,
    pub final_hd: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyMean {
    pub strategy: Strategy,
    pub runs: usize,
    pub labeled_pct: f64,
    pub final_dsc: f64,
    pub final_hd: f64,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads the row of one finished run directory.
pub fn read_run(dir: &Path) -> Result<ReportRow> {
    let cfg = RunConfig::load(&dir.join("config.json"))?;
    let history_path = dir.join("history.json");
    let history: History = serde_json::from_str(&read(&history_path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", history_path.display())))?;
    let metrics_path = dir.join("metrics.csv");
    let rows = parse_metrics(&read(&metrics_path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", metrics_path.display())))?;
    let last = rows
        .iter()
        .filter(|r| r.split == "test")
        .max_by_key(|r| r.round)
        .ok_or_else(|| Error::Parse(format!("{}: no test rows", metrics_path.display())))?;
    Ok(ReportRow {
        strategy: cfg.al.strategy,
        labeled_pct: 100.0 * history.final_labeled.len() as f64 / cfg.data.n_train as f64,
        final_dsc: last.dsc_mean,
        final_hd: last.hd_mean,
        seed: cfg.seeds.run,
    })
}

fn field<T: std::str::FromStr>(value: &str, line: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("bad row {line:?}"))
}

fn parse_metrics(text: &str) -> std::result::Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(trainer::METRICS_HEADER) {
        return Err("unexpected header".into());
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(format!("bad row {line:?}"));
            }
            Ok(MetricsRow {
                round: field(f[0], line)?,
                split: f[1].to_string(),
                n: field(f[2], line)?,
                dsc_mean: field(f[3], line)?,
                hd_mean: field(f[4], line)?,
            })
        })
        .collect()
}

/// Writes one row per run, sorted by strategy name then seed.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = runs.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.strategy.to_string(), r.seed));
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.strategy, r.labeled_pct, r.final_dsc, r.final_hd, r.seed));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    Ok(rows)
}

/// Per-strategy means, in the same order as the rows.
pub fn aggregate(rows: &[ReportRow]) -> Vec<StrategyMean> {
    let mut groups: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.strategy.to_string()).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = |f: fn(&ReportRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            StrategyMean {
                strategy: g[0].strategy,
                runs: g.len(),
                labeled_pct: mean(|r| r.labeled_pct),
                final_dsc: mean(|r| r.final_dsc),
                final_hd: mean(|r| r.final_hd),
            }
        })
        .collect()
}
