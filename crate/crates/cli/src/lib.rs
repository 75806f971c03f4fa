//! `tcd-lab`: run, sweep and report class-incremental experiments.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tcd_core::evaluation::{emit_report, Protocol, Report, RunInfo};
use tcd_core::memory::SamplingStrategy;
use tcd_core::trainer::{run_dir_name, run_experiment, ExperimentConfig, Method, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "tcd-lab", version, about = "Class-incremental learning experiments for temporal models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one method for every seed.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run one experiment per (axis value, seed) and write a comparison report.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values; defaults to the axis' standard grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Summarize finished runs into a CSV table and accuracy plots.
    Report {
        /// Run directories, or directories containing run directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's method.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Comma-separated seeds; overrides the config's seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Continue runs already present in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Budget,
    Sampling,
    Ablation,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(m) = self.method {
            config.method = m;
        }
        if !self.seeds.is_empty() {
            config.seeds = self.seeds.clone();
        }
        if config.seeds.is_empty() {
            bail!("no seeds given");
        }
        Ok(config)
    }
}

/// Runs `config` for each of its seeds under `out`, printing one line per
/// stage. Returns the run directories.
pub fn run_all(config: &ExperimentConfig, label: &str, out: &Path, resume: bool) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for &seed in &config.seeds {
        let dir = out.join(run_dir_name(config, label, seed));
        let opts = RunOptions {
            label: Some(label.to_string()),
            resume,
        };
        let outcome = run_experiment(config, seed, &dir, &opts).with_context(|| format!("run {}", dir.display()))?;
        for r in &outcome.records {
            println!(
                "{label} seed {seed} stage {}: classes {} acc_cnn {:.2} acc_nme {:.2}",
                r.step, r.seen_class_count, r.acc_cnn, r.acc_nme
            );
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Expands a sweep axis into `(label, config)` points.
pub fn sweep_points(base: &ExperimentConfig, axis: Axis, values: &[String]) -> Result<Vec<(String, ExperimentConfig)>> {
    let defaults: Vec<String> = match axis {
        Axis::Budget => ["1", "2", "5", "10"].map(String::from).to_vec(),
        Axis::Sampling => SamplingStrategy::NAMES.map(String::from).to_vec(),
        Axis::Ablation => Method::ABLATION.iter().map(|m| m.name().to_string()).collect(),
    };
    let values = if values.is_empty() { &defaults } else { values };
    values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            let label = match axis {
                Axis::Budget => {
                    c.budget_per_class = v
                        .parse()
                        .ok()
                        .filter(|&b: &usize| b > 0)
                        .with_context(|| format!("invalid budget `{v}` (expected a positive integer)"))?;
                    format!("budget={v}")
                }
                Axis::Sampling => {
                    c.sampling_strategy = v.parse()?;
                    format!("sampling={v}")
                }
                Axis::Ablation => {
                    c.method = v.parse()?;
                    v.clone()
                }
            };
            c.validate()?;
            Ok((label, c))
        })
        .collect()
}

/// Run directories below `dir`: itself if it holds a run, else its direct
/// children that do.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(RunInfo::FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RunInfo::FILE).is_file())
        .collect();
    runs.sort();
    Ok(runs)
}

pub fn print_report(report: &Report) {
    println!("{:<20} {:<8} {:>12} {:>14}", "label", "protocol", "avg_inc_acc", "final_step_acc");
    for r in report.rows.iter().filter(|r| r.seed.is_none()) {
        println!(
            "{:<20} {:<8} {:>12.2} {:>14.2}",
            r.label, r.protocol, r.avg_inc_acc, r.final_step_acc
        );
    }
    println!("summary: {}", report.csv.display());
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common } => {
            let config = common.load()?;
            let label = config.method.to_string();
            run_all(&config, &label, &common.out, common.resume)?;
        }
        Command::Sweep { common, axis, values } => {
            let base = common.load()?;
            let mut dirs = Vec::new();
            for (label, config) in sweep_points(&base, axis, &values)? {
                dirs.extend(run_all(&config, &label, &common.out, common.resume)?);
            }
            let report = emit_report(&dirs, &common.out.join("report"))?;
            print_report(&report);
        }
        Command::Report { dirs, out } => {
            let missing: Vec<String> = dirs.iter().filter(|d| !d.is_dir()).map(|d| d.display().to_string()).collect();
            if !missing.is_empty() {
                bail!("missing run directories: {}", missing.join(", "));
            }
            let mut runs = Vec::new();
            for d in &dirs {
                let found = find_runs(d)?;
                if found.is_empty() {
                    bail!("no runs found in {}", d.display());
                }
                runs.extend(found);
            }
            let report = emit_report(&runs, &out)?;
            print_report(&report);
        }
    }
    Ok(())
}

/// Mean average incremental accuracy for `label` under `protocol`.
pub fn mean_accuracy(report: &Report, label: &str, protocol: Protocol) -> Option<f64> {
    report.mean(label, protocol).map(|r| r.avg_inc_acc)
}
