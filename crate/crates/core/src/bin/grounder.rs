use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use grounding::cli::{self, Dataset, EvalTarget, RunConfig};

#[derive(Parser)]
#[command(name = "grounder", about = "Ground noisy records against an entry database")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Flags win over file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; its meaning depends on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Data directory written by gen-data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    index: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark into a data directory.
    GenData,
    /// Train a model; with --checkpoint, continue that run.
    Train {
        #[arg(long)]
        steps: Option<u64>,
        /// Loss TSV (default: next to the checkpoint).
        #[arg(long)]
        log_file: Option<PathBuf>,
    },
    /// Embed every entry and save an index snapshot.
    BuildIndex,
    /// Ground one JSON record ("-" reads stdin).
    Query {
        record: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Score the test split with the rule baseline or a checkpoint.
    Eval {
        #[arg(long)]
        baseline: bool,
    },
    /// Train and score all 24 module combinations.
    Grid {
        /// Comma separated seeds (default: --seed, else the config's list).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Retrain with nested valid-field sets.
    AblateFields {
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data {
        cfg.paths.data_dir = d.clone();
    }
    Ok(cfg)
}

fn seeds_for(explicit: Vec<u64>, common: &Common, cfg: &RunConfig) -> Vec<u64> {
    if !explicit.is_empty() {
        explicit
    } else if let Some(s) = common.seed {
        vec![s]
    } else {
        cfg.grid_seeds.clone()
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = &cli.common;
    let mut cfg = load_config(common)?;
    let data_dir = cfg.paths.data_dir.clone();
    let checkpoint = common.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let index = common.index.clone();

    match cli.command {
        Command::GenData => {
            let out = common.out.clone().unwrap_or(data_dir);
            print_json(&cli::cmd_gen_data(&cfg, &out)?)?;
        }
        Command::Train { steps, log_file } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let data = Dataset::load(&data_dir, &cfg)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let resume = common.checkpoint.as_deref();
            let log_path = log_file.unwrap_or_else(|| with_suffix(&out, ".loss.tsv"));
            if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mut log = OpenOptions::new()
                .create(true)
                .write(true)
                .append(resume.is_some())
                .truncate(resume.is_none())
                .open(&log_path)
                .with_context(|| format!("opening {}", log_path.display()))?;
            let summary = cli::cmd_train(&cfg, &data, &out, resume, Some(&mut log))?;
            log.flush()?;
            print_json(&summary)?;
        }
        Command::BuildIndex => {
            let data = Dataset::load(&data_dir, &cfg)?;
            let out = common.out.clone().or(index).unwrap_or_else(|| cfg.paths.index.clone());
            let snap = cli::cmd_build_index(&checkpoint, &data, &out)?;
            eprintln!("indexed {} entries into {}", snap.len(), out.display());
        }
        Command::Query { record, k } => {
            let text = if record == "-" {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s)?;
                s
            } else {
                record
            };
            let index = index.unwrap_or_else(|| cfg.paths.index.clone());
            print_json(&cli::cmd_query(&checkpoint, &index, &text, k)?)?;
        }
        Command::Eval { baseline } => {
            let data = Dataset::load(&data_dir, &cfg)?;
            let target = if baseline {
                EvalTarget::Baseline
            } else {
                EvalTarget::Checkpoint {
                    path: &checkpoint,
                    index: index.as_deref(),
                }
            };
            let report = cli::cmd_eval(&cfg, &data, target)?;
            if let Some(out) = &common.out {
                cli::write_atomic(out, &serde_json::to_vec_pretty(&report)?)?;
            }
            print_json(&report)?;
        }
        Command::Grid { seeds, parallel } => {
            if parallel == 0 {
                bail!("--parallel must be at least 1");
            }
            let seeds = seeds_for(seeds, common, &cfg);
            let out = common.out.clone().unwrap_or_else(|| cfg.paths.reports.clone());
            let report = cli::cmd_grid(&cfg, &seeds, parallel, &out)?;
            std::io::stdout().write_all(report.to_tsv().as_bytes())?;
        }
        Command::AblateFields { seeds } => {
            let seeds = seeds_for(seeds, common, &cfg);
            let out = common.out.clone().unwrap_or_else(|| cfg.paths.reports.clone());
            let report = cli::cmd_ablate_fields(&cfg, &seeds, &out)?;
            std::io::stdout().write_all(report.to_tsv().as_bytes())?;
        }
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
