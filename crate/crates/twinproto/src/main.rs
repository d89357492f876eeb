use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use twinproto::config::{ExperimentConfig, Profile};
use twinproto::harness::{self, Variant};
use twinproto::{archive, checkpoint, report, Error, OUT_ENV};
use twinproto_core::twinsim::DatasetArchive;

/// Few-shot motor fault diagnosis experiments on a simulated three-phase motor.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
    /// Built-in base configuration: default, full or ci.
    #[arg(long, global = true, default_value = "default")]
    profile: String,
    /// TOML file layered over the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set adapt.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads (shorthand for `--set workers=N`).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset archive per condition to `<out>/data/<rpm>rpm`.
    Generate {
        /// Conditions to generate; defaults to the configured ones.
        #[arg(long = "condition")]
        conditions: Vec<u32>,
    },
    /// Meta-train the network of one variant at one condition.
    Train {
        #[arg(long)]
        condition: u32,
        #[arg(long, default_value = "proposed")]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        /// Read the dataset from this archive instead of generating it.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Adapt and score one variant on the tasks of one scenario.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        condition: u32,
        #[arg(long)]
        shot: usize,
        #[arg(long, default_value = "proposed")]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run every variant on the full scenario matrix.
    Ablate,
    /// Accuracy against the number of dominant periods, with and without adaptation.
    SweepTopk,
    /// Regenerate the tables, confusion grids and summary from a results file.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let profile: Profile = c.profile.parse()?;
    let mut sets = c.sets.clone();
    if let Some(w) = c.workers {
        sets.push(format!("workers={w}"));
    }
    ExperimentConfig::load(profile, c.config.as_deref(), &sets)
}

fn scenario_dataset(cfg: &ExperimentConfig, condition: u32, data: Option<&Path>) -> Result<DatasetArchive, Error> {
    match data {
        Some(dir) => {
            let a = archive::read(dir)?;
            if a.speed_rpm != condition {
                return Err(Error::Config(format!("archive {} holds {} rpm, not {condition}", dir.display(), a.speed_rpm)));
            }
            Ok(a)
        }
        None => harness::dataset(cfg, condition),
    }
}

fn check_condition(cfg: &ExperimentConfig, condition: u32) -> Result<(), Error> {
    let probe = ExperimentConfig { conditions: vec![condition], ..cfg.clone() };
    probe.validate()
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.clone();
    report::write_text(&out.join("config.toml"), &cfg.to_toml())?;
    match cli.command {
        Command::Generate { conditions } => {
            let conditions = if conditions.is_empty() { cfg.conditions.clone() } else { conditions };
            for c in conditions {
                check_condition(&cfg, c)?;
                let dir = out.join("data").join(format!("{c}rpm"));
                archive::write(&dir, &harness::dataset(&cfg, c)?)?;
                info!("wrote {}", dir.display());
            }
        }
        Command::Train { condition, variant, repeat, data } => {
            check_condition(&cfg, condition)?;
            let archive = scenario_dataset(&cfg, condition, data.as_deref())?;
            let model = harness::variant_network(variant, &cfg.model);
            let trained = harness::train_network(&cfg, &archive, &model, repeat)?;
            let name = format!("{condition}rpm_{}_k{}_r{repeat}", model.frontend.name(), model.top_k);
            let path = out.join("checkpoints").join(format!("{name}.ckpt"));
            checkpoint::save(&path, &trained.state)?;
            let trace = harness::LossTrace {
                condition_rpm: condition,
                network: format!("{}_k{}", model.frontend.name(), model.top_k),
                repeat,
                losses: trained.loss_trace,
            };
            report::write_text(&out.join("loss").join(report::loss_file_name(&trace)), &report::loss_csv(&trace))?;
            info!("wrote {}", path.display());
        }
        Command::Evaluate { checkpoint: ckpt, condition, shot, variant, repeat, data } => {
            let probe = ExperimentConfig { conditions: vec![condition], shots: vec![shot], ..cfg.clone() };
            probe.validate()?;
            let model = harness::variant_network(variant, &cfg.model);
            let state = checkpoint::load(&ckpt, Some(&model))?;
            let archive = scenario_dataset(&cfg, condition, data.as_deref())?;
            let records = harness::evaluate(&cfg, &archive, &state, &[variant], shot, repeat);
            // a single repeat, stored at index 0 of the cell
            let relabeled: Vec<_> = records.iter().map(|r| harness::TaskRecord { repeat: 0, ..r.clone() }).collect();
            let refs: Vec<_> = relabeled.iter().collect();
            let cell = harness::aggregate(&refs, variant, condition, shot, 1, cfg.tasks_per_scenario);
            let dir = out.join("evaluate").join(format!("{variant}_{condition}rpm_{shot}s_r{repeat}"));
            report::write_table(&dir, &harness::ResultTable { cells: vec![cell.clone()] })?;
            report::write_records(&dir, &records, &[])?;
            info!("{variant} at {condition} rpm, {shot}-shot: {:.2}% over {} tasks", cell.mean_accuracy, records.len());
            return Ok(exit_for(cell.failed_tasks, cell.total_tasks));
        }
        Command::Ablate => {
            let run = harness::run(&cfg)?;
            report::write_run(&out, &run)?;
            info!("wrote results to {}", out.display());
            let failed = run.table.cells.iter().map(|c| c.failed_tasks).sum();
            let total = run.table.cells.iter().map(|c| c.total_tasks).sum();
            return Ok(exit_for(failed, total));
        }
        Command::SweepTopk => {
            let sweep = harness::sweep_topk(&cfg)?;
            report::write_sweep(&out, &sweep)?;
            info!("wrote {}", out.join("sweep_topk.csv").display());
            let failed = sweep.records.iter().filter(|r| r.outcome.is_err()).count();
            return Ok(exit_for(failed, sweep.records.len()));
        }
        Command::Report { results } => {
            let table = report::read_table(&results)?;
            report::write_table(&out, &table)?;
            info!("wrote report to {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Nonzero when more than a tenth of the tasks failed.
fn exit_for(failed: usize, total: usize) -> ExitCode {
    if failed * 10 > total {
        warn!("{failed} of {total} tasks failed");
        ExitCode::from(2)
    } else {
        if failed > 0 {
            warn!("{failed} of {total} tasks failed");
        }
        ExitCode::SUCCESS
    }
}
