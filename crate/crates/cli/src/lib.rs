//! The `adpm` command line: argument parsing, configuration and the
//! file-based pipeline steps.

pub mod config;
pub mod error;
pub mod pipeline;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use adpm_core::ranking::Task;
use clap::{Parser, Subcommand};

pub use config::{RunConfig, TaskSetup};
pub use error::{CliError, Result};
pub use pipeline::{PretrainKind, RunDir};

use error::config_err;

#[derive(Debug, Parser)]
#[command(
    name = "adpm",
    version,
    about = "Personalized ranking pipeline on synthetic marketplace data"
)]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one key; may be repeated. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run directory; required by every command except gen-data and config.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved configuration.
    Config,
    /// Generate the synthetic world and the train/valid impression logs.
    GenData,
    /// Build per-entity vocabularies from the training split.
    BuildVocab,
    /// Produce a frozen listing table: skipgram, air or visual.
    Pretrain { kind: String },
    /// Train a ranking model.
    Train {
        task: String,
        /// `none`, `full` or a component list such as `1,3`.
        #[arg(long)]
        adpm: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Fit Platt scaling on the validation split after training.
        #[arg(long)]
        calibrate: bool,
    },
    /// Fit Platt scaling for a trained model.
    Calibrate { task: String },
    /// Validation metrics for a trained model.
    Evaluate { task: String },
    /// Train every grid variant at every seed and report lifts.
    Ablate {
        /// Lines of `name key=value ...`; defaults to all component subsets.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Print rows of an embedding table file.
    Dump {
        table: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        rows: usize,
    },
}

fn parse_task(s: &str) -> Result<Task> {
    s.parse::<Task>().map_err(|e| config_err(e.to_string()))
}

/// Defaults, then the config file, then `--set`, then `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Command::Train {
        task,
        adpm,
        epochs,
        calibrate,
    } = &cli.command
    {
        let t = parse_task(task)?;
        if let Some(a) = adpm {
            cfg.set(&format!("{t}.adpm"), a)?;
        }
        if let Some(e) = epochs {
            cfg.set(&format!("{t}.epochs"), &e.to_string())?;
        }
        if *calibrate {
            cfg.set(&format!("{t}.calibrate"), "true")?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn existing_run_dir(cli: &Cli) -> Result<RunDir> {
    match &cli.run_dir {
        Some(p) if p.is_dir() => RunDir::open(p),
        Some(p) => Err(config_err(format!(
            "run directory {} does not exist",
            p.display()
        ))),
        None => Err(config_err("this command needs --run-dir")),
    }
}

/// Runs one command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String> {
    let mut out = String::new();
    match &cli.command {
        Command::Config => out.push_str(&resolve_config(cli)?.to_text()),
        Command::GenData => {
            let cfg = resolve_config(cli)?;
            let dir = match &cli.run_dir {
                Some(p) => RunDir::open(p)?,
                None => RunDir::create(&PathBuf::from(cfg.get_raw("out_dir")?), cfg.seed()?)?,
            };
            let s = pipeline::gen_data(&cfg, &dir)?;
            let _ = writeln!(out, "run_dir\t{}", dir.path().display());
            let _ = writeln!(
                out,
                "train_rows\t{}\ttrain_click_rate\t{:.4}",
                s.train_rows, s.train_click_rate
            );
            let _ = writeln!(
                out,
                "valid_rows\t{}\tvalid_click_rate\t{:.4}",
                s.valid_rows, s.valid_click_rate
            );
        }
        Command::BuildVocab => {
            let cfg = resolve_config(cli)?;
            let v = pipeline::build_vocab(&cfg, &existing_run_dir(cli)?)?;
            for (e, voc) in &v.by_entity {
                let _ = writeln!(
                    out,
                    "{e}\tkept\t{}\trows\t{}",
                    voc.num_kept(),
                    voc.table_rows()
                );
            }
        }
        Command::Pretrain { kind } => {
            let kind: PretrainKind = kind.parse()?;
            let cfg = resolve_config(cli)?;
            let dir = existing_run_dir(cli)?;
            let t = pipeline::pretrain(&cfg, &dir, kind)?;
            let _ = writeln!(
                out,
                "{}\trows\t{}\tdim\t{}\tchecksum\t{:08x}",
                kind.flavor(),
                t.vocab_size(),
                t.dim(),
                t.checksum()
            );
        }
        Command::Train { task, .. } => {
            let task = parse_task(task)?;
            let cfg = resolve_config(cli)?;
            let s = pipeline::train_task(&cfg, &existing_run_dir(cli)?, task)?;
            let _ = writeln!(
                out,
                "steps\t{}\trows_per_epoch\t{}\tfinal_loss\t{:.6}",
                s.steps, s.rows_per_epoch, s.final_loss
            );
            out.push_str(&s.report.to_text());
            if let Some((c, r)) = &s.calibration {
                let _ = writeln!(out, "platt_a\t{}\nplatt_b\t{}", c.a, c.b);
                let _ = writeln!(out, "calibrated_ece\t{:.6}", r.ece);
            }
        }
        Command::Calibrate { task } => {
            let (c, before, after) =
                pipeline::calibrate(&existing_run_dir(cli)?, parse_task(task)?)?;
            let _ = writeln!(out, "platt_a\t{}\nplatt_b\t{}", c.a, c.b);
            let _ = writeln!(
                out,
                "ece_before\t{:.6}\nece_after\t{:.6}",
                before.ece, after.ece
            );
        }
        Command::Evaluate { task } => {
            out.push_str(
                &pipeline::evaluate(&existing_run_dir(cli)?, parse_task(task)?)?.to_text(),
            );
        }
        Command::Ablate { grid } => {
            let cfg = resolve_config(cli)?;
            let grid = match grid {
                Some(p) => pipeline::parse_grid(
                    &fs::read_to_string(p)
                        .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?,
                )?,
                None => pipeline::default_grid(),
            };
            out.push_str(&pipeline::ablate(&cfg, &existing_run_dir(cli)?, &grid)?.table);
        }
        Command::Dump { table, vocab, rows } => {
            out.push_str(&pipeline::dump(table, vocab.as_deref(), *rows)?);
        }
    }
    Ok(out)
}
