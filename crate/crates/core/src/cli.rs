//! Command-line interface.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 usage error,
//! 3 configuration error, 4 data error, 5 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{load_config, Config};
use crate::data::{build_dataset, load_dataset, save_dataset, SemiDataset};
use crate::error::{Error, ErrorKind, Result};
use crate::report::{emit_report, fmt_sig6, render_eval_text, render_json, render_sweep_csv};
use crate::sweep::run_sweep;
use crate::trainer::{evaluate, load_checkpoint, save_checkpoint, Mode, Trainer};
use crate::uncertainty::write_estimates_csv;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

pub const DEFAULT_OUT_DIR: &str = "udts-out";

#[derive(Debug, Parser)]
#[command(name = "udts", version, about = "Uncertainty-aware dynamic threshold selection for imbalanced semi-supervised learning")]
pub struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = "UDTS_OUT_DIR")]
    pub out_dir: Option<PathBuf>,

    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overrides `train.mode` (udts, fixed_baseline, supervised_only).
    #[arg(long, global = true)]
    pub mode: Option<Mode>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured synthetic dataset and write a container file.
    GenData {
        /// Output file; defaults to `<out-dir>/dataset.udts`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and write logs, checkpoint and summary.
    Train {
        /// Dataset container to train on instead of the `[data]` section.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a run checkpoint written under the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the final epoch's per-sample MC estimates to estimates.csv.
        #[arg(long)]
        dump_estimates: bool,
    },
    /// Evaluate a checkpoint on the test split and print metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Train once per pass count in `sweep.passes` and write sweep_t.csv.
    SweepT {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Re-emit CSV logs and summary from a run checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
        ErrorKind::Io | ErrorKind::Internal => EXIT_IO,
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn effective_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.train.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn dataset(cfg: &Config, data: Option<&Path>) -> Result<SemiDataset> {
    match data {
        Some(path) => load_dataset(path),
        None => build_dataset(&cfg.data),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let out = out_dir(cli);
    match &cli.command {
        Command::GenData { output } => {
            let ds = build_dataset(&cfg.data)?;
            let path = output.clone().unwrap_or_else(|| out.join("dataset.udts"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            save_dataset(&path, &ds)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Train {
            data,
            resume,
            dump_estimates,
        } => train(&cfg, &out, data.as_deref(), resume.as_deref(), *dump_estimates),
        Command::Eval { checkpoint, data, json } => {
            let (_, state) = load_checkpoint(checkpoint, None)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let ev = evaluate(&state.model, ds.test())?;
            let text = if *json {
                render_json(&ev.metrics)?
            } else {
                render_eval_text(ev.metrics.top1, ev.metrics.top5, &ev.metrics.per_class_recall, ev.metrics.macro_recall)
            };
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
        Command::SweepT { data } => {
            let ds = dataset(&cfg, data.as_deref())?;
            let rows = run_sweep(&cfg.train_config(), &ds, &cfg.sweep.passes)?;
            fs::create_dir_all(&out)?;
            let path = out.join("sweep_t.csv");
            fs::write(&path, render_sweep_csv(&rows)?)?;
            for r in &rows {
                println!(
                    "T={} top1={} mc_std_error={}",
                    r.passes,
                    fmt_sig6(r.top1),
                    r.mc_std_error.map_or_else(|| "NA".into(), fmt_sig6)
                );
            }
            Ok(())
        }
        Command::Report { checkpoint } => {
            let (tc, state) = load_checkpoint(checkpoint, None)?;
            emit_report(&out, &tc, &state.records)
        }
    }
}

fn train(cfg: &Config, out: &Path, data: Option<&Path>, resume: Option<&Path>, dump: bool) -> Result<()> {
    let tc = cfg.train_config();
    let ds = dataset(cfg, data)?;
    let mut trainer = match resume {
        Some(path) => {
            let (_, state) = load_checkpoint(path, Some(&tc))?;
            Trainer::resume(tc.clone(), &ds, state)?
        }
        None => Trainer::new(tc.clone(), &ds)?,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("effective_config.toml"), cfg.to_toml()?)?;
    let start = Instant::now();
    if let Err(e) = trainer.run() {
        if let Error::Diverged { last_good, .. } = &e {
            save_checkpoint(&out.join("checkpoint.json"), &tc, last_good)?;
        }
        return Err(e);
    }
    let wall = start.elapsed().as_secs_f64();
    let state = trainer.state();
    emit_report(out, &tc, &state.records)?;
    save_checkpoint(&out.join("checkpoint.json"), &tc, state)?;
    state.model.save(&out.join("model.json"))?;
    fs::write(
        out.join("timing.json"),
        render_json(&serde_json::json!({ "wall_time_s": wall, "epochs": state.epoch }))?,
    )?;
    if dump {
        if let Some(est) = trainer.last_estimates() {
            write_estimates_csv(&out.join("estimates.csv"), est)?;
        }
    }
    if let Some(last) = state.records.last() {
        println!("epoch {} top1 {}", last.epoch, fmt_sig6(last.top1));
    }
    Ok(())
}
