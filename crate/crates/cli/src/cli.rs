//! Argument parsing and command dispatch for `safe-ctl`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use safe_core::trainer::{run, Mode, RunError};

use crate::compare::{render_text, report_from_traces, run_compare, CompareReport, RunMetrics};
use crate::config::{load_config, Overrides};
use crate::error::{CliError, CliResult};
use crate::replay::{interpolate, parse_replay_csv, render_replay, replay};
use crate::trace::{load_trace, save_trace, trace_file_name, TraceHeader};

#[derive(Debug, Parser)]
#[command(name = "safe-ctl", version, about = "Run, compare, and replay stabilized policy-optimization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write its trace and stability report.
    Run(RunArgs),
    /// Train every (mode, seed) pair and write an aggregated report.
    Compare(CompareArgs),
    /// Feed a recorded step,kl,reward[,entropy] CSV through the controllers.
    Replay(ReplayArgs),
    /// Recompute a comparison report from trace files.
    Report(ReportArgs),
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "SAFE_CTL_OUT_DIR", default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "ppo,asym-kl,safe")]
    pub modes: Vec<Mode>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, env = "SAFE_CTL_OUT_DIR", default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// CSV with header step,kl,reward and an optional entropy column.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Emit JSON lines instead of the text table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Trace JSONL files; repeat the flag for several.
    #[arg(long, required = true)]
    pub trace: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

pub fn cmd_run(args: &RunArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let overrides = Overrides {
        mode: args.mode,
        steps: args.steps,
        seed: args.seed,
    };
    let cfg = load_config(args.config.as_deref(), &overrides)?;
    ensure_dir(&args.out)?;
    let header = TraceHeader::for_config(&cfg);
    let trace_path = args.out.join(trace_file_name(cfg.mode, cfg.seed));
    match run(&cfg) {
        Ok(out) => {
            save_trace(&trace_path, &header, &out.trace)?;
            let metrics = RunMetrics::from_trace(&out.trace, &cfg.report);
            let report_path = args.out.join(format!("report_{}_seed{}.json", cfg.mode, cfg.seed));
            write_file(&report_path, &to_json(&metrics))?;
            let _ = writeln!(
                stdout,
                "{} seed {}: {} steps, mean reward {:.4}, kl rolling std {:.4}, crashes {}\ntrace: {}\nreport: {}",
                cfg.mode,
                cfg.seed,
                out.trace.len(),
                metrics.stability.mean_reward,
                metrics.stability.kl_rolling_std,
                metrics.stability.crash_count,
                trace_path.display(),
                report_path.display()
            );
            Ok(())
        }
        Err(RunError::Config(e)) => Err(e.into()),
        Err(RunError::Diverged { step, source, partial }) => {
            save_trace(&trace_path, &header, &partial)?;
            Err(CliError::Diverged {
                step,
                msg: source.to_string(),
            })
        }
    }
}

pub fn cmd_compare(args: &CompareArgs, stdout: &mut dyn Write) -> CliResult<CompareReport> {
    if args.seeds.is_empty() {
        return Err(CliError::Config("compare needs at least one seed".into()));
    }
    let modes = crate::compare::canonical_modes(&args.modes);
    if modes.len() < 2 {
        return Err(CliError::Config("compare needs at least two distinct modes".into()));
    }
    let overrides = Overrides {
        steps: args.steps,
        ..Overrides::default()
    };
    let base = load_config(args.config.as_deref(), &overrides)?;
    ensure_dir(&args.out)?;
    let report = run_compare(&base, &modes, &args.seeds, Some(&args.out))?;
    let text = render_text(&report);
    write_file(&args.out.join("compare.json"), &to_json(&report))?;
    write_file(&args.out.join("compare.txt"), &text)?;
    let _ = stdout.write_all(text.as_bytes());
    Ok(report)
}

pub fn cmd_replay(args: &ReplayArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref(), &Overrides::default())?;
    let f = std::fs::File::open(&args.trace).map_err(|source| CliError::Read {
        path: args.trace.clone(),
        source,
    })?;
    let rows = parse_replay_csv(f)?;
    let out = replay(&interpolate(&rows), &cfg.asym, &cfg.controller)?;
    if args.json {
        for r in &out {
            let _ = writeln!(stdout, "{}", serde_json::to_string(r).expect("row serializes"));
        }
    } else {
        let _ = stdout.write_all(render_replay(&out).as_bytes());
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs, stdout: &mut dyn Write) -> CliResult<CompareReport> {
    let cfg = load_config(args.config.as_deref(), &Overrides::default())?;
    let traces = args
        .trace
        .iter()
        .map(|p| load_trace(p))
        .collect::<CliResult<Vec<_>>>()?;
    let report = report_from_traces(&traces, &cfg.report);
    let text = render_text(&report);
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        write_file(&dir.join("report.json"), &to_json(&report))?;
        write_file(&dir.join("report.txt"), &text)?;
    }
    let _ = stdout.write_all(text.as_bytes());
    Ok(report)
}

/// Parse `args` (including the program name) and execute; returns the exit code.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(rendered.as_bytes())
            } else {
                stderr.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, stdout),
        Command::Compare(a) => cmd_compare(a, stdout).map(|_| ()),
        Command::Replay(a) => cmd_replay(a, stdout),
        Command::Report(a) => cmd_report(a, stdout).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
