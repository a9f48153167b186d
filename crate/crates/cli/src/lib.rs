//! Subcommands of the `funcmac` binary. Each returns the process exit code:
//! 0 on success, 2 when the run itself found a problem (a denial, or a
//! fast-path divergence), 1 on unreadable or malformed input.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use walkdir::WalkDir;

use funcmac::complain::complain_report;
use funcmac::policy::{generate_template, parse_baseline, SHIPPED_BASELINE};
use funcmac::replay::{replay, ReplayOptions};
use funcmac::report::{build_report, render_report};
use funcmac::trace::{parse_trace, Trace};
use funcmac::{parse_policy, serialize_policy, Mode, Policy, Verdict};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 1;
pub const EXIT_FINDING: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "funcmac",
    version,
    about = "Function-granular access control reference monitor"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Enforce,
    Complain,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Enforce => Mode::Enforce,
            ModeArg::Complain => Mode::Complain,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replay a trace through the monitor.
    Replay {
        policy: PathBuf,
        trace: PathBuf,
        #[arg(long, value_enum, default_value = "enforce")]
        mode: ModeArg,
        /// Inspect the stack on every request instead of consulting the hash log.
        #[arg(long)]
        no_fast_path: bool,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write suggested rules (complain mode) here.
        #[arg(long)]
        suggest: Option<PathBuf>,
    },
    /// Generate a template policy of default rules.
    Genpolicy {
        /// Baseline file; the built-in baseline is used when unset.
        #[arg(long, env = "FUNCMAC_BASELINE")]
        baseline: Option<PathBuf>,
        /// Directory whose files get a read rule each.
        #[arg(long)]
        app_dir: Option<PathBuf>,
        /// Output file; stdout when unset.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay with and without the fast path and compare verdicts.
    DiffFastpath { policy: PathBuf, trace: PathBuf },
    /// Validate a trace file against the trace schema.
    CheckTrace { trace: PathBuf },
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut policy =
        parse_policy(&text).with_context(|| format!("parsing policy {}", path.display()))?;
    policy.source_path = Some(path.display().to_string());
    Ok(policy)
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_trace(&text).with_context(|| format!("parsing trace {}", path.display()))
}

/// Regular files under `dir`, absolute, in sorted order.
pub fn list_app_files(dir: &Path) -> Result<Vec<String>> {
    let root = fs::canonicalize(dir).with_context(|| format!("listing {}", dir.display()))?;
    let mut files = Vec::new();
    for entry in WalkDir::new(&root).sort_by_file_name() {
        let entry = entry.with_context(|| format!("listing {}", dir.display()))?;
        if entry.file_type().is_file() {
            let path = entry.path();
            let Some(s) = path.to_str() else {
                bail!("non UTF-8 path {}", path.display());
            };
            files.push(s.to_string());
        }
    }
    Ok(files)
}

fn write_output(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => out.write_all(text.as_bytes()).context("writing output"),
    }
}

fn cmd_replay(
    policy: &Path,
    trace: &Path,
    opts: ReplayOptions,
    report: Option<&Path>,
    suggest: Option<&Path>,
    out: &mut dyn Write,
) -> Result<u8> {
    let policy = load_policy(policy)?;
    let trace = load_trace(trace)?;
    let result = replay(&policy, &trace, opts);
    let suggestions = if opts.mode == Mode::Complain {
        complain_report(&policy, &result.decisions)
    } else {
        Vec::new()
    };
    let rep = build_report(&result, opts, &suggestions);
    if let Some(path) = report {
        fs::write(path, render_report(&rep))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = suggest {
        let text = serialize_policy(&Policy::new(suggestions.clone()));
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let s = &rep.summary;
    let denied: usize = s.deny.values().sum::<usize>() + s.rejected;
    writeln!(
        out,
        "events {} allow {} deny {} rejected {} would-deny {} inspections {} fast-path {}",
        s.events,
        s.allow,
        s.deny.values().sum::<usize>(),
        s.rejected,
        s.would_deny.values().sum::<usize>(),
        s.inspections,
        s.fast_path_hits
    )?;
    for d in result.decisions.iter().filter(|d| d.is_denied()) {
        match &d.verdict {
            Verdict::Deny(r) => writeln!(out, "deny seq {} pid {}: {r}", d.seq, d.pid)?,
            Verdict::Rejected(e) => writeln!(out, "rejected seq {} pid {}: {e}", d.seq, d.pid)?,
            Verdict::Allow => {}
        }
    }
    Ok(if denied == 0 { EXIT_OK } else { EXIT_FINDING })
}

fn cmd_genpolicy(
    baseline: Option<&Path>,
    app_dir: Option<&Path>,
    out_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<u8> {
    let baseline_text = match baseline {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => SHIPPED_BASELINE.to_string(),
    };
    let entries = parse_baseline(&baseline_text).context("parsing baseline")?;
    let files = match app_dir {
        Some(d) => list_app_files(d)?,
        None => Vec::new(),
    };
    let policy = generate_template(&entries, &files).context("building template")?;
    write_output(out_path, &serialize_policy(&policy), out)?;
    Ok(EXIT_OK)
}

fn cmd_diff_fastpath(policy: &Path, trace: &Path, out: &mut dyn Write) -> Result<u8> {
    let policy = load_policy(policy)?;
    let trace = load_trace(trace)?;
    let base = ReplayOptions::default();
    let on = replay(
        &policy,
        &trace,
        ReplayOptions {
            fast_path: true,
            ..base
        },
    );
    let off = replay(
        &policy,
        &trace,
        ReplayOptions {
            fast_path: false,
            ..base
        },
    );
    let count =
        |r: &funcmac::replay::ReplayResult| r.decisions.iter().filter(|d| d.inspected()).count();
    writeln!(
        out,
        "inspections: fast path on {}, off {}",
        count(&on),
        count(&off)
    )?;
    let diverged: Vec<_> = on
        .decisions
        .iter()
        .zip(&off.decisions)
        .filter(|(a, b)| a.verdict != b.verdict)
        .collect();
    for (a, b) in &diverged {
        writeln!(
            out,
            "divergence at seq {}: {:?} vs {:?}",
            a.seq, a.verdict, b.verdict
        )?;
    }
    Ok(if diverged.is_empty() {
        EXIT_OK
    } else {
        EXIT_FINDING
    })
}

fn cmd_check_trace(trace: &Path, out: &mut dyn Write) -> Result<u8> {
    let t = load_trace(trace)?;
    writeln!(out, "ok: {} events", t.events.len())?;
    Ok(EXIT_OK)
}

/// Runs a parsed command; errors are printed to `err` and mapped to exit 1.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let res = match cli.command {
        Command::Replay {
            policy,
            trace,
            mode,
            no_fast_path,
            report,
            suggest,
        } => cmd_replay(
            &policy,
            &trace,
            ReplayOptions {
                mode: mode.into(),
                fast_path: !no_fast_path,
            },
            report.as_deref(),
            suggest.as_deref(),
            out,
        ),
        Command::Genpolicy {
            baseline,
            app_dir,
            out: out_path,
        } => cmd_genpolicy(
            baseline.as_deref(),
            app_dir.as_deref(),
            out_path.as_deref(),
            out,
        ),
        Command::DiffFastpath { policy, trace } => cmd_diff_fastpath(&policy, &trace, out),
        Command::CheckTrace { trace } => cmd_check_trace(&trace, out),
    };
    res.unwrap_or_else(|e| {
        let _ = writeln!(err, "error: {e:#}");
        EXIT_INPUT
    })
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, out, err),
        Err(e) => {
            let _ = write!(err, "{e}");
            if e.use_stderr() {
                EXIT_INPUT
            } else {
                EXIT_OK
            }
        }
    }
}
