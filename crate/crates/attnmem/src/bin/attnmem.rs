//! Command-line front end: theory curves, Monte Carlo sweeps, figure presets and diagnostics.
//!
//! Exit codes: 0 on success, 1 for usage or config errors, 2 when a cell fails numerically.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use attnmem::experiments::{
    exit_code_for, figure_preset, format_real, parse_assignment, parse_pairs, run_sweep, to_csv, write_atomic,
    SweepConfig, SweepOutcome,
};
use attnmem::nonlinearity::catalog;
use attnmem::simulate::{linearization_parts, mix64, trace_diagnostics, ExperimentCell, KernelModel, TraceDiagnostics};
use attnmem::{Error, Result};

#[derive(Parser)]
#[command(name = "attnmem", version, about = "Memorization error of nonlinear attention: theory and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output CSV file (a directory for `figure`); stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed of the Monte Carlo trials.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of Monte Carlo trials per cell.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Config file of key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluates the theory along the configured grid.
    Theory,
    /// Evaluates theory and Monte Carlo along the configured grid.
    Empirical,
    /// Runs the configured sweep in its own mode.
    Sweep,
    /// Runs every curve of a figure preset.
    Figure {
        /// One of fig1a..fig1c, fig2a..fig2c, fig3a..fig3c, fig4, fig5.
        name: String,
    },
    /// Per-trial diagnostics at the fixed cell of the config.
    Diag {
        #[arg(value_enum)]
        kind: DiagKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagKind {
    /// Distance between the kernel and its linearization.
    Linearization,
    /// Resolvent traces against the fixed-point predictions.
    Traces,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut pairs = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    for s in &cli.set {
        pairs.push(parse_assignment(s)?);
    }
    if let Some(seed) = cli.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Some(trials) = cli.trials {
        pairs.push(("trials".into(), trials.to_string()));
    }
    Ok(pairs)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report(outcome: &SweepOutcome) -> u8 {
    for (x, msg) in &outcome.failures {
        eprintln!("failure at axis value {x}: {msg}");
    }
    outcome.exit_code() as u8
}

fn run_config(cfg: &SweepConfig, out: Option<&Path>) -> Result<u8> {
    let outcome = run_sweep(cfg)?;
    emit(out, &to_csv(&outcome.rows))?;
    Ok(report(&outcome))
}

fn diag(cfg: &SweepConfig, kind: DiagKind, out: Option<&Path>) -> Result<u8> {
    let f = catalog(&cfg.f_name, &cfg.f_params.iter().map(|(k, v)| (k.as_str(), *v)).collect::<Vec<_>>())?;
    let p = cfg.p.round() as usize;
    let mut text = String::new();
    let mut failed = false;
    match kind {
        DiagKind::Linearization => {
            let cell = ExperimentCell {
                n: cfg.n,
                p,
                gamma: cfg.gamma,
                snr: cfg.snr,
                mode: cfg.alignment,
                model: KernelModel::attention(&f)?,
            };
            let KernelModel::Attention(fc) = &cell.model else { unreachable!("attention model") };
            let rows: Vec<_> = (0..cfg.trials as u64)
                .into_par_iter()
                .map(|t| {
                    let seed = mix64(cfg.master_seed, t);
                    (t, seed, cell.sample(seed).and_then(|(ds, w)| linearization_parts(&ds, &w, fc)))
                })
                .collect();
            text.push_str("trial,seed,n,p,residual,kn_norm,uk_norm,vq_norm,sigmak_norm\n");
            for (t, seed, r) in rows {
                match r {
                    Ok(r) => {
                        let vals = [r.residual, r.kn_norm, r.uk_norm, r.vq_norm, r.sigmak_norm].map(format_real);
                        writeln!(text, "{t},{seed},{},{},{}", r.n, r.p, vals.join(",")).expect("string write");
                    }
                    Err(e) => {
                        eprintln!("trial {t} (seed {seed}) failed: {e}");
                        failed = true;
                    }
                }
            }
        }
        DiagKind::Traces => {
            let rows: Vec<_> = (0..cfg.trials as u64)
                .into_par_iter()
                .map(|t| {
                    let seed = mix64(cfg.master_seed, t);
                    (t, seed, trace_diagnostics(cfg.n, p, &f, cfg.gamma, seed))
                })
                .collect();
            text.push_str("trial,seed,quantity,empirical,predicted,relative_error\n");
            for (t, seed, d) in rows {
                match d {
                    Ok(d) => {
                        let rel = d.relative_errors();
                        for (i, name) in TraceDiagnostics::NAMES.iter().enumerate() {
                            let vals = [d.empirical[i], d.predicted[i], rel[i]].map(format_real);
                            writeln!(text, "{t},{seed},{name},{}", vals.join(",")).expect("string write");
                        }
                    }
                    Err(e) => {
                        eprintln!("trial {t} (seed {seed}) failed: {e}");
                        failed = true;
                    }
                }
            }
        }
    }
    emit(out, &text)?;
    Ok(if failed { 2 } else { 0 })
}

fn run(cli: &Cli) -> Result<u8> {
    if let Some(k) = cli.workers {
        if k == 0 {
            return Err(Error::InvalidArgument("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("cannot size worker pool: {e}")))?;
    }
    let pairs = overrides(cli)?;
    let base = SweepConfig::from_pairs(&pairs)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Theory => {
            let cfg = base.with_overrides(&[("mode", base.mode.theory_only().name())])?;
            run_config(&cfg, out)
        }
        Command::Empirical => {
            let cfg = base.with_overrides(&[("mode", base.mode.empirical().name())])?;
            run_config(&cfg, out)
        }
        Command::Sweep => run_config(&base, out),
        Command::Figure { name } => {
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("results"));
            let mut code = 0;
            for preset in figure_preset(name)? {
                let cfg = preset.with_overrides(&pairs)?;
                let path = dir.join(format!("{}.csv", cfg.label));
                let outcome = run_sweep(&cfg)?;
                outcome.write_csv(&path)?;
                eprintln!("wrote {} ({} rows)", path.display(), outcome.rows.len());
                code = code.max(report(&outcome));
            }
            Ok(code)
        }
        Command::Diag { kind } => diag(&base, *kind, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
