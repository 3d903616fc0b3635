use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use fedshap::analysis::{histogram, lemma_check, DEFAULT_HISTOGRAM_BINS, DEFAULT_HISTOGRAM_RANGE};
use fedshap::runner::emit::{self, emit_diffs, emit_summary, find_cells_file, summary_from_rows};
use fedshap::runner::experiment::strategy_diffs;
use fedshap::runner::{emit_results, run_experiment, ExperimentConfig, Format};
use fedshap::Error;

/// Federated-learning simulator with per-round Shapley contribution analysis.
#[derive(Parser)]
#[command(name = "fedshap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
    Both,
}

impl OutputFormat {
    fn formats(self) -> Vec<Format> {
        match self {
            OutputFormat::Csv => vec![Format::Csv],
            OutputFormat::Json => vec![Format::Json],
            OutputFormat::Both => vec![Format::Csv, Format::Json],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment config and write result tables.
    Run {
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: OutputFormat,
        /// Run cells one after another regardless of the config.
        #[arg(long)]
        serial: bool,
        /// Also write every run record (JSON lines) to `runs.jsonl`.
        #[arg(long)]
        records: bool,
    },
    /// Compare the equal-payout closed form against Dirichlet sampling.
    LemmaCheck {
        #[arg(long, num_args = 1.., default_values_t = vec![3usize, 5])]
        n: Vec<usize>,
        #[arg(long, num_args = 1.., default_values_t = vec![1.0f64, 10.0, 100.0])]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = 200_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pairwise strategy differences and histograms from a results directory.
    Analyze {
        results: PathBuf,
        #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_HISTOGRAM_RANGE.0, allow_hyphen_values = true)]
        lower: f64,
        #[arg(long, default_value_t = DEFAULT_HISTOGRAM_RANGE.1, allow_hyphen_values = true)]
        upper: f64,
    },
    /// Per-strategy distance summaries (values x100) from a results directory.
    Report { results: PathBuf },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Idx(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn run(
    config: &Path,
    out: &Path,
    format: OutputFormat,
    serial: bool,
    records: bool,
) -> Result<(), Failure> {
    let mut config =
        ExperimentConfig::from_path(config).map_err(|e| Failure::Config(e.to_string()))?;
    if serial {
        config.parallel = false;
    }
    let started = Instant::now();
    let output = run_experiment(&config)?;
    for f in format.formats() {
        for path in emit_results(&output.table, f, out)? {
            println!("wrote {}", path.display());
        }
    }
    if records {
        let path = out.join("runs.jsonl");
        let mut text = String::new();
        for r in &output.records {
            text.push_str(&r.to_json()?);
            text.push('\n');
        }
        std::fs::write(&path, text)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    println!(
        "{} cells in {:.1}s",
        output.table.cells.len(),
        started.elapsed().as_secs_f64()
    );
    if !output.failures.is_empty() {
        for (cell, err) in &output.failures {
            eprintln!(
                "cell {} alpha={} epochs={} seed={} failed: {err}",
                cell.strategy, cell.alpha, cell.epochs, cell.seed
            );
        }
        return Err(Failure::Runtime(format!(
            "{} of {} cells failed; partial results written",
            output.failures.len(),
            output.table.cells.len()
        )));
    }
    Ok(())
}

fn lemma(n: &[usize], alpha: &[f64], draws: usize, seed: u64) -> Result<(), Failure> {
    println!(
        "{:>3} {:>8} {:>12} {:>12} {:>10}",
        "n", "alpha", "closed_x100", "sampled_x100", "rel_err"
    );
    for &n in n {
        for &a in alpha {
            let c = lemma_check(n, a, draws, seed)?;
            println!(
                "{:>3} {:>8} {:>12.2} {:>12.2} {:>9.3}%",
                n,
                a,
                c.analytic * 100.0,
                c.empirical * 100.0,
                c.relative_error * 100.0
            );
        }
    }
    Ok(())
}

fn analyze(dir: &Path, bins: usize, lower: f64, upper: f64) -> Result<(), Failure> {
    let rows = emit::read_cell_rows(&find_cells_file(dir)?)?;
    let mut diffs = strategy_diffs(&emit::cells_from_rows(&rows))?;
    for d in diffs.values_mut() {
        *d = histogram(&d.samples, bins, (lower, upper))?;
    }
    for path in emit_diffs(&diffs, Format::Csv, dir)? {
        println!("wrote {}", path.display());
    }
    println!(
        "{:<24} {:>8} {:>10} {:>10} {:>10}",
        "pair", "samples", "mean", "std", "max_abs"
    );
    for r in emit::pair_stats_rows(&diffs) {
        println!(
            "{:<24} {:>8} {:>10.4} {:>10.4} {:>10.4}",
            r.pair, r.samples, r.mean, r.std, r.max_abs
        );
    }
    Ok(())
}

fn report(dir: &Path) -> Result<(), Failure> {
    let rows = emit::read_cell_rows(&find_cells_file(dir)?)?;
    let summary = summary_from_rows(&rows);
    println!(
        "wrote {}",
        emit_summary(&summary, Format::Csv, dir)?.display()
    );
    println!(
        "{:<12} {:<11} {:>7} {:>6} {:>6} {:>10} {:>10} {:>8} {:>10}",
        "task",
        "strategy",
        "alpha",
        "epochs",
        "cells",
        "sq_x100",
        "cheb_x100",
        "opt_R",
        "equal_x100"
    );
    for r in emit::summary_rows(&summary) {
        let mark = if r.beats_equal == Some(true) { "*" } else { "" };
        println!(
            "{:<12} {:<11} {:>7} {:>6} {:>6} {:>9}{:1} {:>10} {:>8} {:>10}",
            r.task,
            r.strategy,
            r.alpha,
            r.epochs,
            r.valid_cells,
            fmt_opt(r.sq_euclid_x100),
            mark,
            fmt_opt(r.chebyshev_x100),
            fmt_opt(r.optimal_r_mean),
            fmt_opt(r.expected_equal_error_x100),
        );
    }
    println!("* beats the equal payout baseline");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            out,
            format,
            serial,
            records,
        } => run(&config, &out, format, serial, records),
        Command::LemmaCheck {
            n,
            alpha,
            draws,
            seed,
        } => lemma(&n, &alpha, draws, seed),
        Command::Analyze {
            results,
            bins,
            lower,
            upper,
        } => analyze(&results, bins, lower, upper),
        Command::Report { results } => report(&results),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
