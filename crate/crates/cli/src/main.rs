use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use madod_core::datasets::write_surrogate_mnist;
use madod_core::harness::{self, ExperimentConfig};
use madod_core::tolerances::{GRADCHECK_REL, SECOND_ORDER_REL};
use madod_core::verify;

#[derive(Parser)]
#[command(
    name = "madod",
    version,
    about = "Meta-learned domain generalization with semantic OOD detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every cell of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reverse-mode gradients against central finite differences.
    Gradcheck {
        /// Random networks to check.
        #[arg(long, default_value_t = 100)]
        nets: usize,
        /// Seeds per primitive.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Sorted-sweep AUROC / AUPR against brute-force oracles.
    OracleMetrics {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 500)]
        max_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a config's dataset and write it as CSV, or write surrogate MNIST IDX files.
    MakeData {
        #[arg(long, required_unless_present = "surrogate_mnist")]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "surrogate_mnist")]
        out: Option<PathBuf>,
        /// Directory to receive MNIST-shaped IDX files (60k train, 10k test).
        #[arg(long)]
        surrogate_mnist: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: cannot use config {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn fail(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::FAILURE
}

fn run(config: PathBuf, out: PathBuf) -> ExitCode {
    let cfg = match load_config(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Err(e) = cfg.validate() {
        eprintln!("error: config {}: {e}", config.display());
        return ExitCode::from(2);
    }
    let start = Instant::now();
    let outcomes = match harness::run_experiment(&cfg) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let records = match harness::write_outputs(&out, &cfg, &outcomes) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    match harness::aggregate(&records) {
        Ok(rows) => print!("{}", harness::format_summary(&rows)),
        Err(e) => return fail(e),
    }
    println!(
        "{} records in {:.1}s, written to {}",
        records.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    ExitCode::SUCCESS
}

fn gradcheck(nets: usize, seeds: usize) -> ExitCode {
    let checks = match verify::gradcheck_suite(seeds, nets) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let mut ok = true;
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        ok &= c.passed();
        println!(
            "{status:<4} {:<28} max_rel_error={:.3e} tol={:.0e}",
            c.name, c.max_rel_error, c.tolerance
        );
    }
    println!("tolerances: first order {GRADCHECK_REL:.0e}, second order {SECOND_ORDER_REL:.0e}");
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn oracle_metrics(instances: usize, max_n: usize, seed: u64) -> ExitCode {
    match verify::metric_equivalence(instances, max_n, seed) {
        Ok(r) => {
            println!(
                "{} instances: {} AUROC mismatches, {} AUPR mismatches",
                r.instances, r.auroc_mismatches, r.aupr_mismatches
            );
            if r.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => fail(e),
    }
}

fn make_data(config: Option<PathBuf>, out: Option<PathBuf>, surrogate: Option<PathBuf>, seed: u64) -> ExitCode {
    if let Some(dir) = surrogate {
        if let Err(e) = write_surrogate_mnist(&dir, 60_000, 10_000, seed) {
            return fail(e);
        }
        println!("surrogate MNIST written to {}", dir.display());
    }
    let (Some(config), Some(out)) = (config, out) else {
        return ExitCode::SUCCESS;
    };
    let cfg = match load_config(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let written = harness::prepare(&cfg).and_then(|prep| harness::write_dataset_csv(&out, &prep.dataset));
    match written {
        Ok(n) => {
            println!("{n} instances written to {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run { config, out } => run(config, out),
        Command::Gradcheck { nets, seeds } => gradcheck(nets, seeds),
        Command::OracleMetrics { instances, max_n, seed } => oracle_metrics(instances, max_n, seed),
        Command::MakeData {
            config,
            out,
            surrogate_mnist,
            seed,
        } => make_data(config, out, surrogate_mnist, seed),
    }
}
