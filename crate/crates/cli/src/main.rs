//! Command-line driver: run the simulator, inspect a single
//! allocation, or print the convergence-bound decomposition.

// Validation guards are written `!(x > 0.0)` on purpose: the negation
// sends NaN into the error arm, which `x <= 0.0` would wave through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, ConfigFile};
use ttprune_core::allocator::{solve_lambda, AllocError, SolveContext};
use ttprune_core::exec;
use ttprune_core::fedsim::{
    self, profile_and_assign, profiles_at_path_gain, ForcedMove, Scheme, SimError, SimReport,
};
use ttprune_core::snapshot::{self, SnapshotError};

#[derive(Parser)]
#[command(
    name = "ttprune",
    about = "Tiered federated-learning simulator with joint pruning and bandwidth allocation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one or more schemes and write per-round metrics CSVs.
    Run {
        /// Experiment TOML; omitted, the built-in desk experiment runs.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for metrics and the summary.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of
        /// tt-prune,equal-resource,fedavg,no-pruning; default all.
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<String>,
        /// Worker threads (parallel build only); 0 keeps the default.
        #[arg(long, default_value_t = 0)]
        parallel: usize,
        /// Move this device to an adjacent tier after profiling.
        #[arg(long)]
        move_device: Option<usize>,
        /// Tier offset for --move-device.
        #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
        move_offset: i64,
        /// Also snapshot each scheme's final global model.
        #[arg(long)]
        save_models: bool,
    },
    /// Solve one allocation at the profiled channel state and print it.
    Solve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the optimized scheme and print the convergence-bound terms.
    Bound {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("cannot write {path}: {source}")]
    Out {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 = configuration problem, 3 = infeasible instance, 4 = output
    /// failure, 1 = anything else.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Sim(SimError::BadConfig(_)) => 2,
            CliError::Sim(SimError::Alloc(
                AllocError::TierInfeasible { .. } | AllocError::BudgetInfeasible { .. },
            )) => 3,
            CliError::Sim(SimError::Io(_)) | CliError::Out { .. } => 4,
            CliError::Snapshot(SnapshotError::Io(_)) => 4,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            config,
            out,
            seed,
            schemes,
            parallel,
            move_device,
            move_offset,
            save_models,
        } => cmd_run(
            config,
            out,
            seed,
            schemes,
            parallel,
            move_device.map(|device| ForcedMove {
                device,
                offset: move_offset,
            }),
            save_models,
        ),
        Command::Solve { config, seed } => cmd_solve(config, seed),
        Command::Bound { config, seed } => cmd_bound(config, seed),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile, CliError> {
    match path {
        Some(p) => Ok(ConfigFile::load(p)?),
        None => Ok(ConfigFile::default()),
    }
}

fn parse_schemes(names: &[String]) -> Result<Vec<Scheme>, CliError> {
    if names.is_empty() {
        return Ok(Scheme::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| n.trim().parse::<Scheme>().map_err(CliError::from))
        .collect()
}

fn create_out(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Out {
            path: path.display().to_string(),
            source,
        })
}

fn cmd_run(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    scheme_names: Vec<String>,
    parallel: usize,
    forced_move: Option<ForcedMove>,
    save_models: bool,
) -> Result<(), CliError> {
    exec::configure_threads(parallel).map_err(CliError::Usage)?;
    let cfg = load_config(&config)?;
    let seed = seed.unwrap_or_else(|| cfg.seed());
    let schemes = parse_schemes(&scheme_names)?;
    let exp = cfg.build_experiment(seed, forced_move)?;
    std::fs::create_dir_all(&out).map_err(|source| CliError::Out {
        path: out.display().to_string(),
        source,
    })?;

    let mut summary = String::new();
    for scheme in schemes {
        log::info!("running {scheme} (seed {seed})");
        let report = fedsim::run(&exp, scheme)?;
        let csv_path = out.join(format!("{}_metrics.csv", scheme.file_stem()));
        let mut sink = create_out(&csv_path)?;
        fedsim::write_metrics_csv(&mut sink, scheme, &report.rounds).map_err(|source| {
            CliError::Out {
                path: csv_path.display().to_string(),
                source,
            }
        })?;
        if save_models {
            let model_path = out.join(format!("{}_model.flwv", scheme.file_stem()));
            snapshot::save_weights(&model_path, &report.final_weights)?;
        }
        summarize(&mut summary, scheme, &report, cfg.target_accuracy());
    }
    let summary_path = out.join("summary.txt");
    std::fs::write(&summary_path, &summary).map_err(|source| CliError::Out {
        path: summary_path.display().to_string(),
        source,
    })?;
    print!("{summary}");
    Ok(())
}

fn summarize(buf: &mut String, scheme: Scheme, report: &SimReport, target: f64) {
    let last = report.rounds.last();
    let (loss, accuracy, time, bits) = last.map_or(
        (report.initial_loss, report.initial_accuracy, 0.0, 0),
        |r| (r.loss, r.accuracy, r.cum_time_s, r.cum_uplink_bits),
    );
    let _ = writeln!(
        buf,
        "{scheme}: tiers {} | final accuracy {accuracy:.4} | loss {loss:.4} | time {time:.4} s | uplink {bits} bits | bound rhs {:.4e}",
        report.tier_count, report.bound.rhs_total,
    );
    match report.first_round_reaching(target) {
        Some(r) => {
            let _ = writeln!(
                buf,
                "  reached {target:.3} at round {} ({:.4} s, {} bits)",
                r.round, r.cum_time_s, r.cum_uplink_bits
            );
        }
        None => {
            let _ = writeln!(buf, "  did not reach {target:.3}");
        }
    }
    if scheme == Scheme::TtPrune {
        let b = &report.bound;
        let _ = writeln!(
            buf,
            "  bound terms: init {:.4e} | pruning {:.4e} | drift {:.4e} | mixed {:.4e}",
            b.term_init, b.term_pruning, b.term_drift, b.term_mixed
        );
    }
}

fn cmd_solve(config: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(&config)?;
    let seed = seed.unwrap_or_else(|| cfg.seed());
    let exp = cfg.build_experiment(seed, None)?;
    let assignment = profile_and_assign(&exp, Scheme::TtPrune)?;
    let profiles = profiles_at_path_gain(&exp, &assignment);
    let ctx = SolveContext {
        net: &exp.net,
        consts: &exp.constants,
        delta_t: assignment.delta_t_s,
        local_epochs: exp.local_epochs as f64,
        total_tiers: assignment.tier_count,
    };
    let decision = solve_lambda(&profiles, &ctx).map_err(SimError::from)?;
    println!(
        "tiers {} | delta_t {:.6} s | lambda* {:.6e} | objective {:.6e}",
        assignment.tier_count, assignment.delta_t_s, decision.lambda_star, decision.objective_value
    );
    println!("tier  users  bandwidth_share  pruning_ratio");
    for tier in &decision.per_tier {
        println!(
            "{:>4}  {:>5}  {:>15.9}  {:>13.9}",
            tier.tier, tier.users, tier.bandwidth_fraction, tier.pruning_ratio
        );
    }
    Ok(())
}

fn cmd_bound(config: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(&config)?;
    let seed = seed.unwrap_or_else(|| cfg.seed());
    let exp = cfg.build_experiment(seed, None)?;
    let report = fedsim::run(&exp, Scheme::TtPrune)?;
    let b = &report.bound;
    println!(
        "rounds {} | tiers {} | xi {}",
        report.rounds.len(),
        report.tier_count,
        report.constants.xi
    );
    println!("rhs_total     {:.6e}", b.rhs_total);
    println!("  term_init    {:.6e}", b.term_init);
    println!("  term_pruning {:.6e}", b.term_pruning);
    println!("  term_drift   {:.6e}", b.term_drift);
    println!("  term_mixed   {:.6e}", b.term_mixed);
    println!("  omega1       {:.6e}", b.omega1);
    println!("  omega2       {:.6e}", b.omega2);
    Ok(())
}
