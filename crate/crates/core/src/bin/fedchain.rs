use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedchain::chain::{validate_chain, ConsensusMode, Fault, Ledger};
use fedchain::experiments::{
    emit_report, run_accuracy_sweep, run_latency_grid, run_single_round, ExperimentConfig, ExperimentError,
    LatencyCell, Records, TrendCheck,
};
use fedchain::fed::{synthetic_dataset, AggregationScheme};

/// Deterministic simulator for federated-learning mining pools.
#[derive(Parser)]
#[command(name = "fedchain", version)]
struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Base seed (the config's, or 1).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds, starting at the base seed.
    #[arg(long)]
    runs: Option<usize>,
    /// Accuracy target.
    #[arg(long)]
    target: Option<f64>,
    /// Dataset fixture CSV instead of synthetic data.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Latency of every consensus mode over a (nodes, pools) grid.
    LatencyGrid {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<ConsensusMode>>,
        #[arg(long, value_delimiter = ',')]
        nodes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        pools: Option<Vec<usize>>,
        #[arg(long)]
        deadline_ms: Option<f64>,
        #[arg(long)]
        tasks_per_cell: Option<u32>,
    },
    /// Rounds to target for FedAvg and KL weighting across label skew.
    AccuracySweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_scheme)]
        schemes: Option<Vec<AggregationScheme>>,
        /// FL rounds before a run is cut off.
        #[arg(long)]
        budget: Option<u32>,
    },
    /// One traced task; writes trace, pools, transcript, metrics, ledger
    /// and model files.
    SingleRound {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "fedchain")]
        mode: ConsensusMode,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        pools: Option<usize>,
        /// Tamper with the first proof the publisher receives.
        #[arg(long)]
        tamper: bool,
    },
    /// Checks an exported ledger (JSON lines).
    ValidateChain { ledger: PathBuf },
    /// Prints the effective config as TOML.
    ShowConfig,
    /// Writes the synthetic dataset of the config as a fixture CSV.
    WriteFixture { path: PathBuf },
}

fn parse_scheme(s: &str) -> Result<AggregationScheme, String> {
    match s {
        "fedavg" => Ok(AggregationScheme::FedAvg),
        "kl" => Ok(AggregationScheme::Kl),
        _ => Err(format!("unknown scheme {s:?}; expected fedavg or kl")),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, ExperimentError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply(cfg: &mut ExperimentConfig, c: &Common) {
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.runs {
        cfg.runs = r;
    }
    if let Some(t) = c.target {
        cfg.target = t;
    }
    if let Some(d) = &c.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
}

fn print_trends(trends: &[TrendCheck]) -> bool {
    let mut ok = true;
    for t in trends {
        println!("[{}] {}: {}", t.status(), t.name, t.detail);
        ok &= t.passed != Some(false);
    }
    ok
}

fn run(cli: Cli) -> Result<bool, ExperimentError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::LatencyGrid { common, modes, nodes, pools, deadline_ms, tasks_per_cell } => {
            apply(&mut cfg, &common);
            if let Some(m) = modes {
                cfg.modes = m;
            }
            if let Some(n) = nodes {
                cfg.n_nodes = n;
            }
            if let Some(p) = pools {
                cfg.n_pools = p;
            }
            if let Some(d) = deadline_ms {
                cfg.deadline_ms = d;
            }
            if let Some(t) = tasks_per_cell {
                cfg.tasks_per_cell = t;
            }
            let grid = run_latency_grid(&cfg)?;
            for (n, p) in &grid.skipped {
                eprintln!("warning: skipping n_nodes={n}, n_pools={p}: more pools than nodes");
            }
            let records = Records::Latency { records: &grid.records, skipped: &grid.skipped };
            for path in emit_report(&cfg.output_dir, &cfg, records)? {
                println!("wrote {}", path.display());
            }
            Ok(print_trends(&records.trends()) && grid.records.iter().all(|r| r.chain_ok))
        }
        Command::AccuracySweep { common, alphas, schemes, budget } => {
            apply(&mut cfg, &common);
            if let Some(a) = alphas {
                cfg.alphas = a;
            }
            if let Some(s) = schemes {
                cfg.schemes = s;
            }
            if let Some(b) = budget {
                cfg.sweep.round_budget = b;
            }
            let records = run_accuracy_sweep(&cfg)?;
            let records = Records::Accuracy { records: &records, budget: cfg.sweep.round_budget };
            for path in emit_report(&cfg.output_dir, &cfg, records)? {
                println!("wrote {}", path.display());
            }
            Ok(print_trends(&records.trends()))
        }
        Command::SingleRound { common, mode, nodes, pools, tamper } => {
            apply(&mut cfg, &common);
            if tamper {
                cfg.round.fault = Some(Fault::TamperFirstProof);
            }
            let cell = LatencyCell {
                mode,
                n_nodes: nodes.unwrap_or(cfg.n_nodes[0]),
                n_pools: pools.unwrap_or(cfg.n_pools[0]),
                seed: cfg.seed,
            };
            let single = run_single_round(&cfg, &cell)?;
            for path in single.write(&cfg.output_dir)? {
                println!("wrote {}", path.display());
            }
            let r = &single.record.rounds[0];
            println!(
                "mode={} winner_pool={} latency_ms={:.3} accuracy={} fl_rounds={} chain_ok={}",
                cell.mode,
                r.winner_pool.map(|p| p.to_string()).unwrap_or_default(),
                r.latency_ms.unwrap_or(f64::NAN),
                r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
                r.fl_rounds,
                single.record.chain_ok
            );
            Ok(single.record.chain_ok)
        }
        Command::ValidateChain { ledger } => {
            let text = std::fs::read_to_string(&ledger)
                .map_err(|source| ExperimentError::Io { path: ledger.clone(), source })?;
            let ledger = Ledger::import(&text)?;
            let report = validate_chain(&ledger);
            println!("blocks={} transactions={} violations={}", report.blocks, report.transactions, report.violations.len());
            for v in &report.violations {
                println!("height {}: {:?}: {}", v.height, v.kind, v.detail);
            }
            Ok(report.ok())
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(true)
        }
        Command::WriteFixture { path } => {
            synthetic_dataset(&cfg.synthetic).save(&path)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
