use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use fedloc_cli::{cmd_bench, cmd_ledger, cmd_run, load_configs, CliError, LedgerAction};
use fedloc_core::ModeSelection;

#[derive(Parser)]
#[command(
    name = "fedloc",
    version,
    about = "Federated Kalman filter localization simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fkf,
    Skf,
    Both,
}

impl From<ModeArg> for ModeSelection {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fkf => ModeSelection::Fkf,
            ModeArg::Skf => ModeSelection::Skf,
            ModeArg::Both => ModeSelection::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run experiments and write trace and metric CSVs.
    Run {
        /// Config file or directory of config files; repeatable.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Manage a trusted-device ledger file.
    Ledger {
        #[command(subcommand)]
        action: LedgerCommand,
        #[arg(long, global = true, default_value = "ledger.chain")]
        chain: PathBuf,
        /// Block timestamp (unix seconds); defaults to now.
        #[arg(long, global = true)]
        timestamp: Option<u64>,
    },
    /// Time the local and global filter phases.
    Bench {
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long, default_value_t = fedloc_cli::MIN_BENCH_ROUNDS)]
        rounds: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum LedgerCommand {
    Init,
    Add { ids: Vec<String> },
    Verify,
    Show,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            mode,
            seed,
        } => {
            let configs = load_configs(&config)?;
            let output = cmd_run(&configs, &out, mode.map(Into::into), seed)?;
            print!("{}", output.comparison_table());
            log::info!("wrote {} files to {}", output.files.len(), out.display());
        }
        Command::Ledger {
            action,
            chain,
            timestamp,
        } => {
            let action = match action {
                LedgerCommand::Init => LedgerAction::Init,
                LedgerCommand::Add { ids } => LedgerAction::Add(ids),
                LedgerCommand::Verify => LedgerAction::Verify,
                LedgerCommand::Show => LedgerAction::Show,
            };
            println!(
                "{}",
                cmd_ledger(&action, &chain, timestamp.unwrap_or_else(now))?
            );
        }
        Command::Bench {
            config,
            rounds,
            seed,
        } => {
            let configs = load_configs(&config)?;
            let mut first = configs
                .into_iter()
                .next()
                .expect("load_configs returns at least one")
                .config;
            if let Some(seed) = seed {
                first.seed = seed;
            }
            print!("{}", cmd_bench(&first, rounds)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
