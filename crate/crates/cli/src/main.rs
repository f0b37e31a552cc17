mod artifacts;
mod eval;
mod gen;
mod train;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedtsa_core::federation::{FedConfig, Transport, DEFAULT_TIMEOUT_SECS};
use fedtsa_core::dataset::Split;
use fedtsa_core::neural::ModelArch;

/// Federated transient-stability assessment on the IEEE 39-bus system.
#[derive(Debug, Parser)]
#[command(name = "fedtsa", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a client's scenario grid and write its dataset.
    Gen(gen::GenArgs),
    /// Federated training over in-process or localhost TCP clients.
    TrainFed(train::TrainFedArgs),
    /// Run the parameter server for remote clients.
    Serve(train::ServeArgs),
    /// Join a parameter server as one client.
    Client(train::ClientArgs),
    /// Train one model on the union of all client datasets.
    TrainCentral(train::CentralArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(eval::EvalArgs),
    /// Summarize a training run directory.
    Report(eval::ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Filters of the first convolution.
    #[arg(long, default_value_t = 16)]
    conv1: usize,
    /// Filters of the second convolution.
    #[arg(long, default_value_t = 32)]
    conv2: usize,
    /// Width of the hidden dense layer.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
}

impl ModelArgs {
    pub fn arch(&self) -> ModelArch {
        ModelArch::tsa(self.conv1, self.conv2, self.hidden, self.dropout)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Communication rounds.
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    /// Local epochs per round.
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inverse-frequency class weights in the loss.
    #[arg(long)]
    class_weights: bool,
    /// Average client parameters weighted by training-set size.
    #[arg(long)]
    weighted_average: bool,
    /// Stop early once mean client test accuracy reaches this value.
    #[arg(long)]
    early_accept: Option<f64>,
    /// Seconds to wait for any client message.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_SECS)]
    timeout: u64,
    #[command(flatten)]
    model: ModelArgs,
}

impl TrainArgs {
    pub fn config(&self, clients: usize, transport: Transport) -> FedConfig {
        FedConfig {
            clients,
            rounds: self.rounds,
            local_epochs: self.epochs,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            transport,
            early_accept: self.early_accept,
            timeout_secs: self.timeout,
            weighted_average: self.weighted_average,
            class_weights: self.class_weights,
            arch: self.model.arch(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportArg {
    InProcess,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

impl SplitArg {
    pub fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Validation => Some(Split::Validation),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use fedtsa_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<artifacts::UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Protocol(_) | E::Timeout(_) => 3,
                E::NonConvergence { .. } | E::SingularNetwork(_) | E::NonFinite(_) => 4,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Gen(a) => gen::run(a),
        Command::TrainFed(a) => train::run_fed(a),
        Command::Serve(a) => train::run_serve(a),
        Command::Client(a) => train::run_client(a),
        Command::TrainCentral(a) => train::run_central(a),
        Command::Eval(a) => eval::run_eval(a),
        Command::Report(a) => eval::run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
