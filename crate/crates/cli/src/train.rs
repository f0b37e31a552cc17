use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{Context, Result};
use clap::Args;
use fedtsa_core::dataset::{ClientDataset, Split};
use fedtsa_core::federation::{join, run_centralized, run_federated, serve, FedConfig, FedOutcome, RoundReport, Transport};
use fedtsa_core::neural::{save_checkpoint, EpochMetrics, ModelParams};
use serde::Serialize;

use crate::artifacts::{
    confusion_rows, create_dir, load_datasets, usage, write_confusion_csv, write_json, write_loss_csv,
    write_metrics_csv, RunManifest,
};
use crate::{TrainArgs, TransportArg};

#[derive(Debug, Args)]
pub struct TrainFedArgs {
    /// One dataset file per client.
    #[arg(long, num_args = 1.., required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = TransportArg::InProcess)]
    transport: TransportArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: String,
    /// Number of clients to wait for.
    #[arg(long, default_value_t = 4)]
    clients: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

/// Rounds, epochs, learning rate and seed are taken from the server.
#[derive(Debug, Args)]
pub struct ClientArgs {
    #[arg(long)]
    server: String,
    #[arg(long)]
    client_id: u32,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct CentralArgs {
    #[arg(long, num_args = 1.., required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

fn write_run(out: &Path, mut manifest: RunManifest, outcome: &FedOutcome) -> Result<()> {
    create_dir(out)?;
    let mut save = |name: String, params: &ModelParams| -> Result<()> {
        save_checkpoint(params, out.join(&name)).with_context(|| format!("writing {name}"))?;
        manifest.artifacts.push(name);
        Ok(())
    };
    save("initial.ftsm".into(), &outcome.initial)?;
    for (r, g) in outcome.rounds.iter().zip(&outcome.round_globals) {
        save(format!("round_{}.ftsm", r.round), g)?;
    }
    save("global.ftsm".into(), &outcome.global)?;
    write_loss_csv(&out.join("loss.csv"), &outcome.rounds, manifest.fed_config.local_epochs)?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.rounds)?;
    write_confusion_csv(&out.join("confusion.csv"), &confusion_rows(&outcome.rounds))?;
    write_json(&out.join("rounds.json"), &outcome.rounds)?;
    manifest.artifacts.extend(["loss.csv", "metrics.csv", "confusion.csv", "rounds.json"].map(String::from));
    write_json(&out.join("manifest.json"), &manifest)
}

fn summarize(rounds: &[RoundReport]) {
    for r in rounds {
        println!(
            "round {}: mean val loss {:.5}, mean test accuracy {:.4}",
            r.round,
            r.mean_val_loss(),
            r.mean_test_accuracy()
        );
    }
}

fn check_transport(cfg: &FedConfig) -> Result<()> {
    if cfg.transport == Transport::Tcp && cfg.weighted_average {
        return Err(usage("--weighted-average is only available with the in-process transport"));
    }
    Ok(())
}

/// Server plus one client thread per dataset on a loopback port.
fn run_loopback(cfg: &FedConfig, data: &[ClientDataset]) -> Result<FedOutcome> {
    let listener = TcpListener::bind("127.0.0.1:0").context("binding loopback listener")?;
    let addr = listener.local_addr()?.to_string();
    let (outcome, sessions) = thread::scope(|s| {
        let server = s.spawn(|| serve(&listener, cfg));
        let clients: Vec<_> = data
            .iter()
            .map(|d| {
                let addr = addr.clone();
                s.spawn(move || join(&addr, d.client_id as u32, d, cfg))
            })
            .collect();
        let sessions: Vec<_> = clients.into_iter().map(|h| h.join().expect("client thread panicked")).collect();
        (server.join().expect("server thread panicked"), sessions)
    });
    let mut outcome = outcome?;
    // The server only sees round totals; the clients know every epoch.
    for session in sessions {
        let session = session?;
        for (r, mine) in outcome.rounds.iter_mut().zip(&session.rounds) {
            if let Some(c) = r.clients.iter_mut().find(|c| c.client_id == session.client_id) {
                c.epochs = mine.epochs.clone();
            }
        }
    }
    Ok(outcome)
}

pub fn run_fed(args: TrainFedArgs) -> Result<()> {
    let (data, refs) = load_datasets(&args.datasets)?;
    let transport = match args.transport {
        TransportArg::InProcess => Transport::InProcess,
        TransportArg::Tcp => Transport::Tcp,
    };
    let cfg = args.train.config(data.len(), transport);
    check_transport(&cfg)?;
    let outcome = match transport {
        Transport::InProcess => run_federated(&cfg, &data)?,
        Transport::Tcp => run_loopback(&cfg, &data)?,
    };
    summarize(&outcome.rounds);
    write_run(&args.out, RunManifest::new("train-fed", &cfg, refs), &outcome)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn run_serve(args: ServeArgs) -> Result<()> {
    let cfg = args.train.config(args.clients, Transport::Tcp);
    check_transport(&cfg)?;
    cfg.validate()?;
    let listener = TcpListener::bind(&args.bind)
        .map_err(fedtsa_core::Error::from)
        .with_context(|| format!("binding {}", args.bind))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    let outcome = serve(&listener, &cfg)?;
    summarize(&outcome.rounds);
    write_run(&args.out, RunManifest::new("serve", &cfg, Vec::new()), &outcome)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ClientSummary<'a> {
    client_id: u32,
    server: &'a str,
    dataset: &'a Path,
    bytes_sent: u64,
    bytes_received: u64,
    rounds: &'a [fedtsa_core::federation::ClientRoundReport],
}

pub fn run_client(args: ClientArgs) -> Result<()> {
    let (data, _) = load_datasets(std::slice::from_ref(&args.dataset))?;
    let cfg = args.train.config(1, Transport::Tcp);
    let session = join(&args.server, args.client_id, &data[0], &cfg)?;
    for r in &session.rounds {
        println!("client {}: val loss {:.5}, test accuracy {:.4}", r.client_id, r.val_loss, r.test_accuracy);
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        save_checkpoint(&session.global, out.join(format!("client{}_global.ftsm", args.client_id)))?;
        let summary = ClientSummary {
            client_id: session.client_id,
            server: &args.server,
            dataset: &args.dataset,
            bytes_sent: session.bytes_sent,
            bytes_received: session.bytes_received,
            rounds: &session.rounds,
        };
        write_json(&out.join(format!("client{}.json", args.client_id)), &summary)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CentralSummary<'a> {
    train_samples: usize,
    epochs: &'a [EpochMetrics],
    test: &'a fedtsa_core::neural::Evaluation,
}

pub fn run_central(args: CentralArgs) -> Result<()> {
    let (data, refs) = load_datasets(&args.datasets)?;
    let cfg = args.train.config(data.len(), Transport::InProcess);
    let out = run_centralized(&cfg, &data)?;
    create_dir(&args.out)?;
    save_checkpoint(&out.params, args.out.join("central.ftsm"))?;
    let mut w = csv::Writer::from_path(args.out.join("loss.csv"))?;
    w.write_record(["epoch", "train_loss", "val_loss", "val_accuracy"])?;
    for (k, e) in out.epochs.iter().enumerate() {
        w.serialize((k + 1, e.train_loss, e.val_loss, e.val_accuracy))?;
    }
    w.flush()?;
    write_confusion_csv(&args.out.join("confusion.csv"), &[(cfg.rounds, 0, out.test.confusion)])?;
    write_json(
        &args.out.join("central.json"),
        &CentralSummary { train_samples: out.train_samples, epochs: &out.epochs, test: &out.test },
    )?;
    let mut manifest = RunManifest::new("train-central", &cfg, refs);
    manifest.artifacts = ["central.ftsm", "loss.csv", "confusion.csv", "central.json"].map(String::from).to_vec();
    write_json(&args.out.join("manifest.json"), &manifest)?;
    let test_windows: usize = data.iter().map(|d| d.indices(Split::Test).len()).sum();
    println!(
        "centralized: {} training windows, test accuracy {:.4} on {} windows",
        out.train_samples, out.test.accuracy, test_windows
    );
    Ok(())
}
