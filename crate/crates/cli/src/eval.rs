use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use fedtsa_core::dataset::Split;
use fedtsa_core::label::CLASS_COUNT;
use fedtsa_core::neural::{evaluate, load_checkpoint, ConfusionMatrix, Evaluation, Network};
use serde::{Deserialize, Serialize};

use crate::artifacts::{load_datasets, print_confusion, recall, write_json};
use crate::{ModelArgs, SplitArg};

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    model_args: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `train-fed` or `serve`.
    #[arg(long)]
    run: PathBuf,
}

/// Evaluations of several splits pooled into one.
fn pool(parts: &[Evaluation]) -> Evaluation {
    let samples: usize = parts.iter().map(|e| e.samples).sum();
    let mut confusion = [[0u64; CLASS_COUNT]; CLASS_COUNT];
    for e in parts {
        for (row, other) in confusion.iter_mut().zip(&e.confusion) {
            for (a, b) in row.iter_mut().zip(other) {
                *a += b;
            }
        }
    }
    let weighted = |f: fn(&Evaluation) -> f64| {
        parts.iter().filter(|e| e.samples > 0).map(|e| f(e) * e.samples as f64).sum::<f64>() / samples as f64
    };
    Evaluation { samples, loss: weighted(|e| e.loss), accuracy: weighted(|e| e.accuracy), confusion }
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    let (data, _) = load_datasets(std::slice::from_ref(&args.dataset))?;
    let data = &data[0];
    let net = Network::new(args.model_args.arch())?;
    let params = load_checkpoint(&net, &args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let splits = match args.split.split() {
        Some(s) => vec![s],
        None => Split::ALL.to_vec(),
    };
    let parts = splits
        .iter()
        .filter(|&&s| !data.indices(s).is_empty())
        .map(|&s| evaluate(&net, &params, data, s))
        .collect::<fedtsa_core::Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Err(fedtsa_core::Error::Validation(format!("dataset has no windows in split {:?}", args.split)).into());
    }
    let ev = pool(&parts);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&ev)?);
    } else {
        println!(
            "client {} {:?}: {} windows, loss {:.5}, accuracy {:.4}",
            data.client_id, args.split, ev.samples, ev.loss, ev.accuracy
        );
        print_confusion(&mut std::io::stdout().lock(), &ev.confusion)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct MetricsRow {
    round: usize,
    client: u32,
    val_loss: f64,
    test_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client: u32,
    pub val_loss: Vec<f64>,
    /// Change of validation loss from the previous round.
    pub val_loss_delta: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    pub final_confusion: ConfusionMatrix,
    pub final_recall: [f64; CLASS_COUNT],
    /// Final validation loss below the first round's.
    pub no_overfitting_signal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub rounds: usize,
    pub clients: Vec<ClientSummary>,
    pub no_overfitting_signal: bool,
}

fn read_confusion(path: &Path) -> Result<BTreeMap<(usize, u32), ConfusionMatrix>> {
    let mut out: BTreeMap<(usize, u32), ConfusionMatrix> = BTreeMap::new();
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    for rec in r.deserialize() {
        let (round, client, true_class, preds): (usize, u32, usize, [u64; CLASS_COUNT]) =
            rec.with_context(|| format!("parsing {}", path.display()))?;
        if !(1..=CLASS_COUNT).contains(&true_class) {
            return Err(fedtsa_core::Error::Parse(format!("true_class {true_class} in {}", path.display())).into());
        }
        out.entry((round, client)).or_default()[true_class - 1] = preds;
    }
    Ok(out)
}

pub fn build_report(run: &Path) -> Result<RunReport> {
    let metrics_path = run.join("metrics.csv");
    let mut r = csv::Reader::from_path(&metrics_path).with_context(|| format!("reading {}", metrics_path.display()))?;
    let mut by_client: BTreeMap<u32, Vec<MetricsRow>> = BTreeMap::new();
    for rec in r.deserialize() {
        let row: MetricsRow = rec.with_context(|| format!("parsing {}", metrics_path.display()))?;
        by_client.entry(row.client).or_default().push(row);
    }
    if by_client.is_empty() {
        return Err(fedtsa_core::Error::Validation(format!("{} has no rows", metrics_path.display())).into());
    }
    let confusion = read_confusion(&run.join("confusion.csv"))?;
    let mut clients = Vec::new();
    let mut rounds = 0;
    for (client, mut rows) in by_client {
        rows.sort_by_key(|r| r.round);
        let last = rows.last().expect("non-empty").round;
        rounds = rounds.max(last);
        let val_loss: Vec<f64> = rows.iter().map(|r| r.val_loss).collect();
        let final_confusion = confusion.get(&(last, client)).copied().unwrap_or_default();
        clients.push(ClientSummary {
            client,
            val_loss_delta: val_loss.windows(2).map(|w| w[1] - w[0]).collect(),
            test_accuracy: rows.iter().map(|r| r.test_accuracy).collect(),
            final_recall: recall(&final_confusion),
            final_confusion,
            no_overfitting_signal: val_loss.len() > 1 && val_loss[val_loss.len() - 1] < val_loss[0],
            val_loss,
        });
    }
    let no_overfitting_signal = clients.iter().all(|c| c.no_overfitting_signal);
    Ok(RunReport { rounds, clients, no_overfitting_signal })
}

pub fn run_report(args: ReportArgs) -> Result<()> {
    let report = build_report(&args.run)?;
    let mut out = std::io::stdout().lock();
    use std::io::Write;
    writeln!(out, "{} rounds, {} clients", report.rounds, report.clients.len())?;
    for c in &report.clients {
        writeln!(out, "\nclient {}", c.client)?;
        writeln!(out, "  round  val_loss      delta  test_acc")?;
        for (k, (v, a)) in c.val_loss.iter().zip(&c.test_accuracy).enumerate() {
            let delta = if k == 0 { String::from("-") } else { format!("{:+.5}", c.val_loss_delta[k - 1]) };
            writeln!(out, "  {:>5}  {:>8.5}  {:>9}  {:>8.4}", k + 1, v, delta, a)?;
        }
        writeln!(out, "  final-round confusion")?;
        print_confusion(&mut out, &c.final_confusion)?;
        if c.no_overfitting_signal {
            writeln!(out, "  no overfitting signal")?;
        } else {
            writeln!(out, "  validation loss did not fall below its first-round value")?;
        }
    }
    if report.no_overfitting_signal {
        writeln!(out, "\nno overfitting signal")?;
    }
    write_json(&args.run.join("report.json"), &report)?;
    Ok(())
}
