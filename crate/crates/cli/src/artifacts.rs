//! Run manifests, grid loading and the CSV/JSON files written by the commands.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedtsa_core::dataset::ClientDataset;
use fedtsa_core::federation::{FedConfig, RoundReport};
use fedtsa_core::grid::{BusSystem, IEEE39_TOML};
use fedtsa_core::label::CLASS_COUNT;
use fedtsa_core::neural::{ConfusionMatrix, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const GRID_ENV: &str = "FEDTSA_GRID_DATA";

/// Flag values that parse but make no sense together.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRef {
    /// `None` for the bundled IEEE 39-bus data.
    pub path: Option<PathBuf>,
    pub sha256: String,
}

/// Loads the bundled grid, or the file named by `FEDTSA_GRID_DATA`.
pub fn load_grid() -> Result<(BusSystem, GridRef)> {
    match std::env::var_os(GRID_ENV) {
        Some(p) => {
            let path = PathBuf::from(p);
            let text = fs::read_to_string(&path)
                .map_err(fedtsa_core::Error::from)
                .with_context(|| format!("reading grid data {}", path.display()))?;
            let sys = BusSystem::from_toml_str(&text).with_context(|| format!("grid data {}", path.display()))?;
            Ok((sys, GridRef { sha256: sha256_hex(text.as_bytes()), path: Some(path) }))
        }
        None => Ok((BusSystem::ieee39(), GridRef { path: None, sha256: sha256_hex(IEEE39_TOML.as_bytes()) })),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub client_id: u16,
    pub path: PathBuf,
    pub sha256: String,
}

pub fn load_datasets(paths: &[PathBuf]) -> Result<(Vec<ClientDataset>, Vec<DatasetRef>)> {
    let mut data = Vec::with_capacity(paths.len());
    let mut refs = Vec::with_capacity(paths.len());
    for p in paths {
        let ds = fedtsa_core::dataset::load(p).with_context(|| format!("loading dataset {}", p.display()))?;
        refs.push(DatasetRef { client_id: ds.client_id, path: p.clone(), sha256: sha256_file(p)? });
        data.push(ds);
    }
    Ok((data, refs))
}

/// Everything needed to re-run a training command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub fed_config: FedConfig,
    /// Round-1 local settings of each client; later rounds only shift `epoch_offset`.
    pub train_configs: Vec<TrainConfig>,
    pub datasets: Vec<DatasetRef>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &FedConfig, datasets: Vec<DatasetRef>) -> Self {
        let train_configs = datasets
            .iter()
            .map(|d| {
                let mut tc = cfg.train_config(d.client_id as u32, 1);
                tc.class_weights = None;
                tc
            })
            .collect();
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            fed_config: cfg.clone(),
            train_configs,
            datasets,
            artifacts: Vec::new(),
        }
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(fedtsa_core::Error::from)
        .with_context(|| format!("creating {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
        .map_err(fedtsa_core::Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn finish(mut w: csv::Writer<fs::File>) -> Result<()> {
    w.flush()?;
    Ok(())
}

/// `round, epoch, client, train_loss, val_loss`; one row per local epoch, or
/// one row per round at the last epoch when only round totals are known.
pub fn write_loss_csv(path: &Path, rounds: &[RoundReport], local_epochs: usize) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["round", "epoch", "client", "train_loss", "val_loss"])?;
    for r in rounds {
        for c in &r.clients {
            if c.epochs.is_empty() {
                w.serialize((r.round, local_epochs, c.client_id, c.train_loss, c.val_loss))?;
            }
            for (k, e) in c.epochs.iter().enumerate() {
                w.serialize((r.round, k + 1, c.client_id, e.train_loss, e.val_loss))?;
            }
        }
    }
    finish(w)
}

/// `round, client, train_loss, val_loss, test_accuracy, recall_1..recall_5`.
pub fn write_metrics_csv(path: &Path, rounds: &[RoundReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["round".to_string(), "client".into(), "train_loss".into(), "val_loss".into(), "test_accuracy".into()];
    header.extend((1..=CLASS_COUNT).map(|k| format!("recall_{k}")));
    w.write_record(&header)?;
    for r in rounds {
        for c in &r.clients {
            let mut row = vec![
                r.round.to_string(),
                c.client_id.to_string(),
                c.train_loss.to_string(),
                c.val_loss.to_string(),
                c.test_accuracy.to_string(),
            ];
            row.extend(recall(&c.confusion).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    finish(w)
}

/// `round, client, true_class, pred_1..pred_5`.
pub fn write_confusion_csv(path: &Path, rows: &[(usize, u32, ConfusionMatrix)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["round".to_string(), "client".into(), "true_class".into()];
    header.extend((1..=CLASS_COUNT).map(|k| format!("pred_{k}")));
    w.write_record(&header)?;
    for (round, client, m) in rows {
        for (t, row) in m.iter().enumerate() {
            let mut rec = vec![round.to_string(), client.to_string(), (t + 1).to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
    }
    finish(w)
}

pub fn confusion_rows(rounds: &[RoundReport]) -> Vec<(usize, u32, ConfusionMatrix)> {
    rounds
        .iter()
        .flat_map(|r| r.clients.iter().map(move |c| (r.round, c.client_id, c.confusion)))
        .collect()
}

pub fn recall(m: &ConfusionMatrix) -> [f64; CLASS_COUNT] {
    std::array::from_fn(|c| {
        let row: u64 = m[c].iter().sum();
        if row == 0 {
            f64::NAN
        } else {
            m[c][c] as f64 / row as f64
        }
    })
}

pub fn print_confusion(out: &mut impl Write, m: &ConfusionMatrix) -> std::io::Result<()> {
    write!(out, "  true\\pred")?;
    for k in 1..=CLASS_COUNT {
        write!(out, "{:>8}", k)?;
    }
    writeln!(out, "{:>9}", "recall")?;
    let rec = recall(m);
    for (t, row) in m.iter().enumerate() {
        write!(out, "  {:>9}", t + 1)?;
        for v in row {
            write!(out, "{:>8}", v)?;
        }
        writeln!(out, "{:>9.3}", rec[t])?;
    }
    Ok(())
}
