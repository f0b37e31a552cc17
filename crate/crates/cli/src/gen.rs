use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use fedtsa_core::dataset::Split;
use fedtsa_core::label::CLASS_COUNT;
use fedtsa_core::sim::{simulate, Parameter};
use fedtsa_core::grid::BusSystem;
use fedtsa_core::scenarios::{client_grid, generate_client, parse_selection, GenerateOptions, ScenarioSummary};
use serde::{Deserialize, Serialize};

use crate::artifacts::{create_dir, load_grid, sha256_file, usage, write_json, GridRef};

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Client whose scenario grid is simulated.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    client: u8,
    #[arg(long)]
    out: PathBuf,
    /// Subset of grid indices, e.g. `0..19` (inclusive) or `0..4,10`.
    #[arg(long)]
    scenarios: Option<String>,
    /// Seed of the scenario split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.7,0.15,0.15")]
    split: String,
    /// Also write each simulated trajectory as `scenario_<index>.csv` in this directory.
    #[arg(long)]
    trajectory_csv: Option<PathBuf>,
}

/// Written next to each dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenManifest {
    pub command: String,
    pub version: String,
    pub client: u8,
    pub seed: u64,
    pub split: [f64; 3],
    pub selection: Vec<usize>,
    pub grid: GridRef,
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    pub windows: usize,
    pub census: [usize; CLASS_COUNT],
    pub split_census: Vec<(Split, [usize; CLASS_COUNT])>,
    pub scenarios: Vec<ScenarioSummary>,
}

fn parse_split(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--split {text:?} is not three comma-separated numbers")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| usage(format!("--split {text:?} needs exactly three fractions")))
}

pub fn run(args: GenArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let (sys, grid) = load_grid()?;
    let grid_len = client_grid(&sys, args.client)?.len();
    let selection = match &args.scenarios {
        Some(text) => parse_selection(text, grid_len)?,
        None => (0..grid_len).collect(),
    };
    log::info!("client {}: simulating {} of {grid_len} scenarios", args.client, selection.len());
    let opts = GenerateOptions { split, seed: args.seed };
    let (ds, scenarios) = generate_client(&sys, args.client, &selection, &opts)?;

    let census = ds.census(None);
    if scenarios.iter().any(|s| s.scenario.fault.is_some()) && census[1..4].contains(&0) {
        return Err(fedtsa_core::Error::Validation(format!(
            "client {} census {census:?} lacks a fault class; fault timing is mis-indexed",
            args.client
        ))
        .into());
    }

    create_dir(&args.out)?;
    let path = args.out.join(format!("client{}.ftsa", args.client));
    fedtsa_core::dataset::save(&ds, &path).with_context(|| format!("writing {}", path.display()))?;
    let manifest = GenManifest {
        command: "gen".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        client: args.client,
        seed: args.seed,
        split,
        selection,
        grid,
        dataset_sha256: sha256_file(&path)?,
        dataset: path.clone(),
        windows: ds.samples.len(),
        census,
        split_census: Split::ALL.iter().map(|&s| (s, ds.census(Some(s)))).collect(),
        scenarios,
    };
    write_json(&args.out.join(format!("client{}.json", args.client)), &manifest)?;
    if let Some(dir) = &args.trajectory_csv {
        write_trajectories(&sys, &manifest.scenarios, dir)?;
    }
    let stable = manifest.scenarios.iter().filter(|s| s.eta_tsi > 0.0).count();
    println!(
        "client {}: {} scenarios ({} stable), {} windows, census {:?} -> {}",
        args.client,
        manifest.scenarios.len(),
        stable,
        manifest.windows,
        census,
        path.display()
    );
    Ok(())
}

/// `step, generator, <parameters>`; scenarios are re-simulated, so this is slow.
fn write_trajectories(sys: &BusSystem, scenarios: &[ScenarioSummary], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for s in scenarios {
        let traj = simulate(sys, &s.scenario)?;
        let path = dir.join(format!("scenario_{}.csv", s.index));
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut header = vec!["step", "generator"];
        header.extend(Parameter::ALL.iter().map(|p| p.name()));
        w.write_record(&header)?;
        for k in 0..traj.steps {
            for g in 0..traj.generators {
                let mut row = vec![k.to_string(), (g + 1).to_string()];
                row.extend(Parameter::ALL.iter().map(|&p| traj.get(k, g, p).to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}
