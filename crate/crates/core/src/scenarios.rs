//! Per-client contingency grids and dataset generation.
//!
//! | client | fault location            | load levels   |
//! |--------|---------------------------|---------------|
//! | 1      | every bus                 | 1.00, 1.01    |
//! | 2      | every line, 25 % along it | 0.97, 1.05    |
//! | 3      | every line, 50 % along it | 0.98, 1.03    |
//! | 4      | every line, 75 % along it | 0.99, 1.02    |
//!
//! Scenarios are ordered by location, then load level.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{windowize, ClientDataset, SampleShape, Split};
use crate::error::{Error, Result};
use crate::grid::{BusSystem, FaultSpec};
use crate::label::{tsi, CLASS_COUNT};
use crate::seed::derive_seed;
use crate::sim::{simulate, Scenario, PARAM_COUNT};

pub const CLIENT_IDS: [u8; 4] = [1, 2, 3, 4];

/// Load levels of each client.
pub fn load_levels(client: u8) -> Result<[f64; 2]> {
    match client {
        1 => Ok([1.00, 1.01]),
        2 => Ok([0.97, 1.05]),
        3 => Ok([0.98, 1.03]),
        4 => Ok([0.99, 1.02]),
        _ => Err(Error::invalid(format!("client {client} outside 1..=4"))),
    }
}

/// Every scenario of a client's grid, in canonical order.
pub fn client_grid(sys: &BusSystem, client: u8) -> Result<Vec<Scenario>> {
    let loads = load_levels(client)?;
    let faults: Vec<FaultSpec> = match client {
        1 => sys.buses.iter().map(|b| FaultSpec::Bus { bus: b.id }).collect(),
        _ => {
            let position = [0.25, 0.5, 0.75][client as usize - 2];
            sys.lines.iter().map(|l| FaultSpec::Line { line: l.id, position }).collect()
        }
    };
    Ok(faults
        .into_iter()
        .flat_map(|f| loads.map(|s| Scenario::new(client, s, Some(f))))
        .collect())
}

/// Outcome of one simulated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    /// Position in the client's grid.
    pub index: usize,
    pub scenario: Scenario,
    pub fault_on_index: usize,
    pub fault_clear_index: usize,
    pub instability_index: Option<usize>,
    pub max_separation_deg: f64,
    pub eta_tsi: f64,
    pub split: Option<Split>,
    pub census: [usize; CLASS_COUNT],
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { split: crate::dataset::DEFAULT_SPLIT, seed: 0 }
    }
}

/// Simulates the selected grid entries in parallel, windows and labels them,
/// then splits and normalizes the client dataset. Scenario ids are grid
/// indices. Scenarios whose power flow fails are logged and skipped.
pub fn generate_client(
    sys: &BusSystem,
    client: u8,
    selection: &[usize],
    opts: &GenerateOptions,
) -> Result<(ClientDataset, Vec<ScenarioSummary>)> {
    let grid = client_grid(sys, client)?;
    if let Some(&bad) = selection.iter().find(|&&i| i >= grid.len()) {
        return Err(Error::invalid(format!(
            "scenario {bad} outside client {client}'s grid of {}",
            grid.len()
        )));
    }
    let results: Vec<_> = selection
        .par_iter()
        .map(|&i| {
            let mut scen = grid[i].clone();
            scen.seed = derive_seed(opts.seed, i as u64);
            let out = simulate(sys, &scen).and_then(|traj| Ok((windowize(&traj, i as u32)?, traj)));
            (i, scen, out)
        })
        .collect();

    let mut samples = Vec::new();
    let mut summaries = Vec::new();
    for (i, scen, out) in results {
        match out {
            Ok((windows, traj)) => {
                let mut census = [0; CLASS_COUNT];
                for w in &windows {
                    census[w.label.index()] += 1;
                }
                summaries.push(ScenarioSummary {
                    index: i,
                    fault_on_index: traj.fault_on_index,
                    fault_clear_index: traj.fault_clear_index,
                    instability_index: traj.instability_index,
                    max_separation_deg: traj.max_separation_deg,
                    eta_tsi: tsi(traj.max_separation_deg)?.eta_tsi,
                    split: None,
                    census,
                    scenario: scen,
                });
                samples.extend(windows);
            }
            Err(e @ (Error::NonConvergence { .. } | Error::SingularNetwork(_))) => {
                log::warn!("client {client} scenario {i} skipped: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    if summaries.is_empty() {
        return Err(Error::validation(format!("client {client}: no scenario could be simulated")));
    }
    let generators = sys.generators.len();
    let shape = SampleShape { time: crate::dataset::WINDOW_LEN, generators, params: PARAM_COUNT };
    let ds = ClientDataset::new(client as u16, shape, samples)?
        .split(opts.split, opts.seed)?
        .normalize()?;
    for s in &mut summaries {
        s.split = ds.splits.get(&(s.index as u32)).copied();
    }
    Ok((ds, summaries))
}

/// Parses selections like `0..9` (inclusive), `3`, `0..4,10,12..13`.
pub fn parse_selection(text: &str, grid_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad scenario index {s:?}")))
        };
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
                if a > b {
                    return Err(Error::invalid(format!("empty scenario range {part}")));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(Error::invalid("empty scenario selection"));
    }
    if let Some(&bad) = out.iter().find(|&&i| i >= grid_len) {
        return Err(Error::invalid(format!("scenario {bad} outside the grid of {grid_len}")));
    }
    Ok(out)
}
