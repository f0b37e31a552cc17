//! Static grid description: buses, branches and classical machines.
//!
//! A [`BusSystem`] is read from the TOML grid format documented in
//! `docs/grid-format.md`. The IEEE 39-bus New England system ships with the
//! crate and is available through [`BusSystem::ieee39`].

mod kron;
mod powerflow;

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kron::{
    build_reduced, internal_emfs, kron_reduce, FaultSpec, KronReduction, NetworkStage, ReducedNetwork, Topology,
    LINE_FAULT_POSITIONS,
};
pub use powerflow::{solve_power_flow, PowerFlowSolution, LOAD_SCALE_RANGE, PF_MAX_ITERATIONS, PF_TOLERANCE};

/// Contents of the bundled IEEE 39-bus data file.
pub const IEEE39_TOML: &str = include_str!("../../data/ieee39.toml");

/// Shunt admittance used to tie a faulted point to ground (1e-6 p.u. impedance).
pub const FAULT_ADMITTANCE: f64 = 1.0e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    /// Voltage magnitude setpoint (p.u.); the flat-start guess for PQ buses.
    #[serde(default = "one")]
    pub vm: f64,
    #[serde(default)]
    pub pd_mw: f64,
    #[serde(default)]
    pub qd_mvar: f64,
}

fn one() -> f64 {
    1.0
}

/// Transmission line, pi model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance.
    #[serde(default)]
    pub b: f64,
}

/// Fixed-tap transformer; the tap sits on the `from` side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    #[serde(default)]
    pub r: f64,
    pub x: f64,
    #[serde(default = "one")]
    pub ratio: f64,
}

/// Classical machine: constant EMF behind transient reactance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: u32,
    /// Inertia constant in seconds on the system base.
    pub h: f64,
    pub xd_prime: f64,
    /// Scheduled active power. Ignored at the slack bus.
    #[serde(default)]
    pub pg_mw: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    pub buses: Option<usize>,
    pub generators: Option<usize>,
    pub lines: Option<usize>,
    pub load_points: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct GridFile {
    format_version: u32,
    #[serde(default)]
    name: String,
    base_mva: f64,
    #[serde(default = "sixty")]
    frequency_hz: f64,
    #[serde(default)]
    bus: Vec<Bus>,
    #[serde(default)]
    line: Vec<Line>,
    #[serde(default)]
    transformer: Vec<Transformer>,
    #[serde(default)]
    generator: Vec<Generator>,
    #[serde(default)]
    expect: Option<ExpectedCounts>,
}

fn sixty() -> f64 {
    60.0
}

pub const GRID_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BusSystem {
    pub name: String,
    pub base_mva: f64,
    pub frequency_hz: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub transformers: Vec<Transformer>,
    pub generators: Vec<Generator>,
    index: HashMap<u32, usize>,
}

/// Reads and validates a grid data file.
pub fn load_system(path: impl AsRef<Path>) -> Result<BusSystem> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    BusSystem::from_toml_str(&text)
}

impl BusSystem {
    /// The bundled IEEE 39-bus system.
    pub fn ieee39() -> BusSystem {
        BusSystem::from_toml_str(IEEE39_TOML).expect("bundled IEEE 39-bus data is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<BusSystem> {
        let file: GridFile = toml::from_str(text).map_err(|e| Error::parse(e.to_string()))?;
        if file.format_version != GRID_FORMAT_VERSION {
            return Err(Error::parse(format!(
                "unsupported grid format_version {} (expected {GRID_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let expect = file.expect.clone();
        let sys = BusSystem::new(
            file.name,
            file.base_mva,
            file.frequency_hz,
            file.bus,
            file.line,
            file.transformer,
            file.generator,
        )?;
        if let Some(expect) = expect {
            sys.check_counts(&expect)?;
        }
        Ok(sys)
    }

    /// Builds a system from its parts and validates it.
    pub fn new(
        name: String,
        base_mva: f64,
        frequency_hz: f64,
        buses: Vec<Bus>,
        lines: Vec<Line>,
        transformers: Vec<Transformer>,
        generators: Vec<Generator>,
    ) -> Result<BusSystem> {
        let mut index = HashMap::with_capacity(buses.len());
        for (i, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, i).is_some() {
                return Err(Error::validation(format!("duplicate bus id {}", bus.id)));
            }
        }
        let sys = BusSystem {
            name,
            base_mva,
            frequency_hz,
            buses,
            lines,
            transformers,
            generators,
            index,
        };
        sys.validate()?;
        Ok(sys)
    }

    fn validate(&self) -> Result<()> {
        if !(self.base_mva > 0.0) || !(self.frequency_hz > 0.0) {
            return Err(Error::validation("base_mva and frequency_hz must be positive"));
        }
        if self.buses.is_empty() {
            return Err(Error::validation("system has no buses"));
        }
        if self.generators.is_empty() {
            return Err(Error::validation("system has no generators"));
        }
        let slack = self.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if slack != 1 {
            return Err(Error::validation(format!("expected exactly one slack bus, found {slack}")));
        }
        for bus in &self.buses {
            if !(bus.vm > 0.0) || !bus.pd_mw.is_finite() || !bus.qd_mvar.is_finite() {
                return Err(Error::validation(format!("bus {}: invalid voltage or load", bus.id)));
            }
        }

        let mut line_ids = HashMap::new();
        for line in &self.lines {
            if line_ids.insert(line.id, ()).is_some() {
                return Err(Error::validation(format!("duplicate line id {}", line.id)));
            }
            self.check_branch_ends("line", line.id, line.from, line.to)?;
            if !(line.x > 0.0) || line.r < 0.0 || !line.b.is_finite() {
                return Err(Error::validation(format!("line {}: requires x > 0 and r >= 0", line.id)));
            }
        }
        for tr in &self.transformers {
            self.check_branch_ends("transformer", tr.id, tr.from, tr.to)?;
            if !(tr.x > 0.0) || tr.r < 0.0 || !(tr.ratio > 0.0) {
                return Err(Error::validation(format!(
                    "transformer {}: requires x > 0, r >= 0 and ratio > 0",
                    tr.id
                )));
            }
        }

        let mut gen_buses = HashMap::new();
        for gen in &self.generators {
            let Some(&bi) = self.index.get(&gen.bus) else {
                return Err(Error::validation(format!("generator on nonexistent bus {}", gen.bus)));
            };
            if gen_buses.insert(gen.bus, ()).is_some() {
                return Err(Error::validation(format!("more than one generator on bus {}", gen.bus)));
            }
            if self.buses[bi].kind == BusKind::Pq {
                return Err(Error::validation(format!("generator on PQ bus {}", gen.bus)));
            }
            if !(gen.h > 0.0) {
                return Err(Error::validation(format!("generator at bus {}: H must be positive", gen.bus)));
            }
            if !(gen.xd_prime > 0.0) {
                return Err(Error::validation(format!(
                    "generator at bus {}: xd_prime must be positive",
                    gen.bus
                )));
            }
        }
        for bus in &self.buses {
            if bus.kind != BusKind::Pq && !gen_buses.contains_key(&bus.id) {
                return Err(Error::validation(format!("{:?} bus {} has no generator", bus.kind, bus.id)));
            }
        }

        if !self.is_connected(None) {
            return Err(Error::validation("branch graph is not connected"));
        }
        Ok(())
    }

    fn check_branch_ends(&self, what: &str, id: u32, from: u32, to: u32) -> Result<()> {
        for end in [from, to] {
            if !self.index.contains_key(&end) {
                return Err(Error::validation(format!("{what} {id} references nonexistent bus {end}")));
            }
        }
        if from == to {
            return Err(Error::validation(format!("{what} {id} is a self-loop")));
        }
        Ok(())
    }

    pub fn check_counts(&self, expect: &ExpectedCounts) -> Result<()> {
        let checks = [
            ("buses", expect.buses, self.buses.len()),
            ("generators", expect.generators, self.generators.len()),
            ("lines", expect.lines, self.lines.len()),
            ("load points", expect.load_points, self.load_point_count()),
        ];
        for (what, want, got) in checks {
            if let Some(want) = want {
                if want != got {
                    return Err(Error::validation(format!("expected {want} {what}, found {got}")));
                }
            }
        }
        Ok(())
    }

    /// PQ buses plus generator buses that also serve a load.
    pub fn load_point_count(&self) -> usize {
        self.buses
            .iter()
            .filter(|b| b.kind == BusKind::Pq || b.pd_mw != 0.0 || b.qd_mvar != 0.0)
            .count()
    }

    /// Connectivity of the branch graph, optionally with one line removed.
    pub fn is_connected(&self, without_line: Option<u32>) -> bool {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        let lines = self
            .lines
            .iter()
            .filter(|l| Some(l.id) != without_line)
            .map(|l| (l.from, l.to));
        let trs = self.transformers.iter().map(|t| (t.from, t.to));
        for (a, b) in lines.chain(trs) {
            let (a, b) = (self.index[&a], self.index[&b]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn line(&self, id: u32) -> Option<&Line> {
        self.lines.iter().find(|l| l.id == id)
    }

    pub fn generator_bus_indices(&self) -> Vec<usize> {
        self.generators.iter().map(|g| self.index[&g.bus]).collect()
    }

    pub fn slack_index(&self) -> usize {
        self.buses.iter().position(|b| b.kind == BusKind::Slack).unwrap()
    }

    /// Copy of this system with one line removed.
    pub fn without_line(&self, id: u32) -> Result<BusSystem> {
        if self.line(id).is_none() {
            return Err(Error::invalid(format!("no line with id {id}")));
        }
        let mut sys = self.clone();
        sys.lines.retain(|l| l.id != id);
        sys.validate()?;
        Ok(sys)
    }

    /// Series admittances and branch stamps of every line and transformer.
    pub(crate) fn stamp_branches(&self, y: &mut nalgebra::DMatrix<Complex64>, skip_line: Option<u32>) {
        for line in self.lines.iter().filter(|l| Some(l.id) != skip_line) {
            let (f, t) = (self.index[&line.from], self.index[&line.to]);
            stamp_pi(y, f, t, Complex64::new(line.r, line.x), line.b);
        }
        for tr in &self.transformers {
            let (f, t) = (self.index[&tr.from], self.index[&tr.to]);
            let ys = Complex64::new(tr.r, tr.x).inv();
            let a = tr.ratio;
            y[(f, f)] += ys / (a * a);
            y[(t, t)] += ys;
            y[(f, t)] -= ys / a;
            y[(t, f)] -= ys / a;
        }
    }

    /// Bus admittance matrix (branches only, no loads).
    pub fn admittance_matrix(&self) -> nalgebra::DMatrix<Complex64> {
        let n = self.buses.len();
        let mut y = nalgebra::DMatrix::zeros(n, n);
        self.stamp_branches(&mut y, None);
        y
    }
}

/// Adds a pi-model branch with series impedance `z` and total charging `b`.
pub(crate) fn stamp_pi(y: &mut nalgebra::DMatrix<Complex64>, f: usize, t: usize, z: Complex64, b: f64) {
    let ys = z.inv();
    let half = Complex64::new(0.0, b / 2.0);
    y[(f, f)] += ys + half;
    y[(t, t)] += ys + half;
    y[(f, t)] -= ys;
    y[(t, f)] -= ys;
}
