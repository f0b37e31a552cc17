//! Kron reduction to generator internal nodes.
//!
//! Loads become constant admittances at their pre-fault voltage, each machine
//! is an EMF behind `j·xd_prime` attached to its terminal bus, and every
//! network bus (plus a fault node, if any) is eliminated.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{stamp_pi, BusSystem, PowerFlowSolution, FAULT_ADMITTANCE};
use crate::error::{Error, Result};

/// Fault positions accepted for line faults, as a fraction of line length
/// measured from the `from` bus.
pub const LINE_FAULT_POSITIONS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FaultSpec {
    /// Bolted three-phase fault at a bus.
    Bus { bus: u32 },
    /// Bolted three-phase fault part-way along a line.
    Line { line: u32, position: f64 },
}

impl FaultSpec {
    pub fn validate(&self, sys: &BusSystem) -> Result<()> {
        match *self {
            FaultSpec::Bus { bus } => {
                if sys.bus_index(bus).is_none() {
                    return Err(Error::invalid(format!("fault on nonexistent bus {bus}")));
                }
            }
            FaultSpec::Line { line, position } => {
                if sys.line(line).is_none() {
                    return Err(Error::invalid(format!("fault on nonexistent line {line}")));
                }
                if !LINE_FAULT_POSITIONS.contains(&position) {
                    return Err(Error::invalid(format!(
                        "line fault position {position} not one of {LINE_FAULT_POSITIONS:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    PreFault,
    FaultOn,
    PostFault,
}

/// Which network to reduce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NetworkStage {
    PreFault,
    FaultOn(FaultSpec),
    /// Faulted line removed, or fault admittance removed for bus faults.
    PostFault(FaultSpec),
}

impl NetworkStage {
    pub fn topology(&self) -> Topology {
        match self {
            NetworkStage::PreFault => Topology::PreFault,
            NetworkStage::FaultOn(_) => Topology::FaultOn,
            NetworkStage::PostFault(_) => Topology::PostFault,
        }
    }
}

/// Result of eliminating nodes from an admittance matrix.
#[derive(Debug, Clone)]
pub struct KronReduction {
    /// `Y_kk - Y_ke Y_ee^-1 Y_ek` over the kept nodes.
    pub reduced: DMatrix<Complex64>,
    /// `-Y_ee^-1 Y_ek`: voltages of eliminated nodes from kept-node voltages,
    /// valid when eliminated nodes carry no injection.
    pub recovery: DMatrix<Complex64>,
}

/// Eliminates every node not listed in `keep` (order of `keep` is preserved).
pub fn kron_reduce(y: &DMatrix<Complex64>, keep: &[usize]) -> Result<KronReduction> {
    let n = y.nrows();
    if y.ncols() != n {
        return Err(Error::Shape(format!("admittance matrix is {}x{}", n, y.ncols())));
    }
    let mut kept = vec![false; n];
    for &k in keep {
        if k >= n || kept[k] {
            return Err(Error::invalid(format!("bad keep index {k}")));
        }
        kept[k] = true;
    }
    let elim: Vec<usize> = (0..n).filter(|&i| !kept[i]).collect();
    let y_kk = DMatrix::from_fn(keep.len(), keep.len(), |i, j| y[(keep[i], keep[j])]);
    if elim.is_empty() {
        return Ok(KronReduction {
            reduced: y_kk,
            recovery: DMatrix::zeros(0, keep.len()),
        });
    }
    let y_ke = DMatrix::from_fn(keep.len(), elim.len(), |i, j| y[(keep[i], elim[j])]);
    let y_ek = DMatrix::from_fn(elim.len(), keep.len(), |i, j| y[(elim[i], keep[j])]);
    let y_ee = DMatrix::from_fn(elim.len(), elim.len(), |i, j| y[(elim[i], elim[j])]);

    let singular = || Error::SingularNetwork("eliminated sub-matrix is singular".into());
    let x = y_ee.lu().solve(&y_ek).ok_or_else(singular)?;
    if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(singular());
    }
    let reduced = y_kk - y_ke * &x;
    Ok(KronReduction {
        reduced,
        recovery: -x,
    })
}

/// Generator-internal-node network for one stage of a contingency.
#[derive(Debug, Clone)]
pub struct ReducedNetwork {
    pub topology: Topology,
    /// Admittance among generator internal nodes, ordered like `BusSystem::generators`.
    pub y: DMatrix<Complex64>,
    /// Internal EMF per generator from the pre-fault power flow.
    pub emf: Vec<Complex64>,
    /// Maps internal EMFs to generator terminal voltages: `V_t = T E`.
    pub terminal: DMatrix<Complex64>,
}

impl ReducedNetwork {
    pub fn generator_count(&self) -> usize {
        self.y.nrows()
    }

    /// Largest relative asymmetry `|Y_ij - Y_ji| / max|Y|`.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.y.iter().map(|v| v.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let n = self.y.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.y[(i, j)] - self.y[(j, i)]).norm() / scale);
            }
        }
        worst
    }
}

/// Internal EMF `E = V_t + j·xd'·I_g` of every machine.
pub fn internal_emfs(sys: &BusSystem, pf: &PowerFlowSolution) -> Vec<Complex64> {
    sys.generators
        .iter()
        .enumerate()
        .map(|(g, gen)| {
            let vt = pf.voltages[sys.bus_index(gen.bus).unwrap()];
            let current = (Complex64::new(pf.gen_p[g], pf.gen_q[g]) / vt).conj();
            vt + Complex64::new(0.0, gen.xd_prime) * current
        })
        .collect()
}

/// Full nodal admittance matrix for a stage: buses, optional fault node,
/// then generator internal nodes. Returns the matrix and the number of
/// network nodes preceding the internal nodes.
pub(crate) fn augmented_admittance(
    sys: &BusSystem,
    pf: &PowerFlowSolution,
    stage: NetworkStage,
) -> Result<(DMatrix<Complex64>, usize)> {
    let nb = sys.buses.len();
    let ng = sys.generators.len();
    let (skip_line, split) = match stage {
        NetworkStage::PreFault => (None, None),
        NetworkStage::FaultOn(fault) => {
            fault.validate(sys)?;
            match fault {
                FaultSpec::Bus { .. } => (None, None),
                FaultSpec::Line { line, position } => (Some(line), Some((line, position))),
            }
        }
        NetworkStage::PostFault(fault) => {
            fault.validate(sys)?;
            match fault {
                FaultSpec::Bus { .. } => (None, None),
                FaultSpec::Line { line, .. } => (Some(line), None),
            }
        }
    };
    let extra = usize::from(split.is_some());
    let net = nb + extra;
    let mut y = DMatrix::zeros(net + ng, net + ng);
    sys.stamp_branches(&mut y, skip_line);

    if let Some((line_id, pos)) = split {
        let line = sys.line(line_id).unwrap();
        let (f, t) = (sys.bus_index(line.from).unwrap(), sys.bus_index(line.to).unwrap());
        let z = Complex64::new(line.r, line.x);
        let m = nb;
        stamp_pi(&mut y, f, m, z * pos, line.b * pos);
        stamp_pi(&mut y, m, t, z * (1.0 - pos), line.b * (1.0 - pos));
        y[(m, m)] += Complex64::new(FAULT_ADMITTANCE, 0.0);
    }
    if let NetworkStage::FaultOn(FaultSpec::Bus { bus }) = stage {
        let i = sys.bus_index(bus).unwrap();
        y[(i, i)] += Complex64::new(FAULT_ADMITTANCE, 0.0);
    }

    for i in 0..nb {
        let load = pf.load(sys, i);
        if load != Complex64::new(0.0, 0.0) {
            let vm2 = pf.voltages[i].norm_sqr();
            y[(i, i)] += load.conj() / vm2;
        }
    }
    for (g, gen) in sys.generators.iter().enumerate() {
        let bi = sys.bus_index(gen.bus).unwrap();
        let gi = net + g;
        let yg = Complex64::new(0.0, gen.xd_prime).inv();
        y[(gi, gi)] += yg;
        y[(bi, bi)] += yg;
        y[(gi, bi)] -= yg;
        y[(bi, gi)] -= yg;
    }
    Ok((y, net))
}

/// Builds the Kron-reduced internal-node network for one stage.
pub fn build_reduced(sys: &BusSystem, pf: &PowerFlowSolution, stage: NetworkStage) -> Result<ReducedNetwork> {
    let ng = sys.generators.len();
    let (y, net) = augmented_admittance(sys, pf, stage)?;
    let keep: Vec<usize> = (net..net + ng).collect();
    let red = kron_reduce(&y, &keep)?;
    // Eliminated nodes are 0..net in order, so bus i is recovery row i.
    let gen_rows = sys.generator_bus_indices();
    let terminal = DMatrix::from_fn(ng, ng, |g, k| red.recovery[(gen_rows[g], k)]);
    Ok(ReducedNetwork {
        topology: stage.topology(),
        y: red.reduced,
        emf: internal_emfs(sys, pf),
        terminal,
    })
}
