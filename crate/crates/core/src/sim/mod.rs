//! Multi-machine swing-equation simulation through a fault sequence.
//!
//! Each machine follows the classical model
//!
//! ```text
//! dδ/dt  = Δω
//! dΔω/dt = ω_s / (2H) · (Pm − Pe(δ))
//! ```
//!
//! with `Pe` taken from the Kron-reduced network of the active stage
//! (pre-fault, fault-on, post-fault). The state is integrated with fixed-step
//! RK4 and sampled once per cycle.

pub mod rk4;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_reduced, solve_power_flow, BusSystem, FaultSpec, NetworkStage, ReducedNetwork};
pub use rk4::Rk4;

pub const SAMPLE_DT: f64 = 1.0 / 60.0;
pub const DURATION: f64 = 20.0;
pub const FAULT_ON_TIME: f64 = 1.0;
pub const FAULT_CYCLES: u32 = 16;
pub const SUBSTEPS: usize = 4;
/// Rotor-angle separation (degrees) beyond which synchronism is lost.
pub const INSTABILITY_THRESHOLD_DEG: f64 = 360.0;

/// Number of per-generator parameters recorded at every sample.
pub const PARAM_COUNT: usize = 5;

/// Recorded parameters, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameter {
    /// Generator terminal current magnitude, p.u.
    CurrentMagnitude = 0,
    /// Generator terminal voltage magnitude, p.u.
    VoltageMagnitude = 1,
    /// Rotor angle relative to the centre of inertia, degrees (unwrapped).
    RotorAngle = 2,
    /// Terminal voltage phase angle relative to the centre of inertia, degrees in (-180, 180].
    VoltageAngle = 3,
    /// Rotor speed expressed as electrical frequency, Hz.
    Frequency = 4,
}

impl Parameter {
    pub const ALL: [Parameter; PARAM_COUNT] = [
        Parameter::CurrentMagnitude,
        Parameter::VoltageMagnitude,
        Parameter::RotorAngle,
        Parameter::VoltageAngle,
        Parameter::Frequency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Parameter::CurrentMagnitude => "current_pu",
            Parameter::VoltageMagnitude => "voltage_pu",
            Parameter::RotorAngle => "rotor_angle_deg",
            Parameter::VoltageAngle => "voltage_angle_deg",
            Parameter::Frequency => "frequency_hz",
        }
    }
}

/// One contingency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub client_id: u8,
    pub load_scale: f64,
    pub fault: Option<FaultSpec>,
    pub t_fault_on: f64,
    pub fault_cycles: u32,
    pub dt: f64,
    pub duration: f64,
    /// Reserved for measurement noise; unused.
    pub seed: u64,
}

impl Scenario {
    pub fn new(client_id: u8, load_scale: f64, fault: Option<FaultSpec>) -> Self {
        Scenario {
            client_id,
            load_scale,
            fault_cycles: if fault.is_some() { FAULT_CYCLES } else { 0 },
            fault,
            t_fault_on: FAULT_ON_TIME,
            dt: SAMPLE_DT,
            duration: DURATION,
            seed: 0,
        }
    }

    pub fn with_fault_cycles(mut self, cycles: u32) -> Self {
        self.fault_cycles = cycles;
        self
    }

    fn ratio(a: f64, b: f64, what: &str) -> Result<usize> {
        let r = a / b;
        let n = r.round();
        if !(n >= 0.0) || (r - n).abs() > 1e-9 {
            return Err(Error::invalid(format!("{what} is not an integral number of samples ({r})")));
        }
        Ok(n as usize)
    }

    pub fn steps(&self) -> Result<usize> {
        Self::ratio(self.duration, self.dt, "duration")
    }

    pub fn fault_on_index(&self) -> Result<usize> {
        Self::ratio(self.t_fault_on, self.dt, "fault-on time")
    }

    pub fn fault_clear_index(&self) -> Result<usize> {
        // One sample per cycle.
        Ok(self.fault_on_index()? + self.fault_cycles as usize)
    }

    pub fn validate(&self, sys: &BusSystem) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        let steps = self.steps()?;
        let clear = self.fault_clear_index()?;
        if clear >= steps {
            return Err(Error::invalid("fault clears after the end of the simulation"));
        }
        match self.fault {
            Some(fault) => fault.validate(sys),
            None if self.fault_cycles != 0 => Err(Error::invalid("fault_cycles > 0 without a fault")),
            None => Ok(()),
        }
    }
}

/// Simulated per-generator time series for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: usize,
    pub generators: usize,
    /// Row-major `[step][generator][parameter]`.
    pub series: Vec<f64>,
    pub fault_on_index: usize,
    pub fault_clear_index: usize,
    pub instability_index: Option<usize>,
    /// Largest pairwise rotor-angle separation from fault inception on, degrees.
    pub max_separation_deg: f64,
}

impl Trajectory {
    #[inline]
    pub fn get(&self, step: usize, gen: usize, param: Parameter) -> f64 {
        self.series[(step * self.generators + gen) * PARAM_COUNT + param as usize]
    }

    /// The `[generator][parameter]` block of one sample.
    pub fn sample(&self, step: usize) -> &[f64] {
        let w = self.generators * PARAM_COUNT;
        &self.series[step * w..(step + 1) * w]
    }

    /// Rotor angles in degrees, row-major `[step][generator]`.
    pub fn rotor_angles(&self) -> Vec<f64> {
        (0..self.steps)
            .flat_map(|k| (0..self.generators).map(move |g| (k, g)))
            .map(|(k, g)| self.get(k, g, Parameter::RotorAngle))
            .collect()
    }
}

/// First step at which the largest pairwise rotor-angle separation exceeds
/// 360°. `angles` is row-major `[step][generator]` in degrees.
pub fn detect_instability(angles: &[f64], generators: usize) -> Option<usize> {
    if generators == 0 {
        return None;
    }
    angles
        .chunks_exact(generators)
        .position(|row| max_separation(row) > INSTABILITY_THRESHOLD_DEG)
}

/// `max_i a_i − min_j a_j`, i.e. the largest pairwise separation.
pub fn max_separation(row: &[f64]) -> f64 {
    let (lo, hi) = row
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    hi - lo
}

pub const MAX_MACHINES: usize = 64;

/// Swing dynamics of a set of machines on one reduced network.
///
/// State layout: `[δ_1..δ_n, Δω_1..Δω_n]` with angles in radians and speed
/// deviations in rad/s.
#[derive(Debug, Clone)]
pub struct SwingModel {
    n: usize,
    /// `|E_i||E_j| G_ij`
    g: Vec<f64>,
    /// `|E_i||E_j| B_ij`
    b: Vec<f64>,
    pm: Vec<f64>,
    /// `ω_s / (2H)`
    accel: Vec<f64>,
}

impl SwingModel {
    pub fn new(y: &DMatrix<Complex64>, emf_magnitude: &[f64], h: &[f64], pm: &[f64], omega_s: f64) -> Self {
        let n = emf_magnitude.len();
        assert!(n <= MAX_MACHINES, "at most {MAX_MACHINES} machines supported");
        let mut g = vec![0.0; n * n];
        let mut b = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let s = emf_magnitude[i] * emf_magnitude[j];
                g[i * n + j] = s * y[(i, j)].re;
                b[i * n + j] = s * y[(i, j)].im;
            }
        }
        SwingModel {
            n,
            g,
            b,
            pm: pm.to_vec(),
            accel: h.iter().map(|h| omega_s / (2.0 * h)).collect(),
        }
    }

    pub fn set_mechanical_power(&mut self, pm: &[f64]) {
        self.pm.copy_from_slice(pm);
    }

    /// Electrical power output of every machine at rotor angles `delta`.
    pub fn electrical_power(&self, delta: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut sc = [(0.0, 0.0); MAX_MACHINES];
        let sc = &mut sc[..n];
        for (i, d) in delta.iter().enumerate() {
            sc[i] = d.sin_cos();
        }
        for i in 0..n {
            let (si, ci) = sc[i];
            let mut pe = 0.0;
            for j in 0..n {
                let (sj, cj) = sc[j];
                // cos(δi−δj), sin(δi−δj)
                let c = ci * cj + si * sj;
                let s = si * cj - ci * sj;
                pe += self.g[i * n + j] * c + self.b[i * n + j] * s;
            }
            out[i] = pe;
        }
    }

    pub fn rhs(&self, state: &[f64], d: &mut [f64]) {
        let n = self.n;
        let (delta, omega) = state.split_at(n);
        let (d_delta, d_omega) = d.split_at_mut(n);
        d_delta.copy_from_slice(omega);
        self.electrical_power(delta, d_omega);
        for i in 0..n {
            d_omega[i] = self.accel[i] * (self.pm[i] - d_omega[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// RK4 steps per sample interval.
    pub substeps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { substeps: SUBSTEPS }
    }
}

pub fn simulate(sys: &BusSystem, scen: &Scenario) -> Result<Trajectory> {
    simulate_with(sys, scen, SimOptions::default())
}

struct Stage {
    model: SwingModel,
    terminal: DMatrix<Complex64>,
}

pub fn simulate_with(sys: &BusSystem, scen: &Scenario, opts: SimOptions) -> Result<Trajectory> {
    scen.validate(sys)?;
    if opts.substeps == 0 {
        return Err(Error::invalid("substeps must be at least 1"));
    }
    let steps = scen.steps()?;
    let on = scen.fault_on_index()?;
    let clear = scen.fault_clear_index()?;
    let pf = solve_power_flow(sys, scen.load_scale)?;

    let ng = sys.generators.len();
    let omega_s = 2.0 * std::f64::consts::PI * sys.frequency_hz;
    let h: Vec<f64> = sys.generators.iter().map(|g| g.h).collect();
    let xd: Vec<f64> = sys.generators.iter().map(|g| g.xd_prime).collect();

    let pre = build_reduced(sys, &pf, NetworkStage::PreFault)?;
    let emf_mag: Vec<f64> = pre.emf.iter().map(|e| e.norm()).collect();
    let delta0: Vec<f64> = pre.emf.iter().map(|e| e.arg()).collect();

    // Mechanical power balances the pre-fault electrical output exactly.
    let mut pm = vec![0.0; ng];
    SwingModel::new(&pre.y, &emf_mag, &h, &vec![0.0; ng], omega_s).electrical_power(&delta0, &mut pm);

    let make = |net: ReducedNetwork| Stage {
        model: SwingModel::new(&net.y, &emf_mag, &h, &pm, omega_s),
        terminal: net.terminal,
    };
    let pre = make(pre);
    let (fault_on, post) = match scen.fault {
        Some(fault) if scen.fault_cycles > 0 => (
            Some(make(build_reduced(sys, &pf, NetworkStage::FaultOn(fault))?)),
            Some(make(build_reduced(sys, &pf, NetworkStage::PostFault(fault))?)),
        ),
        _ => (None, None),
    };
    let stage_at = |k: usize| -> &Stage {
        match (&fault_on, &post) {
            (Some(f), Some(p)) => {
                if k < on {
                    &pre
                } else if k < clear {
                    f
                } else {
                    p
                }
            }
            _ => &pre,
        }
    };

    let h_total: f64 = h.iter().sum();
    let mut state = vec![0.0; 2 * ng];
    state[..ng].copy_from_slice(&delta0);
    let mut series = vec![0.0; steps * ng * PARAM_COUNT];
    let mut rk = Rk4::new(2 * ng);
    let mut emf = vec![Complex64::new(0.0, 0.0); ng];
    let mut last_finite = None;

    for k in 0..steps {
        let stage = stage_at(k);
        if state.iter().all(|v| v.is_finite()) {
            last_finite = Some(k);
            let coi = (0..ng).map(|i| h[i] * state[i]).sum::<f64>() / h_total;
            for i in 0..ng {
                emf[i] = Complex64::from_polar(emf_mag[i], state[i]);
            }
            let row = &mut series[k * ng * PARAM_COUNT..(k + 1) * ng * PARAM_COUNT];
            for i in 0..ng {
                let mut vt = Complex64::new(0.0, 0.0);
                for j in 0..ng {
                    vt += stage.terminal[(i, j)] * emf[j];
                }
                let current = (emf[i] - vt) / Complex64::new(0.0, xd[i]);
                let out = &mut row[i * PARAM_COUNT..(i + 1) * PARAM_COUNT];
                out[Parameter::CurrentMagnitude as usize] = current.norm();
                out[Parameter::VoltageMagnitude as usize] = vt.norm();
                out[Parameter::RotorAngle as usize] = (state[i] - coi).to_degrees();
                out[Parameter::VoltageAngle as usize] = wrap_degrees((vt.arg() - coi).to_degrees());
                out[Parameter::Frequency as usize] =
                    sys.frequency_hz + state[ng + i] / (2.0 * std::f64::consts::PI);
            }
        } else {
            // Hold the last finite sample once the state has blown up.
            let w = ng * PARAM_COUNT;
            let prev = last_finite.expect("initial state is finite");
            series.copy_within(prev * w..(prev + 1) * w, k * w);
            continue;
        }
        if k + 1 < steps {
            let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| stage.model.rhs(y, dy);
            rk.integrate(&mut f, k as f64 * scen.dt, &mut state, scen.dt, opts.substeps);
        }
    }

    let angles = rotor_block(&series, steps, ng);
    let mut instability_index = detect_instability(&angles, ng);
    if let Some(last) = last_finite {
        if last + 1 < steps && instability_index.is_none() {
            log::warn!("state became non-finite after step {last}; reporting instability there");
            instability_index = Some(last);
        }
    }
    let max_separation_deg = angles
        .chunks_exact(ng)
        .skip(on)
        .map(max_separation)
        .fold(0.0, f64::max);

    Ok(Trajectory {
        steps,
        generators: ng,
        series,
        fault_on_index: on,
        fault_clear_index: clear,
        instability_index,
        max_separation_deg,
    })
}

fn rotor_block(series: &[f64], steps: usize, ng: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps * ng);
    for k in 0..steps {
        for g in 0..ng {
            out.push(series[(k * ng + g) * PARAM_COUNT + Parameter::RotorAngle as usize]);
        }
    }
    out
}

fn wrap_degrees(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}
