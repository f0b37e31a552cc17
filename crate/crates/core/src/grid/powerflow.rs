//! Newton-Raphson AC power flow in polar coordinates.
//!
//! Flat start; the slack bus absorbs the active and reactive imbalance and PV
//! buses hold their voltage setpoint without reactive limits.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{BusKind, BusSystem};
use crate::error::{Error, Result};

pub const PF_TOLERANCE: f64 = 1e-8;
pub const PF_MAX_ITERATIONS: usize = 50;

/// Admissible range of the uniform load scaling factor.
pub const LOAD_SCALE_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub load_scale: f64,
    /// Complex bus voltages in p.u., indexed like `BusSystem::buses`.
    pub voltages: Vec<Complex64>,
    /// Generator active power injection (p.u.), indexed like `BusSystem::generators`.
    pub gen_p: Vec<f64>,
    pub gen_q: Vec<f64>,
    pub iterations: usize,
    /// Infinity norm of the final power mismatch.
    pub mismatch: f64,
}

impl PowerFlowSolution {
    /// Scaled load of bus `i` in p.u. (P + jQ).
    pub fn load(&self, sys: &BusSystem, i: usize) -> Complex64 {
        let bus = &sys.buses[i];
        Complex64::new(bus.pd_mw, bus.qd_mvar) * self.load_scale / sys.base_mva
    }

    /// Per-bus net injection mismatch `S_spec - V conj(Y V)` for this solution,
    /// where the specification uses the solved generator outputs.
    pub fn balance_residual(&self, sys: &BusSystem) -> Vec<Complex64> {
        let y = sys.admittance_matrix();
        let v = DVector::from_vec(self.voltages.clone());
        let current = &y * &v;
        let mut spec: Vec<Complex64> = (0..sys.buses.len()).map(|i| -self.load(sys, i)).collect();
        for (g, gen) in sys.generators.iter().enumerate() {
            let bi = sys.bus_index(gen.bus).unwrap();
            spec[bi] += Complex64::new(self.gen_p[g], self.gen_q[g]);
        }
        (0..sys.buses.len())
            .map(|i| spec[i] - v[i] * current[i].conj())
            .collect()
    }
}

/// Solves the AC power flow with all loads scaled by `load_scale`.
pub fn solve_power_flow(sys: &BusSystem, load_scale: f64) -> Result<PowerFlowSolution> {
    let (lo, hi) = LOAD_SCALE_RANGE;
    if !(lo..=hi).contains(&load_scale) {
        return Err(Error::invalid(format!(
            "load_scale {load_scale} outside [{lo}, {hi}]"
        )));
    }
    let n = sys.buses.len();
    let y = sys.admittance_matrix();
    let base = sys.base_mva;

    let mut p_spec = vec![0.0; n];
    let mut q_spec = vec![0.0; n];
    for (i, bus) in sys.buses.iter().enumerate() {
        p_spec[i] = -bus.pd_mw * load_scale / base;
        q_spec[i] = -bus.qd_mvar * load_scale / base;
    }
    for gen in &sys.generators {
        let bi = sys.bus_index(gen.bus).unwrap();
        p_spec[bi] += gen.pg_mw / base;
    }

    // Unknown ordering: angles of all non-slack buses, then magnitudes of PQ buses.
    let ang: Vec<usize> = (0..n).filter(|&i| sys.buses[i].kind != BusKind::Slack).collect();
    let mag: Vec<usize> = (0..n).filter(|&i| sys.buses[i].kind == BusKind::Pq).collect();
    let mut ang_pos = vec![usize::MAX; n];
    let mut mag_pos = vec![usize::MAX; n];
    for (k, &i) in ang.iter().enumerate() {
        ang_pos[i] = k;
    }
    for (k, &i) in mag.iter().enumerate() {
        mag_pos[i] = ang.len() + k;
    }
    let dim = ang.len() + mag.len();

    let mut vm: Vec<f64> = sys
        .buses
        .iter()
        .map(|b| if b.kind == BusKind::Pq { 1.0 } else { b.vm })
        .collect();
    let mut va = vec![0.0; n];

    let mut iterations = 0;
    loop {
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let (p, q) = injections(&y, &v);

        let mut f = DVector::zeros(dim);
        for (k, &i) in ang.iter().enumerate() {
            f[k] = p_spec[i] - p[i];
        }
        for (k, &i) in mag.iter().enumerate() {
            f[ang.len() + k] = q_spec[i] - q[i];
        }
        let mismatch = f.amax();
        if !mismatch.is_finite() {
            return Err(Error::NonConvergence { iterations, mismatch });
        }
        if mismatch < PF_TOLERANCE {
            return Ok(finish(sys, &y, v, load_scale, iterations, mismatch));
        }
        if iterations == PF_MAX_ITERATIONS {
            return Err(Error::NonConvergence { iterations, mismatch });
        }
        iterations += 1;

        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            let (ri_p, ri_q) = (ang_pos[i], mag_pos[i]);
            if ri_p == usize::MAX && ri_q == usize::MAX {
                continue;
            }
            for k in 0..n {
                let yik = y[(i, k)];
                if yik == Complex64::new(0.0, 0.0) && i != k {
                    continue;
                }
                let (g, b) = (yik.re, yik.im);
                let (ca, cm) = (ang_pos[k], mag_pos[k]);
                // dP/dθ, dP/d|V|, dQ/dθ, dQ/d|V|
                let (dp_da, dp_dv, dq_da, dq_dv) = if i == k {
                    (
                        -q[i] - b * vm[i] * vm[i],
                        p[i] / vm[i] + g * vm[i],
                        p[i] - g * vm[i] * vm[i],
                        q[i] / vm[i] - b * vm[i],
                    )
                } else {
                    let th = va[i] - va[k];
                    let (s, c) = th.sin_cos();
                    (
                        vm[i] * vm[k] * (g * s - b * c),
                        vm[i] * (g * c + b * s),
                        -vm[i] * vm[k] * (g * c + b * s),
                        vm[i] * (g * s - b * c),
                    )
                };
                if ri_p != usize::MAX {
                    if ca != usize::MAX {
                        jac[(ri_p, ca)] = dp_da;
                    }
                    if cm != usize::MAX {
                        jac[(ri_p, cm)] = dp_dv;
                    }
                }
                if ri_q != usize::MAX {
                    if ca != usize::MAX {
                        jac[(ri_q, ca)] = dq_da;
                    }
                    if cm != usize::MAX {
                        jac[(ri_q, cm)] = dq_dv;
                    }
                }
            }
        }
        let dx = jac
            .lu()
            .solve(&f)
            .ok_or_else(|| Error::NonConvergence { iterations, mismatch })?;
        for (k, &i) in ang.iter().enumerate() {
            va[i] += dx[k];
        }
        for (k, &i) in mag.iter().enumerate() {
            vm[i] += dx[ang.len() + k];
        }
    }
}

fn injections(y: &DMatrix<Complex64>, v: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let mut current = Complex64::new(0.0, 0.0);
        for k in 0..n {
            current += y[(i, k)] * v[k];
        }
        let s = v[i] * current.conj();
        p[i] = s.re;
        q[i] = s.im;
    }
    (p, q)
}

fn finish(
    sys: &BusSystem,
    y: &DMatrix<Complex64>,
    voltages: Vec<Complex64>,
    load_scale: f64,
    iterations: usize,
    mismatch: f64,
) -> PowerFlowSolution {
    let (p, q) = injections(y, &voltages);
    let base = sys.base_mva;
    let mut gen_p = Vec::with_capacity(sys.generators.len());
    let mut gen_q = Vec::with_capacity(sys.generators.len());
    for gen in &sys.generators {
        let i = sys.bus_index(gen.bus).unwrap();
        let bus = &sys.buses[i];
        gen_p.push(p[i] + bus.pd_mw * load_scale / base);
        gen_q.push(q[i] + bus.qd_mvar * load_scale / base);
    }
    PowerFlowSolution {
        load_scale,
        voltages,
        gen_p,
        gen_q,
        iterations,
        mismatch,
    }
}
