//! Transmission ↔ distribution exchange loop: feeders are solved from the
//! current substation voltages, their aggregate per-phase power is handed to
//! the transmission solver, and the new substation voltages go back down.

use std::collections::BTreeMap;

use super::sweep::{solve_feeder_instance, FeederSolution};
use super::{
    assemble, feeder_flows, solve_transmission_warm, Injection, PowerFlowError, SolveResult,
    SolverOptions,
};
use crate::network::{scale_loading, Feeder, LoadModel, NetworkModel};
use crate::phasor::{C64, Phasor3};

/// Co-simulation solve at loading `lambda`.
pub fn cosim_solve(
    model: &NetworkModel,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<SolveResult, PowerFlowError> {
    let scaled = scale_loading(model, lambda)?;
    cosim_scaled(&scaled, lambda, opts, None)
}

struct Round {
    feeders: Vec<FeederSolution>,
    iterations: usize,
}

fn solve_feeders(
    model: &NetworkModel,
    sub_v: &BTreeMap<String, Phasor3>,
    opts: &SolverOptions,
    warm: &BTreeMap<String, Phasor3>,
) -> Result<Round, PowerFlowError> {
    let mut feeders = Vec::with_capacity(model.feeders.len());
    let mut iterations = 0;
    for f in &model.feeders {
        let sol = solve_feeder_instance(f, &model.shunts, sub_v[&f.substation], opts, Some(warm))?;
        iterations += sol.iterations;
        feeders.push(sol);
    }
    Ok(Round { feeders, iterations })
}

/// Per-phase fraction of a feeder's load power drawn by constant-impedance
/// loads.
fn impedance_share(f: &Feeder, v: &dyn Fn(&str) -> Phasor3) -> Phasor3 {
    let mut total = Phasor3::zero();
    let mut z = Phasor3::zero();
    for l in &f.loads {
        let vn = v(&l.node);
        let s = vn.power(&l.current(&vn));
        total = total + s;
        if l.model == LoadModel::ConstantImpedance {
            z = z + s;
        }
    }
    z.zip_with(&total, |z, t| {
        if t.norm() > 0.0 {
            C64::new((z.norm() / t.norm()).min(1.0), 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

pub(crate) fn cosim_scaled(
    scaled: &NetworkModel,
    lambda: f64,
    opts: &SolverOptions,
    warm: Option<&SolveResult>,
) -> Result<SolveResult, PowerFlowError> {
    let mut voltages: BTreeMap<String, Phasor3> = warm
        .map(|w| w.node_voltages.clone())
        .unwrap_or_default();
    let mut sub_v: BTreeMap<String, Phasor3> = scaled
        .substations
        .iter()
        .map(|s| {
            let v = voltages.get(s).copied().unwrap_or(scaled.source.voltage);
            (s.clone(), v)
        })
        .collect();
    let feeder_nodes: Vec<&str> = scaled
        .feeders
        .iter()
        .flat_map(|f| f.nodes.iter().map(String::as_str))
        .collect();
    let fixed_injections: Vec<Injection> = scaled
        .shunts
        .iter()
        .filter(|s| !feeder_nodes.contains(&s.node.as_str()))
        .map(|s| Injection::constant_power(s.node.clone(), -s.s))
        .collect();

    let mut iterations = 0;
    let mut rounds = 0;
    loop {
        if rounds >= opts.max_rounds {
            return Err(PowerFlowError::NotConverged {
                stage: "exchange loop".into(),
                iterations: rounds,
                mismatch: f64::NAN,
            });
        }
        rounds += 1;
        let round = solve_feeders(scaled, &sub_v, opts, &voltages)?;
        iterations += round.iterations;
        // Each feeder's demand is handed over as per-phase (P, Q). The share
        // drawn by constant-impedance loads is modelled as an admittance at
        // the current substation voltage, the rest as constant power; both
        // reproduce the same (P, Q) at that voltage.
        let mut demand: BTreeMap<&str, (Phasor3, Phasor3)> = BTreeMap::new();
        for (f, sol) in scaled.feeders.iter().zip(&round.feeders) {
            let v = |n: &str| sol.voltages[n];
            let (_, head, _) = feeder_flows(f, &v);
            let vs = v(&f.substation);
            let s = vs.power(&head) * f64::from(f.multiplicity);
            let share = impedance_share(f, &v);
            let s_z = s.zip_with(&share, |s, k| s * k);
            let e = demand.entry(f.substation.as_str()).or_default();
            e.0 = e.0 + (s - s_z);
            e.1 = e.1 + s_z.zip_with(&vs, |s, v| s / v.norm_sqr());
            voltages.extend(sol.voltages.iter().map(|(k, v)| (k.clone(), *v)));
        }
        let mut injections = fixed_injections.clone();
        for (bus, (s_p, s_z)) in demand {
            injections.push(Injection::constant_power(bus, s_p));
            injections.push(Injection {
                bus: bus.to_string(),
                s: s_z,
                model: LoadModel::ConstantImpedance,
            });
        }
        let tn = solve_transmission_warm(
            &scaled.transmission,
            &scaled.source,
            &injections,
            opts,
            Some(&voltages),
        )?;
        iterations += tn.iterations;
        let change = sub_v
            .iter()
            .map(|(s, v)| tn.node_voltages[s].max_abs_diff(v))
            .fold(0.0, f64::max);
        voltages.extend(tn.node_voltages);
        for (s, v) in sub_v.iter_mut() {
            *v = voltages[s];
        }
        if change <= opts.exchange_tol {
            break;
        }
    }

    // final feeder pass at the converged substation voltages
    let round = solve_feeders(scaled, &sub_v, opts, &voltages)?;
    iterations += round.iterations;
    for sol in &round.feeders {
        voltages.extend(sol.voltages.iter().map(|(k, v)| (k.clone(), *v)));
    }
    let mismatch = round.feeders.iter().map(|s| s.mismatch).fold(0.0, f64::max);
    let known: Vec<String> = scaled
        .transmission_buses()
        .into_iter()
        .chain(feeder_nodes.iter().map(|s| s.to_string()))
        .collect();
    voltages.retain(|k, _| known.contains(k));
    Ok(assemble(scaled, lambda, voltages, iterations, rounds, mismatch))
}
