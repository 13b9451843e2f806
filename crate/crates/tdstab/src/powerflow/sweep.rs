//! Radial feeder solution by forward-backward sweep.

use std::collections::BTreeMap;

use super::{
    assemble_feeder, branch_admittance, add_injection, Circuit, CircuitBranch, FeederMethod,
    PowerFlowError, SolveResult, SolverOptions,
};
use crate::network::{scale_feeder_loading, Feeder, LoadModel, Shunt};
use crate::phasor::Phasor3;

/// Voltages of one feeder instance (root included) after a converged solve.
#[derive(Clone, Debug)]
pub(crate) struct FeederSolution {
    pub voltages: BTreeMap<String, Phasor3>,
    pub iterations: usize,
    pub mismatch: f64,
}

fn feeder_circuit(f: &Feeder, shunts: &[Shunt], v_root: Phasor3) -> Circuit {
    let mut ckt = Circuit::default();
    ckt.add_node(f.substation.clone(), Some(v_root));
    for n in &f.nodes {
        ckt.add_node(n.clone(), None);
    }
    for b in &f.branches {
        ckt.branches.push(CircuitBranch {
            from: ckt.index_of(&b.from).unwrap(),
            to: ckt.index_of(&b.to).unwrap(),
            y: branch_admittance(b, 1.0),
        });
    }
    for l in &f.loads {
        let n = ckt.index_of(&l.node).unwrap();
        add_injection(&mut ckt, n, l.s, l.model, 1.0);
    }
    for s in shunts.iter().filter(|s| f.nodes.contains(&s.node)) {
        let n = ckt.index_of(&s.node).unwrap();
        add_injection(&mut ckt, n, -s.s, LoadModel::ConstantPower, 1.0);
    }
    ckt
}

/// Runs at most `iters` sweeps; returns the last iterate and whether the
/// power mismatch reached `tol`.
fn sweep(
    f: &Feeder,
    ckt: &Circuit,
    v: &mut [Phasor3],
    iters: usize,
    tol: f64,
) -> (usize, f64, bool) {
    let tree = f.tree().expect("validated feeder is radial");
    // circuit indices: root = 0, nodes follow in `f.nodes` order
    let idx: Vec<(usize, usize, usize)> = tree
        .order
        .iter()
        .map(|(n, p, k)| (ckt.index_of(n).unwrap(), ckt.index_of(p).unwrap(), *k))
        .collect();
    let mut mismatch = ckt.power_mismatch(v);
    if mismatch <= tol {
        return (0, mismatch, true);
    }
    for it in 1..=iters {
        let mut branch_i: Vec<Phasor3> = (0..ckt.names.len())
            .map(|n| ckt.load_current(n, &v[n]))
            .collect();
        for &(child, parent, _) in idx.iter().rev() {
            let ic = branch_i[child];
            branch_i[parent] = branch_i[parent] + ic;
        }
        for &(child, parent, k) in &idx {
            v[child] = v[parent] - f.branches[k].z.mul_vec(&branch_i[child]);
        }
        mismatch = ckt.power_mismatch(v);
        if mismatch <= tol {
            return (it, mismatch, true);
        }
        if !mismatch.is_finite() {
            return (it, mismatch, false);
        }
    }
    (iters, mismatch, false)
}

pub(crate) fn solve_feeder_instance(
    f: &Feeder,
    shunts: &[Shunt],
    v_root: Phasor3,
    opts: &SolverOptions,
    warm: Option<&BTreeMap<String, Phasor3>>,
) -> Result<FeederSolution, PowerFlowError> {
    let ckt = feeder_circuit(f, shunts, v_root);
    let start: Vec<Phasor3> = ckt
        .names
        .iter()
        .enumerate()
        .map(|(k, n)| {
            if k == 0 {
                v_root
            } else {
                warm.and_then(|w| w.get(n)).copied().unwrap_or(v_root)
            }
        })
        .collect();
    let stage = format!("feeder {}", f.id);
    let mut v = start.clone();
    let (iterations, mismatch, newton_from) = match opts.feeder_method {
        FeederMethod::Newton => (0, f64::INFINITY, Some(start)),
        FeederMethod::Sweep | FeederMethod::SweepThenNewton => {
            let budget = if opts.feeder_method == FeederMethod::Sweep {
                opts.max_iter
            } else {
                opts.sweep_iters
            };
            let (it, mis, ok) = sweep(f, &ckt, &mut v, budget, opts.tol);
            if ok {
                (it, mis, None)
            } else if opts.feeder_method == FeederMethod::Sweep {
                return Err(PowerFlowError::NotConverged {
                    stage,
                    iterations: it,
                    mismatch: mis,
                });
            } else {
                let sane = v.iter().all(|p| p.is_finite() && p.min_magnitude() >= opts.v_min);
                (it, mis, Some(if sane { v.clone() } else { start }))
            }
        }
    };
    let (voltages, iterations, mismatch) = match newton_from {
        None => (v, iterations, mismatch),
        Some(v0) => {
            let out = ckt
                .newton(&v0, opts.newton())
                .map_err(|e| PowerFlowError::from_newton(&stage, e))?;
            (out.voltages, iterations + out.iterations, out.mismatch)
        }
    };
    if let Some((k, m)) = voltages
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, p)| (k, p.min_magnitude()))
        .find(|(_, m)| *m < opts.v_min)
    {
        return Err(PowerFlowError::Collapse {
            stage,
            node: ckt.names[k].clone(),
            magnitude: m,
        });
    }
    Ok(FeederSolution {
        voltages: ckt.names.iter().cloned().zip(voltages).collect(),
        iterations,
        mismatch,
    })
}

/// Solves a feeder whose loads are already at the desired level.
pub fn solve_feeder_scaled(
    f: &Feeder,
    substation_voltage: Phasor3,
    opts: &SolverOptions,
) -> Result<SolveResult, PowerFlowError> {
    let sol = solve_feeder_instance(f, &[], substation_voltage, opts, None)?;
    Ok(assemble_feeder(f, 1.0, &sol))
}

/// Solves one feeder at loading `lambda` from a fixed substation voltage.
pub fn solve_feeder(
    f: &Feeder,
    substation_voltage: Phasor3,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<SolveResult, PowerFlowError> {
    let scaled = scale_feeder_loading(f, lambda, [1.0; 3])?;
    let sol = solve_feeder_instance(&scaled, &[], substation_voltage, opts, None)?;
    Ok(assemble_feeder(&scaled, lambda, &sol))
}
