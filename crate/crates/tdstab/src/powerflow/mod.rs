//! Unbalanced three-phase steady-state solvers.
//!
//! * [`solve_feeder`]: radial feeder from a known substation voltage
//!   (forward-backward sweep, finished by Newton when the sweep stalls).
//! * [`solve_transmission`]: transmission network with per-phase injections.
//! * [`cosim_solve`]: transmission ↔ distribution exchange loop.
//! * [`monolithic_solve`]: one Newton solve over the whole network.
//! * [`find_lambda_max`]: continuation in the load scaling factor λ.

mod circuit;
mod continuation;
mod cosim;
mod sweep;
mod whatif;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::network::{
    scale_loading, Branch, Feeder, LoadModel, NetworkError, NetworkModel, Shunt, Source,
};
use crate::phasor::{C64, Phasor3};

pub(crate) use circuit::{Circuit, CircuitBranch, NewtonFailure, NewtonSettings};
pub use continuation::{find_lambda_max, find_lambda_max_with, NoseOptions, NoseResult};
pub use cosim::cosim_solve;
pub use sweep::{solve_feeder, solve_feeder_scaled};
pub use whatif::{LineImpedance, add_line, apply_var_support, run_whatif, Intervention, WhatIfRow, WhatIfTable};

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("{stage} did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    NotConverged {
        stage: String,
        iterations: usize,
        mismatch: f64,
    },
    #[error("{stage}: voltage collapse at {node} (|V| = {magnitude:.3} p.u.)")]
    Collapse {
        stage: String,
        node: String,
        magnitude: f64,
    },
    #[error("base case (lambda = {lambda}) diverged: {reason}")]
    BaseCaseDiverged { lambda: f64, reason: String },
    #[error("unknown bus `{0}`")]
    UnknownBus(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl PowerFlowError {
    pub(crate) fn from_newton(stage: &str, f: NewtonFailure) -> Self {
        match f {
            NewtonFailure::MaxIterations {
                iterations,
                mismatch,
            } => Self::NotConverged {
                stage: stage.to_string(),
                iterations,
                mismatch,
            },
            NewtonFailure::Singular { iterations } => Self::NotConverged {
                stage: format!("{stage} (singular Jacobian)"),
                iterations,
                mismatch: f64::NAN,
            },
            NewtonFailure::Collapse {
                node, magnitude, ..
            } => Self::Collapse {
                stage: stage.to_string(),
                node,
                magnitude,
            },
        }
    }

    /// True for errors that mean "no operating point" rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Self::NotConverged { .. } | Self::Collapse { .. })
    }
}

/// How the distribution side is solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeederMethod {
    /// Forward-backward sweep only.
    Sweep,
    /// Newton on the feeder's nodal equations only.
    Newton,
    /// Sweep first, Newton from the sweep iterate when the sweep has not
    /// converged within its iteration budget.
    #[default]
    SweepThenNewton,
}

/// Whole-network solution strategy used by continuation and sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    Monolithic,
    Cosim,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    /// Per-phase complex power mismatch tolerance (p.u.).
    pub tol: f64,
    pub max_iter: usize,
    /// Any free node below this magnitude counts as collapse.
    pub v_min: f64,
    pub feeder_method: FeederMethod,
    /// Iteration budget of the sweep before handing over to Newton.
    pub sweep_iters: usize,
    /// Substation voltage change that ends the exchange loop (p.u.).
    pub exchange_tol: f64,
    pub max_rounds: usize,
    pub strategy: Strategy,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
            v_min: 0.3,
            feeder_method: FeederMethod::default(),
            sweep_iters: 50,
            exchange_tol: 1e-6,
            max_rounds: 50,
            strategy: Strategy::default(),
        }
    }
}

impl SolverOptions {
    pub(crate) fn newton(&self) -> NewtonSettings {
        NewtonSettings {
            tol: self.tol,
            max_iter: self.max_iter,
            v_min: self.v_min,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BranchCurrent {
    pub from: String,
    pub to: String,
    /// Owning feeder; `None` for transmission branches.
    pub feeder: Option<String>,
    /// Current flowing from `from` to `to` (one feeder instance).
    pub current: Phasor3,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveResult {
    pub lambda: f64,
    pub node_voltages: BTreeMap<String, Phasor3>,
    pub branch_currents: Vec<BranchCurrent>,
    pub converged: bool,
    pub iterations: usize,
    /// Transmission ↔ distribution exchange rounds (0 for a direct solve).
    pub rounds: usize,
    /// Largest per-phase complex power residual (p.u.).
    pub mismatch: f64,
    /// Aggregate current from each substation bus into its feeders.
    pub substation_currents: BTreeMap<String, Phasor3>,
    /// Aggregate per-phase complex power drawn by each substation's feeders.
    pub substation_power: BTreeMap<String, Phasor3>,
    /// Total complex power consumed by all loads (feeder copies included).
    pub load_power: C64,
    /// Load current drawn at each loaded feeder node (one feeder instance).
    pub load_currents: BTreeMap<String, Phasor3>,
}

impl SolveResult {
    pub fn voltage(&self, node: &str) -> Option<&Phasor3> {
        self.node_voltages.get(node)
    }

    pub fn min_voltage(&self) -> f64 {
        self.node_voltages
            .values()
            .map(Phasor3::min_magnitude)
            .fold(f64::INFINITY, f64::min)
    }
}

/// A per-phase injection seen by the transmission solver; `s` is consumed
/// power at 1 p.u. (negative for generation).
#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub bus: String,
    pub s: Phasor3,
    pub model: LoadModel,
}

impl Injection {
    pub fn constant_power(bus: impl Into<String>, s: Phasor3) -> Self {
        Self {
            bus: bus.into(),
            s,
            model: LoadModel::ConstantPower,
        }
    }
}

fn add_injection(ckt: &mut Circuit, n: usize, s: Phasor3, model: LoadModel, weight: f64) {
    match model {
        LoadModel::ConstantPower => ckt.power[n] = ckt.power[n] + s * weight,
        LoadModel::ConstantImpedance => {
            ckt.admittance[n] = ckt.admittance[n] + s.map(|x| x.conj()) * weight
        }
    }
}

fn branch_admittance(b: &Branch, weight: f64) -> crate::phasor::ImpedanceMatrix3 {
    b.z.inverse()
        .expect("validated branch impedance is invertible")
        .scale(C64::new(weight, 0.0))
}

/// Solves the transmission network for fixed substation injections.
pub fn solve_transmission(
    branches: &[Branch],
    source: &Source,
    injections: &[Injection],
    opts: &SolverOptions,
) -> Result<SolveResult, PowerFlowError> {
    solve_transmission_warm(branches, source, injections, opts, None)
}

pub(crate) fn solve_transmission_warm(
    branches: &[Branch],
    source: &Source,
    injections: &[Injection],
    opts: &SolverOptions,
    warm: Option<&BTreeMap<String, Phasor3>>,
) -> Result<SolveResult, PowerFlowError> {
    let mut ckt = Circuit::default();
    ckt.add_node(source.bus.clone(), Some(source.voltage));
    let idx = |ckt: &mut Circuit, name: &str| match ckt.index_of(name) {
        Some(k) => k,
        None => ckt.add_node(name, None),
    };
    for b in branches {
        let f = idx(&mut ckt, &b.from);
        let t = idx(&mut ckt, &b.to);
        ckt.branches.push(CircuitBranch {
            from: f,
            to: t,
            y: branch_admittance(b, 1.0),
        });
    }
    for inj in injections {
        let n = ckt
            .index_of(&inj.bus)
            .ok_or_else(|| PowerFlowError::UnknownBus(inj.bus.clone()))?;
        add_injection(&mut ckt, n, inj.s, inj.model, 1.0);
    }
    let v0: Vec<Phasor3> = ckt
        .names
        .iter()
        .map(|n| warm.and_then(|w| w.get(n)).copied().unwrap_or(source.voltage))
        .collect();
    let out = ckt
        .newton(&v0, opts.newton())
        .map_err(|f| PowerFlowError::from_newton("transmission", f))?;
    let node_voltages: BTreeMap<String, Phasor3> = ckt
        .names
        .iter()
        .cloned()
        .zip(out.voltages.iter().copied())
        .collect();
    let branch_currents = branches
        .iter()
        .map(|b| BranchCurrent {
            from: b.from.clone(),
            to: b.to.clone(),
            feeder: None,
            current: b
                .z
                .inverse()
                .expect("validated")
                .mul_vec(&(node_voltages[&b.from] - node_voltages[&b.to])),
        })
        .collect();
    let load_power = injections
        .iter()
        .map(|inj| {
            let v = node_voltages[&inj.bus];
            match inj.model {
                LoadModel::ConstantPower => inj.s.sum(),
                LoadModel::ConstantImpedance => v
                    .zip_with(&inj.s, |v, s| v.norm_sqr() * s)
                    .sum(),
            }
        })
        .sum();
    Ok(SolveResult {
        lambda: 1.0,
        node_voltages,
        branch_currents,
        converged: true,
        iterations: out.iterations,
        rounds: 0,
        mismatch: out.mismatch,
        substation_currents: BTreeMap::new(),
        substation_power: BTreeMap::new(),
        load_power,
        load_currents: BTreeMap::new(),
    })
}

/// Current drawn by all loads (one feeder instance) at `node`.
pub(crate) fn node_load_current(feeder: &Feeder, node: &str, v: &Phasor3) -> Phasor3 {
    feeder
        .loads
        .iter()
        .filter(|l| l.node == node)
        .map(|l| l.current(v))
        .sum()
}

fn shunt_power(shunts: &[Shunt], node: &str) -> Phasor3 {
    shunts.iter().filter(|s| s.node == node).map(|s| s.s).sum()
}

/// Branch currents, head current and consumed load power of one feeder
/// instance.
fn feeder_flows(
    f: &Feeder,
    v: &dyn Fn(&str) -> Phasor3,
) -> (Vec<BranchCurrent>, Phasor3, C64) {
    let (currents, head, power, _) = feeder_flows_detailed(f, v);
    (currents, head, power)
}

fn feeder_flows_detailed(
    f: &Feeder,
    v: &dyn Fn(&str) -> Phasor3,
) -> (Vec<BranchCurrent>, Phasor3, C64, BTreeMap<String, Phasor3>) {
    let root = f.substation.as_str();
    let vr = v(root);
    let mut head = node_load_current(f, root, &vr);
    let mut currents = Vec::with_capacity(f.branches.len());
    for b in &f.branches {
        let current = branch_admittance(b, 1.0).mul_vec(&(v(&b.from) - v(&b.to)));
        if b.from == root {
            head = head + current;
        } else if b.to == root {
            head = head - current;
        }
        currents.push(BranchCurrent {
            from: b.from.clone(),
            to: b.to.clone(),
            feeder: Some(f.id.clone()),
            current,
        });
    }
    let mut power = C64::new(0.0, 0.0);
    let mut load_currents: BTreeMap<String, Phasor3> = BTreeMap::new();
    for l in &f.loads {
        let vn = v(&l.node);
        let i = l.current(&vn);
        power += vn.power(&i).sum();
        let e = load_currents.entry(l.node.clone()).or_default();
        *e = *e + i;
    }
    (currents, head, power, load_currents)
}

/// Result of a single-feeder solve; substation aggregates include the
/// feeder multiplicity.
pub(crate) fn assemble_feeder(f: &Feeder, lambda: f64, sol: &sweep::FeederSolution) -> SolveResult {
    let v = |n: &str| sol.voltages[n];
    let (branch_currents, head, power, load_currents) = feeder_flows_detailed(f, &v);
    let m = f64::from(f.multiplicity);
    let head = head * m;
    let vr = v(&f.substation);
    SolveResult {
        lambda,
        node_voltages: sol.voltages.clone(),
        branch_currents,
        converged: true,
        iterations: sol.iterations,
        rounds: 0,
        mismatch: sol.mismatch,
        substation_currents: BTreeMap::from([(f.substation.clone(), head)]),
        substation_power: BTreeMap::from([(f.substation.clone(), vr.power(&head))]),
        load_power: power * m,
        load_currents,
    }
}

/// Fills in branch currents, substation aggregates and load power for a
/// λ-scaled model whose node voltages are known.
pub(crate) fn assemble(
    model: &NetworkModel,
    lambda: f64,
    node_voltages: BTreeMap<String, Phasor3>,
    iterations: usize,
    rounds: usize,
    mismatch: f64,
) -> SolveResult {
    let v = |n: &str| node_voltages[n];
    let mut branch_currents: Vec<BranchCurrent> = model
        .transmission
        .iter()
        .map(|b| BranchCurrent {
            from: b.from.clone(),
            to: b.to.clone(),
            feeder: None,
            current: branch_admittance(b, 1.0).mul_vec(&(v(&b.from) - v(&b.to))),
        })
        .collect();
    let mut substation_currents: BTreeMap<String, Phasor3> = model
        .substations
        .iter()
        .map(|s| (s.clone(), Phasor3::zero()))
        .collect();
    let mut load_power = C64::new(0.0, 0.0);
    let mut load_currents = BTreeMap::new();
    for f in &model.feeders {
        let m = f64::from(f.multiplicity);
        let (currents, head, power, node_currents) = feeder_flows_detailed(f, &v);
        load_currents.extend(node_currents);
        branch_currents.extend(currents);
        load_power += power * m;
        let agg = substation_currents.entry(f.substation.clone()).or_default();
        *agg = *agg + head * m;
    }
    let substation_power = substation_currents
        .iter()
        .map(|(s, i)| (s.clone(), v(s).power(i)))
        .collect();
    SolveResult {
        lambda,
        node_voltages,
        branch_currents,
        converged: true,
        iterations,
        rounds,
        mismatch,
        substation_currents,
        substation_power,
        load_power,
        load_currents,
    }
}

/// Builds the whole network as one circuit. Each feeder with multiplicity
/// `m` is folded into a single copy with admittances and loads times `m`,
/// which leaves node voltages unchanged.
pub(crate) fn build_monolithic(model: &NetworkModel) -> Circuit {
    let mut ckt = Circuit::default();
    for bus in model.transmission_buses() {
        let fixed = (bus == model.source.bus).then_some(model.source.voltage);
        ckt.add_node(bus, fixed);
    }
    for b in &model.transmission {
        let (f, t) = (ckt.index_of(&b.from).unwrap(), ckt.index_of(&b.to).unwrap());
        ckt.branches.push(CircuitBranch {
            from: f,
            to: t,
            y: branch_admittance(b, 1.0),
        });
    }
    for f in &model.feeders {
        let m = f64::from(f.multiplicity);
        for n in &f.nodes {
            ckt.add_node(n.clone(), None);
        }
        for b in &f.branches {
            let (from, to) = (ckt.index_of(&b.from).unwrap(), ckt.index_of(&b.to).unwrap());
            ckt.branches.push(CircuitBranch {
                from,
                to,
                y: branch_admittance(b, m),
            });
        }
        for l in &f.loads {
            let n = ckt.index_of(&l.node).unwrap();
            add_injection(&mut ckt, n, l.s, l.model, m);
        }
    }
    for s in &model.shunts {
        let n = ckt.index_of(&s.node).unwrap();
        let m = model
            .feeders
            .iter()
            .find(|f| f.nodes.contains(&s.node))
            .map_or(1.0, |f| f64::from(f.multiplicity));
        add_injection(&mut ckt, n, -s.s, LoadModel::ConstantPower, m);
    }
    ckt
}

/// Whole-network Newton solve at loading `lambda`.
pub fn monolithic_solve(
    model: &NetworkModel,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<SolveResult, PowerFlowError> {
    monolithic_solve_warm(model, lambda, opts, None)
}

pub(crate) fn monolithic_solve_warm(
    model: &NetworkModel,
    lambda: f64,
    opts: &SolverOptions,
    warm: Option<&SolveResult>,
) -> Result<SolveResult, PowerFlowError> {
    let scaled = scale_loading(model, lambda)?;
    solve_scaled_monolithic(&scaled, lambda, opts, warm)
}

pub(crate) fn solve_scaled_monolithic(
    scaled: &NetworkModel,
    lambda: f64,
    opts: &SolverOptions,
    warm: Option<&SolveResult>,
) -> Result<SolveResult, PowerFlowError> {
    let ckt = build_monolithic(scaled);
    let v0: Vec<Phasor3> = ckt
        .names
        .iter()
        .map(|n| {
            warm.and_then(|w| w.node_voltages.get(n))
                .copied()
                .unwrap_or(scaled.source.voltage)
        })
        .collect();
    let out = ckt
        .newton(&v0, opts.newton())
        .map_err(|f| PowerFlowError::from_newton("monolithic", f))?;
    let voltages = ckt.names.iter().cloned().zip(out.voltages).collect();
    Ok(assemble(scaled, lambda, voltages, out.iterations, 0, out.mismatch))
}

/// Solves with the strategy selected in `opts`.
pub fn solve(
    model: &NetworkModel,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<SolveResult, PowerFlowError> {
    solve_warm(model, lambda, opts, None)
}

pub(crate) fn solve_warm(
    model: &NetworkModel,
    lambda: f64,
    opts: &SolverOptions,
    warm: Option<&SolveResult>,
) -> Result<SolveResult, PowerFlowError> {
    let scaled = scale_loading(model, lambda)?;
    solve_warm_scaled(&scaled, lambda, opts, warm)
}

/// Solves a model whose loads are already scaled; `lambda` is only recorded.
pub fn solve_warm_scaled(
    scaled: &NetworkModel,
    lambda: f64,
    opts: &SolverOptions,
    warm: Option<&SolveResult>,
) -> Result<SolveResult, PowerFlowError> {
    match opts.strategy {
        Strategy::Monolithic => solve_scaled_monolithic(scaled, lambda, opts, warm),
        Strategy::Cosim => cosim::cosim_scaled(scaled, lambda, opts, warm),
    }
}

/// Complex power balance of a converged solution of the λ-scaled model:
/// `source − loads − Σ I*ZI + shunt injections`. Zero up to solver tolerance.
pub fn power_balance(scaled: &NetworkModel, result: &SolveResult) -> C64 {
    let v = |n: &str| result.node_voltages[n];
    let src = &scaled.source.bus;
    let mut source = C64::new(0.0, 0.0);
    let mut losses = C64::new(0.0, 0.0);
    for (b, bc) in scaled.transmission.iter().zip(&result.branch_currents) {
        if &b.from == src {
            source += v(src).power(&bc.current).sum();
        } else if &b.to == src {
            source -= v(src).power(&bc.current).sum();
        }
        losses += bc.current.dot(&b.z.mul_vec(&bc.current));
    }
    for f in &scaled.feeders {
        let m = f64::from(f.multiplicity);
        for b in &f.branches {
            let bc = result
                .branch_currents
                .iter()
                .find(|c| c.feeder.as_deref() == Some(&f.id) && c.from == b.from && c.to == b.to)
                .expect("feeder branch current present");
            losses += bc.current.dot(&b.z.mul_vec(&bc.current)) * m;
        }
    }
    let mut shunts = C64::new(0.0, 0.0);
    for s in &scaled.shunts {
        let m = scaled
            .feeders
            .iter()
            .find(|f| f.nodes.contains(&s.node))
            .map_or(1.0, |f| f64::from(f.multiplicity));
        shunts += shunt_power(std::slice::from_ref(s), &s.node).sum() * m;
    }
    source - result.load_power - losses + shunts
}
