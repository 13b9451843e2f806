//! Ground-truth model of a transmission network feeding radial distribution
//! feeders, plus JSON ingestion and the feeder/loading scaling helpers.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phasor::{C64, ImpedanceMatrix3, Phasor3};

/// Entry-wise symmetry tolerance for branch impedance matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

const NETWORK_SCHEMA: &str = include_str!("../../../docs/network.schema.json");

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error at {element}: {reason}")]
    Validation { element: String, reason: String },
    #[error("scaling factor must be positive, got {0}")]
    NonPositiveFactor(f64),
    #[error("unknown bus or node `{0}`")]
    UnknownBus(String),
}

impl NetworkError {
    fn invalid(element: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Validation {
            element: element.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Base {
    pub mva: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_transmission: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_distribution: Option<f64>,
}

impl Default for Base {
    fn default() -> Self {
        Self {
            mva: 100.0,
            kv_transmission: None,
            kv_distribution: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub bus: String,
    pub voltage: Phasor3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub from: String,
    pub to: String,
    pub z: ImpedanceMatrix3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadModel {
    ConstantImpedance,
    ConstantPower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connection {
    #[default]
    Star,
}

/// Per-phase load. `s` is the consumed complex power at 1 p.u. voltage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    pub node: String,
    pub model: LoadModel,
    pub s: Phasor3,
    #[serde(default)]
    pub connection: Connection,
}

impl LoadSpec {
    /// Per-phase admittance of a constant-impedance load, `conj(S)` at 1 p.u.
    pub fn admittance(&self) -> Phasor3 {
        self.s.map(|s| s.conj())
    }

    /// Current drawn at voltage `v` (zero on unloaded phases).
    pub fn current(&self, v: &Phasor3) -> Phasor3 {
        match self.model {
            LoadModel::ConstantPower => {
                let mut out = Phasor3::zero();
                for p in 0..3 {
                    if self.s[p] != C64::new(0.0, 0.0) {
                        out[p] = (self.s[p] / v[p]).conj();
                    }
                }
                out
            }
            LoadModel::ConstantImpedance => self.admittance().zip_with(v, |y, v| y * v),
        }
    }
}

fn default_multiplicity() -> u32 {
    1
}

/// A radial distribution feeder hanging off one substation bus. The
/// substation bus is the feeder root and is not listed in `nodes`; loads may
/// sit on the root itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Feeder {
    pub id: String,
    pub substation: String,
    /// Number of identical copies of this feeder attached to the substation.
    #[serde(default = "default_multiplicity")]
    pub multiplicity: u32,
    pub nodes: Vec<String>,
    pub branches: Vec<Branch>,
    pub loads: Vec<LoadSpec>,
}

/// Constant-power injection (generation positive) at a node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shunt {
    pub node: String,
    pub s: Phasor3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    pub base: Base,
    pub source: Source,
    pub transmission: Vec<Branch>,
    pub substations: Vec<String>,
    pub feeders: Vec<Feeder>,
    pub shunts: Vec<Shunt>,
}

/// Tree structure of a validated feeder: nodes in breadth-first order from
/// the root, each with the index of its parent branch.
#[derive(Clone, Debug)]
pub(crate) struct FeederTree {
    /// `(node, parent node, branch index)` in BFS order, root excluded.
    pub order: Vec<(String, String, usize)>,
}

impl Feeder {
    pub fn load_nodes(&self) -> impl Iterator<Item = &str> {
        self.loads.iter().map(|l| l.node.as_str())
    }

    pub(crate) fn tree(&self) -> Result<FeederTree, NetworkError> {
        let el = |s: &str| format!("feeder `{}` {}", self.id, s);
        let mut adj: HashMap<&str, Vec<(usize, &str)>> = HashMap::new();
        for (k, b) in self.branches.iter().enumerate() {
            adj.entry(b.from.as_str()).or_default().push((k, b.to.as_str()));
            adj.entry(b.to.as_str()).or_default().push((k, b.from.as_str()));
        }
        let known: BTreeSet<&str> = self
            .nodes
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(self.substation.as_str()))
            .collect();
        for b in &self.branches {
            for end in [&b.from, &b.to] {
                if !known.contains(end.as_str()) {
                    return Err(NetworkError::invalid(
                        el(&format!("branch {}-{}", b.from, b.to)),
                        format!("endpoint `{end}` is not a node of this feeder"),
                    ));
                }
            }
            if b.from == b.to {
                return Err(NetworkError::invalid(
                    el(&format!("branch {}-{}", b.from, b.to)),
                    "self loop",
                ));
            }
        }
        if self.branches.len() != self.nodes.len() {
            return Err(NetworkError::invalid(
                el("topology"),
                format!(
                    "not radial: {} nodes but {} branches",
                    self.nodes.len(),
                    self.branches.len()
                ),
            ));
        }
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        seen.insert(self.substation.as_str());
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut queue = VecDeque::from([self.substation.as_str()]);
        while let Some(n) = queue.pop_front() {
            for &(k, m) in adj.get(n).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(m) {
                    order.push((m.to_string(), n.to_string(), k));
                    queue.push_back(m);
                }
            }
        }
        if let Some(orphan) = self.nodes.iter().find(|n| !seen.contains(n.as_str())) {
            return Err(NetworkError::invalid(
                el(&format!("node {orphan}")),
                "not connected to the substation",
            ));
        }
        Ok(FeederTree { order })
    }
}

fn check_matrix(element: String, z: &ImpedanceMatrix3) -> Result<(), NetworkError> {
    if !z.is_finite() {
        return Err(NetworkError::invalid(element, "non-finite impedance"));
    }
    if !z.is_symmetric(SYMMETRY_TOL) {
        return Err(NetworkError::invalid(
            element,
            format!("impedance matrix asymmetric (max |z_ij - z_ji| = {:.3e})", z.asymmetry()),
        ));
    }
    if z.inverse().is_none() {
        return Err(NetworkError::invalid(element, "impedance matrix is singular"));
    }
    Ok(())
}

impl NetworkModel {
    /// Transmission buses: the source plus every branch endpoint and substation.
    pub fn transmission_buses(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        set.insert(self.source.bus.clone());
        for b in &self.transmission {
            set.insert(b.from.clone());
            set.insert(b.to.clone());
        }
        for s in &self.substations {
            set.insert(s.clone());
        }
        // keep the source first, the rest sorted
        let mut out = vec![self.source.bus.clone()];
        out.extend(set.into_iter().filter(|b| *b != self.source.bus));
        out
    }

    pub fn feeders_of<'a>(&'a self, substation: &'a str) -> impl Iterator<Item = &'a Feeder> + 'a {
        self.feeders.iter().filter(move |f| f.substation == substation)
    }

    /// Substation that serves `node` (a feeder node or a substation bus).
    pub fn substation_of(&self, node: &str) -> Option<&str> {
        if self.substations.iter().any(|s| s == node) {
            return self.substations.iter().find(|s| *s == node).map(String::as_str);
        }
        self.feeders
            .iter()
            .find(|f| f.nodes.iter().any(|n| n == node))
            .map(|f| f.substation.as_str())
    }

    /// Nodes carrying at least one load, in file order, without duplicates.
    pub fn load_nodes(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.feeders
            .iter()
            .flat_map(|f| f.loads.iter())
            .filter(|l| seen.insert(l.node.clone()))
            .map(|l| l.node.clone())
            .collect()
    }

    pub fn has_bus(&self, bus: &str) -> bool {
        self.transmission_buses().iter().any(|b| b == bus)
    }

    pub fn has_node(&self, node: &str) -> bool {
        self.has_bus(node) || self.feeders.iter().any(|f| f.nodes.iter().any(|n| n == node))
    }

    /// Checks every structural invariant, naming the offending element.
    pub fn validate(&self) -> Result<(), NetworkError> {
        if !(self.base.mva.is_finite() && self.base.mva > 0.0) {
            return Err(NetworkError::invalid("base.mva", "must be positive"));
        }
        if !self.source.voltage.is_finite() {
            return Err(NetworkError::invalid("source.voltage", "non-finite"));
        }
        for b in &self.transmission {
            check_matrix(format!("transmission branch {}-{}", b.from, b.to), &b.z)?;
            if b.from == b.to {
                return Err(NetworkError::invalid(
                    format!("transmission branch {}-{}", b.from, b.to),
                    "self loop",
                ));
            }
        }

        let buses = self.transmission_buses();
        let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
        for b in &self.transmission {
            adj.entry(&b.from).or_default().push(&b.to);
            adj.entry(&b.to).or_default().push(&b.from);
        }
        let mut seen = BTreeSet::from([self.source.bus.as_str()]);
        let mut queue = VecDeque::from([self.source.bus.as_str()]);
        while let Some(n) = queue.pop_front() {
            for &m in adj.get(n).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        if let Some(b) = buses.iter().find(|b| !seen.contains(b.as_str())) {
            return Err(NetworkError::invalid(
                format!("bus {b}"),
                "disconnected from the source",
            ));
        }

        let mut dup = BTreeSet::new();
        for s in &self.substations {
            if !dup.insert(s.as_str()) {
                return Err(NetworkError::invalid(format!("substation {s}"), "listed twice"));
            }
        }

        let bus_set: BTreeSet<&str> = buses.iter().map(String::as_str).collect();
        let mut node_owner: BTreeMap<&str, &str> = BTreeMap::new();
        let mut feeder_ids = BTreeSet::new();
        for f in &self.feeders {
            let el = |s: &str| format!("feeder `{}` {}", f.id, s);
            if !feeder_ids.insert(f.id.as_str()) {
                return Err(NetworkError::invalid(el(""), "duplicate feeder id"));
            }
            if !self.substations.contains(&f.substation) {
                return Err(NetworkError::invalid(
                    el("substation"),
                    format!("`{}` is not a declared substation", f.substation),
                ));
            }
            if f.multiplicity == 0 {
                return Err(NetworkError::invalid(el("multiplicity"), "must be at least 1"));
            }
            for n in &f.nodes {
                if bus_set.contains(n.as_str()) {
                    return Err(NetworkError::invalid(
                        el(&format!("node {n}")),
                        "clashes with a transmission bus id",
                    ));
                }
                if let Some(other) = node_owner.insert(n, &f.id) {
                    return Err(NetworkError::invalid(
                        el(&format!("node {n}")),
                        format!("already used by feeder `{other}`"),
                    ));
                }
            }
            for b in &f.branches {
                check_matrix(el(&format!("branch {}-{}", b.from, b.to)), &b.z)?;
            }
            f.tree()?;
            for l in &f.loads {
                let el = el(&format!("load at {}", l.node));
                if l.node != f.substation && !f.nodes.contains(&l.node) {
                    return Err(NetworkError::invalid(el, "node not in feeder"));
                }
                if !l.s.is_finite() {
                    return Err(NetworkError::invalid(el, "non-finite power"));
                }
                if l.s.iter().all(|s| *s == C64::new(0.0, 0.0)) {
                    return Err(NetworkError::invalid(el, "all phases zero"));
                }
            }
        }

        for s in &self.shunts {
            if !bus_set.contains(s.node.as_str()) && !node_owner.contains_key(s.node.as_str()) {
                return Err(NetworkError::invalid(
                    format!("shunt at {}", s.node),
                    "unknown node",
                ));
            }
            if !s.s.is_finite() {
                return Err(NetworkError::invalid(format!("shunt at {}", s.node), "non-finite"));
            }
        }
        Ok(())
    }

    /// Parses and validates a network from JSON text.
    pub fn from_json_str(text: &str) -> Result<Self, NetworkError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| NetworkError::Parse(format!("line {}: {e}", e.line())))?;
        check_schema(&value)?;
        let model: NetworkModel =
            serde_json::from_value(value).map_err(|e| NetworkError::Parse(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    /// Canonical pretty-printed JSON.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetworkError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string() + "\n").map_err(|source| NetworkError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Sum of nominal load power (times feeder multiplicity).
    pub fn nominal_load(&self) -> C64 {
        self.feeders
            .iter()
            .map(|f| {
                f.loads.iter().map(|l| l.s.sum()).sum::<C64>() * f64::from(f.multiplicity)
            })
            .sum()
    }
}

fn check_schema(value: &serde_json::Value) -> Result<(), NetworkError> {
    static VALIDATOR: OnceLock<jsonschema::Validator> = OnceLock::new();
    let validator = VALIDATOR.get_or_init(|| {
        let schema: serde_json::Value =
            serde_json::from_str(NETWORK_SCHEMA).expect("bundled schema is valid JSON");
        jsonschema::validator_for(&schema).expect("bundled schema compiles")
    });
    let errors: Vec<String> = validator
        .iter_errors(value)
        .map(|e| format!("{}: {}", e.instance_path(), e))
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(NetworkError::Parse(format!(
            "schema violation: {}",
            errors.join("; ")
        )))
    }
}

/// JSON Schema for network files.
pub fn network_schema() -> &'static str {
    NETWORK_SCHEMA
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkModel, NetworkError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    NetworkModel::from_json_str(&text)
}

/// Multiplies every branch impedance of the feeder by `factor`.
pub fn scale_feeder(f: &Feeder, factor: f64) -> Result<Feeder, NetworkError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(NetworkError::NonPositiveFactor(factor));
    }
    let mut out = f.clone();
    for b in &mut out.branches {
        b.z = b.z.scale(C64::new(factor, 0.0));
    }
    Ok(out)
}

/// Multiplies every load's nominal power by `lambda`.
pub fn scale_loading(model: &NetworkModel, lambda: f64) -> Result<NetworkModel, NetworkError> {
    scale_loading_by_phase(model, lambda, [1.0; 3])
}

/// Like [`scale_loading`], additionally scaling phase `p` of every load by
/// `phase_factors[p]`.
pub fn scale_loading_by_phase(
    model: &NetworkModel,
    lambda: f64,
    phase_factors: [f64; 3],
) -> Result<NetworkModel, NetworkError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(NetworkError::NonPositiveFactor(lambda));
    }
    if let Some(&bad) = phase_factors.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
        return Err(NetworkError::NonPositiveFactor(bad));
    }
    let mut out = model.clone();
    for f in &mut out.feeders {
        *f = scale_feeder_loading(f, lambda, phase_factors)?;
    }
    Ok(out)
}

/// Scales the loads of a single feeder, phase `p` by `lambda · phase_factors[p]`.
pub fn scale_feeder_loading(
    f: &Feeder,
    lambda: f64,
    phase_factors: [f64; 3],
) -> Result<Feeder, NetworkError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(NetworkError::NonPositiveFactor(lambda));
    }
    let mut out = f.clone();
    for l in &mut out.loads {
        for (p, factor) in phase_factors.iter().enumerate() {
            l.s[p] *= lambda * factor;
        }
    }
    Ok(out)
}
