//! Stability indices from Thevenin equivalents.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::estimator::{SubstationEquivalent, TheveninEquivalent};
use crate::measurement::MeasurementFrame;
use crate::phasor::{quadratic_form, C64, ImpedanceMatrix3, Phasor3};

/// Half-width of the TDDI band classified as [`Limiting::Boundary`].
pub const BOUNDARY_BAND: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("load impedance is zero")]
    ZeroLoadImpedance,
    #[error("load power is zero")]
    ZeroLoadPower,
    #[error("no equivalents to report on")]
    EmptyInput,
    #[error("no frame for substation `{0}`")]
    MissingFrame(String),
    #[error("node `{0}` is missing from the latest frame")]
    MissingNode(String),
}

/// Single-phase index `|Z_eq| / |Z_L|`.
pub fn vsi_1ph(z_eq: C64, z_load: C64) -> Result<f64, IndexError> {
    if z_load.norm() == 0.0 {
        return Err(IndexError::ZeroLoadImpedance);
    }
    Ok(z_eq.norm() / z_load.norm())
}

/// Transmission-side index at the nose of a reactive chain with unity power
/// factor load: `1 / |1 + (1+j)·x_d/x_t|`.
pub fn vsi_t_crit_closed_form(x_t: f64, x_d: f64) -> f64 {
    1.0 / (C64::new(1.0, 0.0) + C64::new(1.0, 1.0) * (x_d / x_t)).norm()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Losses {
    pub s_loss_t: C64,
    pub s_loss_d: C64,
    pub s_load: C64,
}

/// Apparent power lost in each equivalent, `I^H·Z·I`, and the power drawn by
/// the load, `Σ V_D·conj(I)`.
pub fn losses_3ph(
    i_l: &Phasor3,
    v_d: &Phasor3,
    z_eq_t: &ImpedanceMatrix3,
    z_eq_d: &ImpedanceMatrix3,
) -> Losses {
    Losses {
        s_loss_t: quadratic_form(i_l, z_eq_t, i_l),
        s_loss_d: quadratic_form(i_l, z_eq_d, i_l),
        s_load: v_d.power(i_l).sum(),
    }
}

/// `|S_lossT + S_lossD| / |S_L|`.
pub fn vsi_3ph(l: &Losses) -> Result<f64, IndexError> {
    if l.s_load.norm() == 0.0 {
        return Err(IndexError::ZeroLoadPower);
    }
    Ok((l.s_loss_t + l.s_loss_d).norm() / l.s_load.norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tddi {
    /// `log10(|S_lossT| / |S_lossD|)`; `±inf` when one side has no loss.
    pub value: f64,
    /// Set when either loss is zero and `value` is a sentinel.
    pub zero_loss: bool,
}

pub fn tddi(s_loss_t: C64, s_loss_d: C64) -> Tddi {
    let (t, d) = (s_loss_t.norm(), s_loss_d.norm());
    if t == 0.0 || d == 0.0 {
        let value = match (t == 0.0, d == 0.0) {
            (false, true) => f64::INFINITY,
            (true, false) => f64::NEG_INFINITY,
            _ => f64::NAN,
        };
        return Tddi {
            value,
            zero_loss: true,
        };
    }
    Tddi {
        value: (t / d).log10(),
        zero_loss: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Limiting {
    TLimited,
    DLimited,
    Boundary,
}

impl Limiting {
    pub fn classify(tddi: f64, band: f64) -> Self {
        if tddi.is_nan() || tddi.abs() < band {
            Limiting::Boundary
        } else if tddi > 0.0 {
            Limiting::TLimited
        } else {
            Limiting::DLimited
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Limiting::TLimited => "T_limited",
            Limiting::DLimited => "D_limited",
            Limiting::Boundary => "boundary",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeIndices {
    pub node: String,
    pub substation: String,
    pub vsi_3ph: f64,
    pub tddi: f64,
    pub tddi_zero_loss: bool,
    pub s_loss_t: C64,
    pub s_loss_d: C64,
    pub s_load: C64,
    pub class: Limiting,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubstationIndex {
    pub substation: String,
    pub vsi_t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub nodes: Vec<NodeIndices>,
    pub substations: Vec<SubstationIndex>,
    pub critical_node: String,
    pub limiting: Limiting,
    pub boundary_band: f64,
}

/// Indices of one node at one operating point.
pub fn node_indices(
    eq: &TheveninEquivalent,
    i_l: &Phasor3,
    v_d: &Phasor3,
    band: f64,
) -> Result<NodeIndices, IndexError> {
    let l = losses_3ph(i_l, v_d, &eq.z_eq_t, &eq.z_eq_d);
    let vsi = vsi_3ph(&l)?;
    let t = tddi(l.s_loss_t, l.s_loss_d);
    Ok(NodeIndices {
        node: eq.node.clone(),
        substation: eq.substation.clone(),
        vsi_3ph: vsi,
        tddi: t.value,
        tddi_zero_loss: t.zero_loss,
        s_loss_t: l.s_loss_t,
        s_loss_d: l.s_loss_d,
        s_load: l.s_load,
        class: Limiting::classify(t.value, band),
    })
}

/// Report over nodes that may belong to several substations. `latest` holds
/// the most recent frame of each substation.
pub fn build_report(
    equivalents: &[TheveninEquivalent],
    latest: &[&MeasurementFrame],
    substations: &[SubstationEquivalent],
    band: f64,
) -> Result<StabilityReport, IndexError> {
    let mut nodes = Vec::with_capacity(equivalents.len());
    for eq in equivalents {
        let frame = latest
            .iter()
            .find(|f| f.substation_id == eq.substation)
            .ok_or_else(|| IndexError::MissingFrame(eq.substation.clone()))?;
        let ch = frame
            .channels
            .get(&eq.node)
            .ok_or_else(|| IndexError::MissingNode(eq.node.clone()))?;
        nodes.push(node_indices(eq, &ch.i_l, &ch.v_d, band)?);
    }
    let substations = substations
        .iter()
        .map(|s| SubstationIndex {
            substation: s.substation.clone(),
            vsi_t: s.vsi_t,
        })
        .collect();
    from_nodes(nodes, substations, band)
}

/// Picks the critical node (largest `vsi_3ph`, first on ties) and classifies
/// it.
pub fn from_nodes(
    nodes: Vec<NodeIndices>,
    substations: Vec<SubstationIndex>,
    band: f64,
) -> Result<StabilityReport, IndexError> {
    let critical = nodes
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (i, n)| match best {
            Some((_, v)) if v >= n.vsi_3ph => best,
            _ => Some((i, n.vsi_3ph)),
        })
        .map(|(i, _)| i)
        .ok_or(IndexError::EmptyInput)?;
    let limiting = Limiting::classify(nodes[critical].tddi, band);
    Ok(StabilityReport {
        critical_node: nodes[critical].node.clone(),
        limiting,
        nodes,
        substations,
        boundary_band: band,
    })
}

impl StabilityReport {
    pub fn critical(&self) -> &NodeIndices {
        self.nodes
            .iter()
            .find(|n| n.node == self.critical_node)
            .expect("critical node is one of the nodes")
    }

    pub fn node(&self, id: &str) -> Option<&NodeIndices> {
        self.nodes.iter().find(|n| n.node == id)
    }

    pub fn vsi_t(&self, substation: &str) -> Option<f64> {
        self.substations
            .iter()
            .find(|s| s.substation == substation)
            .map(|s| s.vsi_t)
    }

    pub fn write_json<W: Write>(&self, w: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(w, self)
    }

    /// Flat table: one row per node.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["node", "substation", "vsi_3ph", "tddi", "class", "critical"])?;
        for n in &self.nodes {
            out.write_record([
                n.node.clone(),
                n.substation.clone(),
                format!("{:.15e}", n.vsi_3ph),
                format!("{:.15e}", n.tddi),
                n.class.as_str().to_string(),
                (n.node == self.critical_node).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
