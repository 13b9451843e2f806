//! What-if interventions and their effect on λ_max.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::{find_lambda_max_with, NoseOptions, PowerFlowError};
use crate::network::{Branch, NetworkError, NetworkModel, Shunt};
use crate::phasor::{BalancedSpec, C64, ImpedanceMatrix3, Phasor3};

/// Adds `q_mvar` of reactive support (split equally over the phases) at a
/// transmission bus or feeder node.
pub fn apply_var_support(
    model: &NetworkModel,
    bus: &str,
    q_mvar: f64,
) -> Result<NetworkModel, PowerFlowError> {
    if !model.has_bus(bus) && !model.has_node(bus) {
        return Err(PowerFlowError::UnknownBus(bus.to_string()));
    }
    let mut out = model.clone();
    if q_mvar != 0.0 {
        let q = q_mvar / model.base.mva / 3.0;
        out.shunts.push(Shunt {
            node: bus.to_string(),
            s: Phasor3::splat(C64::new(0.0, q)),
        });
    }
    Ok(out)
}

/// Adds a transmission line between two existing transmission buses.
pub fn add_line(
    model: &NetworkModel,
    from: &str,
    to: &str,
    z: ImpedanceMatrix3,
) -> Result<NetworkModel, PowerFlowError> {
    for bus in [from, to] {
        if !model.has_bus(bus) {
            return Err(PowerFlowError::UnknownBus(bus.to_string()));
        }
    }
    let mut out = model.clone();
    out.transmission.push(Branch {
        from: from.to_string(),
        to: to.to_string(),
        z,
    });
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LineImpedance {
    Given(ImpedanceMatrix3),
    /// Same impedance as the first existing line between the two buses.
    Duplicate,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Intervention {
    VarSupport { bus: String, q_mvar: f64 },
    AddLine { from: String, to: String, z: LineImpedance },
}

impl Intervention {
    pub fn apply(&self, model: &NetworkModel) -> Result<NetworkModel, PowerFlowError> {
        match self {
            Self::VarSupport { bus, q_mvar } => apply_var_support(model, bus, *q_mvar),
            Self::AddLine { from, to, z } => {
                let z = match z {
                    LineImpedance::Given(z) => *z,
                    LineImpedance::Duplicate => model
                        .transmission
                        .iter()
                        .find(|b| {
                            (b.from == *from && b.to == *to) || (b.from == *to && b.to == *from)
                        })
                        .map(|b| b.z)
                        .ok_or_else(|| {
                            PowerFlowError::Network(NetworkError::Validation {
                                element: format!("line {from}-{to}"),
                                reason: "no existing line to duplicate".into(),
                            })
                        })?,
                };
                add_line(model, from, to, z)
            }
        }
    }
}

impl fmt::Display for Intervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::VarSupport { bus, q_mvar } => write!(f, "var:{bus}:{q_mvar}"),
            Self::AddLine { from, to, z: LineImpedance::Duplicate } => {
                write!(f, "line:{from}:{to}:dup")
            }
            Self::AddLine { from, to, z: LineImpedance::Given(z) } => {
                write!(f, "line:{from}:{to}:{},{}", z.0[0][0].re, z.0[0][0].im)?;
                if z.0[0][1] != C64::new(0.0, 0.0) {
                    write!(f, ":{},{}", z.0[0][1].re, z.0[0][1].im)?;
                }
                Ok(())
            }
        }
    }
}

fn parse_complex(s: &str) -> Result<C64, String> {
    let (re, im) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `re,im`, got `{s}`"))?;
    let p = |x: &str| {
        x.trim()
            .parse::<f64>()
            .map_err(|e| format!("bad number `{x}`: {e}"))
    };
    Ok(C64::new(p(re)?, p(im)?))
}

impl FromStr for Intervention {
    type Err = String;

    /// `var:BUS:Q_MVAR`, `line:FROM:TO:R,X[:RM,XM]` (balanced self and
    /// mutual impedance) or `line:FROM:TO:dup`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["var", bus, q] => Ok(Self::VarSupport {
                bus: bus.to_string(),
                q_mvar: q.parse().map_err(|e| format!("bad reactive power `{q}`: {e}"))?,
            }),
            ["line", from, to, "dup"] => Ok(Self::AddLine {
                from: from.to_string(),
                to: to.to_string(),
                z: LineImpedance::Duplicate,
            }),
            ["line", from, to, zs, rest @ ..] if rest.len() <= 1 => {
                let z_self = parse_complex(zs)?;
                let z_mutual = match rest {
                    [zm] => parse_complex(zm)?,
                    _ => C64::new(0.0, 0.0),
                };
                Ok(Self::AddLine {
                    from: from.to_string(),
                    to: to.to_string(),
                    z: LineImpedance::Given(ImpedanceMatrix3::balanced(BalancedSpec { z_self, z_mutual })),
                })
            }
            _ => Err(format!(
                "cannot parse intervention `{s}` (expected var:BUS:Q or line:FROM:TO:R,X)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WhatIfRow {
    pub label: String,
    pub lambda_max: f64,
    /// Change of λ_max relative to the base case, in percent.
    pub delta_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WhatIfTable {
    pub base_lambda_max: f64,
    pub rows: Vec<WhatIfRow>,
}

impl WhatIfTable {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "intervention,lambda_max,delta_lambda_max_pct")?;
        writeln!(w, "base,{},0", self.base_lambda_max)?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.label, r.lambda_max, r.delta_pct)?;
        }
        Ok(())
    }
}

/// Runs the base case and each intervention on its own.
pub fn run_whatif(
    model: &NetworkModel,
    interventions: &[Intervention],
    opts: &NoseOptions,
) -> Result<WhatIfTable, PowerFlowError> {
    let modified: Vec<NetworkModel> = interventions
        .iter()
        .map(|i| i.apply(model))
        .collect::<Result<_, _>>()?;
    let base = find_lambda_max_with(model, opts)?.lambda_max;
    let mut rows = Vec::with_capacity(interventions.len());
    for (i, m) in interventions.iter().zip(&modified) {
        let lambda_max = find_lambda_max_with(m, opts)?.lambda_max;
        rows.push(WhatIfRow {
            label: i.to_string(),
            lambda_max,
            delta_pct: 100.0 * (lambda_max - base) / base,
        });
    }
    Ok(WhatIfTable {
        base_lambda_max: base,
        rows,
    })
}
