//! Small built-in test systems: the source → line → substation → feeder
//! chains used for index validation and a two-substation network with
//! synthetic radial feeders.

use crate::network::{
    Base, Branch, Feeder, LoadModel, LoadSpec, NetworkModel, Source,
};
use crate::phasor::{BalancedSpec, C64, ImpedanceMatrix3, Phasor3};

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn balanced(z_self: C64, z_mutual: C64) -> ImpedanceMatrix3 {
    ImpedanceMatrix3::balanced(BalancedSpec { z_self, z_mutual })
}

fn branch(from: &str, to: &str, z: ImpedanceMatrix3) -> Branch {
    Branch {
        from: from.into(),
        to: to.into(),
        z,
    }
}

fn load(node: &str, model: LoadModel, s: Phasor3) -> LoadSpec {
    LoadSpec {
        node: node.into(),
        model,
        s,
        connection: Default::default(),
    }
}

/// Source bus `SRC` → transmission line `z_t` → substation `SUB` → feeder
/// branch `z_d` → load node `LD`. A zero `z_d` puts the load on `SUB`
/// directly.
pub fn chain(z_t: ImpedanceMatrix3, z_d: ImpedanceMatrix3, load_spec: (LoadModel, Phasor3)) -> NetworkModel {
    let transmission_only = z_d.frobenius_norm() == 0.0;
    let (nodes, branches, at) = if transmission_only {
        (vec![], vec![], "SUB")
    } else {
        (vec!["LD".to_string()], vec![branch("SUB", "LD", z_d)], "LD")
    };
    NetworkModel {
        base: Base::default(),
        source: Source {
            bus: "SRC".into(),
            voltage: Phasor3::balanced(c(1.0, 0.0)),
        },
        transmission: vec![branch("SRC", "SUB", z_t)],
        substations: vec!["SUB".into()],
        feeders: vec![Feeder {
            id: "F1".into(),
            substation: "SUB".into(),
            multiplicity: 1,
            nodes,
            branches,
            loads: vec![load(at, load_spec.0, load_spec.1)],
        }],
        shunts: vec![],
    }
}

/// Distribution impedance of the three chain cases (per phase, no mutuals).
pub fn chain_z_d(case: usize) -> C64 {
    match case {
        1 => c(0.0, 0.02),
        2 => c(0.01, 0.02),
        3 => c(0.02, 0.02),
        _ => panic!("chain cases are numbered 1 to 3"),
    }
}

/// Transmission reactance shared by the chain cases.
pub const CHAIN_X_T: f64 = 0.08;

/// Chain case with a unity power factor constant-power load of 1 p.u. per
/// phase.
pub fn chain_case(case: usize) -> NetworkModel {
    let zero = c(0.0, 0.0);
    chain(
        balanced(c(0.0, CHAIN_X_T), zero),
        balanced(chain_z_d(case), zero),
        (LoadModel::ConstantPower, Phasor3::splat(c(1.0, 0.0))),
    )
}

/// The chain with the feeder removed (load on the substation bus).
pub fn transmission_only_chain(model: LoadModel) -> NetworkModel {
    let zero = c(0.0, 0.0);
    chain(
        balanced(c(0.0, CHAIN_X_T), zero),
        ImpedanceMatrix3::zero(),
        (model, Phasor3::splat(c(1.0, 0.0))),
    )
}

/// Unbalanced constant-impedance chain. Scenario 1 has all phases lagging,
/// scenario 2 has a leading phase a.
pub fn unbalanced_chain(scenario: usize) -> NetworkModel {
    let s_a = match scenario {
        1 => c(1.5, 0.6),
        2 => c(1.5, -0.6),
        _ => panic!("unbalanced chain scenarios are 1 and 2"),
    };
    chain(
        balanced(c(0.8, 1.6), c(0.25, 0.9)),
        balanced(c(0.2, 0.4), c(0.05, 0.1)),
        (
            LoadModel::ConstantImpedance,
            Phasor3([s_a, c(0.5, 0.2), c(1.0, 0.4)]),
        ),
    )
}

/// Five-node radial feeder of balanced constant-power loads with a heavy load
/// at the far end. Branch impedances are multiplied by `impedance_scale`;
/// node ids are prefixed by the feeder id.
pub fn synthetic_feeder(id: &str, substation: &str, impedance_scale: f64, multiplicity: u32) -> Feeder {
    let k = c(impedance_scale, 0.0);
    let line = balanced(c(0.048, 0.100), c(0.0152, 0.0368));
    let lengths = [1.0, 0.8, 1.2, 0.6, 1.0];
    let name = |k: usize| format!("{id}_{k}");
    let nodes: Vec<String> = (1..=5).map(name).collect();
    let mut branches = Vec::new();
    for (n, len) in lengths.iter().enumerate() {
        let from = if n == 0 { substation.to_string() } else { name(n) };
        // node 4 branches off node 2; the others form the main line
        let from = if n == 3 { name(2) } else { from };
        branches.push(branch(&from, &name(n + 1), line.scale(k * *len)));
    }
    let pq = |p: f64| Phasor3::splat(c(p, 0.45 * p));
    let loads = vec![
        load(&name(1), LoadModel::ConstantPower, pq(0.010)),
        load(&name(2), LoadModel::ConstantPower, pq(0.0075)),
        load(&name(4), LoadModel::ConstantPower, pq(0.010)),
        load(&name(5), LoadModel::ConstantPower, pq(0.150)),
    ];
    Feeder {
        id: id.into(),
        substation: substation.into(),
        multiplicity,
        nodes,
        branches,
        loads,
    }
}

/// Source `GRID` → `HUB` → substations `SA` and `SB`, each with one family of
/// identical synthetic feeders. `scale_a`/`scale_b` multiply the feeder
/// impedances; the line to `SB` is slightly weaker than the one to `SA`.
pub fn two_substation(scale_a: f64, scale_b: f64) -> NetworkModel {
    let line = |x: f64| balanced(c(0.1 * x, x), c(0.03 * x, 0.3 * x));
    NetworkModel {
        base: Base {
            mva: 100.0,
            kv_transmission: Some(230.0),
            kv_distribution: Some(12.47),
        },
        source: Source {
            bus: "GRID".into(),
            voltage: Phasor3::balanced(c(1.0, 0.0)),
        },
        transmission: vec![
            branch("GRID", "HUB", line(0.005)),
            branch("HUB", "SA", line(0.030)),
            branch("HUB", "SB", line(0.033)),
        ],
        substations: vec!["SA".into(), "SB".into()],
        feeders: vec![
            synthetic_feeder("A", "SA", scale_a, 10),
            synthetic_feeder("B", "SB", scale_b, 10),
        ],
        shunts: vec![],
    }
}
