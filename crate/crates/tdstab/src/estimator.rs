//! Thevenin equivalents from measurement windows.
//!
//! For a μPMU node with load current `I`, substation voltage `V_T` and node
//! voltage `V_D`, the two equivalents satisfy
//! `V_T = E − Z_T·I` and `V_D = V_T − Z_D·I`. Differencing against the first
//! frame removes `E`, leaving linear systems in the entries of `Z_T` and
//! `Z_D` that are solved by least squares.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::measurement::MeasurementWindow;
use crate::phasor::{C64, ImpedanceMatrix3, Phasor3};

/// Smallest window accepted by [`estimate`].
pub const M_MIN: usize = 4;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("window has {frames} frames, at least {required} needed")]
    WindowTooSmall { frames: usize, required: usize },
    #[error(
        "delta system is ill-conditioned (condition {condition:.3e} > {cond_max:.1e}); \
         use a longer window with more load variation"
    )]
    IllConditioned { condition: f64, cond_max: f64 },
    #[error("node {node}: phase {phase} current below threshold in frame {k}")]
    DeadChannel { node: String, phase: char, k: usize },
    #[error("node `{0}` is not measured in this window")]
    UnknownNode(String),
    #[error("substation current is not metered in frame {0}")]
    MissingSubstationCurrent(usize),
    #[error("estimator configuration: {0}")]
    BadConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Least squares over symmetric matrices (6 unknowns each).
    #[default]
    ExactSymmetric,
    /// Least squares over general matrices with an asymmetry penalty sized so
    /// that `‖Z − Zᵀ‖_F ≤ ξ`.
    SoftConstrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EstimatorConfig {
    pub mode: EstimatorMode,
    pub xi_t: f64,
    pub xi_d: f64,
    /// Tikhonov weight; 0 gives plain least squares.
    pub ridge: f64,
    pub cond_max: f64,
    /// Currents below this magnitude count as zero (p.u.).
    pub i_min: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mode: EstimatorMode::default(),
            xi_t: 0.02,
            xi_d: 0.02,
            ridge: 0.0,
            cond_max: 1e8,
            i_min: 1e-6,
        }
    }
}

impl EstimatorConfig {
    fn check(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::BadConfig(m.into()));
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad("ridge must be finite and non-negative");
        }
        if !(self.cond_max > 1.0) {
            return bad("cond_max must exceed 1");
        }
        if self.mode == EstimatorMode::SoftConstrained && !(self.xi_t > 0.0 && self.xi_d > 0.0) {
            return bad("asymmetry budgets must be positive");
        }
        Ok(())
    }
}

/// Per-phase load impedance; `None` marks a de-energized phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LoadImpedance(pub [Option<C64>; 3]);

impl LoadImpedance {
    pub fn absent_phases(&self) -> Vec<char> {
        (0..3)
            .filter(|&p| self.0[p].is_none())
            .map(phase_name)
            .collect()
    }

    pub fn energized(&self) -> [bool; 3] {
        self.0.map(|z| z.is_some())
    }
}

fn phase_name(p: usize) -> char {
    ['a', 'b', 'c'][p]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheveninEquivalent {
    pub node: String,
    pub substation: String,
    pub z_eq_t: ImpedanceMatrix3,
    pub z_eq_d: ImpedanceMatrix3,
    pub z_load: LoadImpedance,
    pub absent_phases: Vec<char>,
    pub e_eq: Option<Phasor3>,
    /// Largest deviation of `V_T + Z_T·I` from `e_eq` over the window.
    pub e_eq_residual: Option<f64>,
    /// Euclidean norm of the least-squares residual of each fit.
    pub residual_t: f64,
    pub residual_d: f64,
    /// Ratio of extreme singular values of the stacked delta system.
    pub condition: f64,
}

/// Positive-sequence equivalent of the transmission system seen from a
/// substation bus.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubstationEquivalent {
    pub substation: String,
    pub z_t_pos: C64,
    /// Positive-sequence apparent impedance `V_T / I_T` at the latest frame.
    pub z_load_pos: C64,
    pub vsi_t: f64,
    pub condition: f64,
}

/// Window-averaged `V_D / I_L` per phase.
pub fn load_impedance(
    window: &MeasurementWindow,
    node: &str,
    i_min: f64,
) -> Result<LoadImpedance, EstimatorError> {
    let channels = channel_series(window, node)?;
    let mut out = [None; 3];
    for (p, slot) in out.iter_mut().enumerate() {
        let live: Vec<bool> = channels.iter().map(|(_, c)| c.i_l[p].norm() > i_min).collect();
        if live.iter().all(|l| !l) {
            continue;
        }
        if let Some(pos) = live.iter().position(|l| !l) {
            return Err(EstimatorError::DeadChannel {
                node: node.to_string(),
                phase: phase_name(p),
                k: channels[pos].0,
            });
        }
        let sum: C64 = channels.iter().map(|(_, c)| c.v_d[p] / c.i_l[p]).sum();
        *slot = Some(sum / channels.len() as f64);
    }
    Ok(LoadImpedance(out))
}

fn channel_series(
    window: &MeasurementWindow,
    node: &str,
) -> Result<Vec<(usize, crate::measurement::Channel)>, EstimatorError> {
    window
        .frames()
        .iter()
        .map(|f| {
            f.channels
                .get(node)
                .map(|c| (f.k, *c))
                .ok_or_else(|| EstimatorError::UnknownNode(node.to_string()))
        })
        .collect()
}

/// Differences against the first frame of the window.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSystem {
    pub di: Vec<Phasor3>,
    pub dv_t: Vec<Phasor3>,
    pub dv_d: Vec<Phasor3>,
}

pub fn build_delta_system(window: &MeasurementWindow, node: &str) -> Result<DeltaSystem, EstimatorError> {
    if window.len() < 2 {
        return Err(EstimatorError::WindowTooSmall {
            frames: window.len(),
            required: 2,
        });
    }
    let series = channel_series(window, node)?;
    let frames = window.frames();
    let (c0, vt0) = (series[0].1, frames[0].v_t);
    let mut out = DeltaSystem {
        di: Vec::with_capacity(frames.len() - 1),
        dv_t: Vec::with_capacity(frames.len() - 1),
        dv_d: Vec::with_capacity(frames.len() - 1),
    };
    for (f, (_, c)) in frames.iter().zip(&series).skip(1) {
        out.di.push(c.i_l - c0.i_l);
        out.dv_t.push(f.v_t - vt0);
        out.dv_d.push(c.v_d - c0.v_d);
    }
    Ok(out)
}

/// Unknown `(i, j)` of the symmetric parametrization.
const UPPER: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

struct LinearFit {
    z: ImpedanceMatrix3,
    residual: f64,
}

/// Rows `(Z·ΔI)_p = rhs_p` for every delta, columns per parameter.
fn design_matrix(di: &[Phasor3], params: &[(usize, usize)], symmetric: bool) -> DMatrix<C64> {
    let mut a = DMatrix::<C64>::zeros(3 * di.len(), params.len());
    for (k, d) in di.iter().enumerate() {
        for (col, &(i, j)) in params.iter().enumerate() {
            a[(3 * k + i, col)] += d[j];
            if symmetric && i != j {
                a[(3 * k + j, col)] += d[i];
            }
        }
    }
    a
}

fn stack_rhs(rhs: &[Phasor3]) -> DVector<C64> {
    DVector::from_iterator(3 * rhs.len(), rhs.iter().flat_map(|p| p.0))
}

fn condition_number(a: &DMatrix<C64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Solves `min ‖A·x − b‖² + ridge·‖x‖² + mu·‖S·x‖²` through an augmented
/// least-squares system.
fn solve_augmented(
    a: &DMatrix<C64>,
    b: &DVector<C64>,
    ridge: f64,
    penalty: Option<(&DMatrix<C64>, f64)>,
) -> DVector<C64> {
    let n = a.ncols();
    let mut rows = a.nrows();
    if ridge > 0.0 {
        rows += n;
    }
    if let Some((s, _)) = penalty {
        rows += s.nrows();
    }
    let mut big = DMatrix::<C64>::zeros(rows, n);
    let mut rhs = DVector::<C64>::zeros(rows);
    big.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    rhs.rows_mut(0, a.nrows()).copy_from(b);
    let mut at = a.nrows();
    if ridge > 0.0 {
        for c in 0..n {
            big[(at + c, c)] = C64::new(ridge.sqrt(), 0.0);
        }
        at += n;
    }
    if let Some((s, mu)) = penalty {
        big.view_mut((at, 0), (s.nrows(), n)).copy_from(&(s * C64::new(mu.sqrt(), 0.0)));
    }
    big.svd(true, true)
        .solve(&rhs, 1e-300)
        .expect("SVD computed with both factors")
}

fn matrix_from_params(params: &[(usize, usize)], x: &DVector<C64>, symmetric: bool) -> ImpedanceMatrix3 {
    let mut z = ImpedanceMatrix3::zero();
    for (&(i, j), v) in params.iter().zip(x.iter()) {
        z.0[i][j] = *v;
        if symmetric {
            z.0[j][i] = *v;
        }
    }
    z
}

fn residual_norm(di: &[Phasor3], rhs: &[Phasor3], z: &ImpedanceMatrix3) -> f64 {
    di.iter()
        .zip(rhs)
        .map(|(d, r)| (z.mul_vec(d) - *r).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

fn fit_symmetric(
    di: &[Phasor3],
    rhs: &[Phasor3],
    a: &DMatrix<C64>,
    params: &[(usize, usize)],
    ridge: f64,
) -> LinearFit {
    let x = solve_augmented(a, &stack_rhs(rhs), ridge, None);
    let z = matrix_from_params(params, &x, true);
    LinearFit {
        residual: residual_norm(di, rhs, &z),
        z,
    }
}

/// General-matrix fit whose asymmetry penalty is increased (by bisection on
/// a log scale) until `‖Z − Zᵀ‖_F ≤ xi`.
fn fit_soft(
    di: &[Phasor3],
    rhs: &[Phasor3],
    energized: [bool; 3],
    ridge: f64,
    xi: f64,
) -> LinearFit {
    let params: Vec<(usize, usize)> = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .filter(|&(i, j)| energized[i] || energized[j])
        .collect();
    let a = design_matrix(di, &params, false);
    let b = stack_rhs(rhs);
    // one row per off-diagonal pair: z_ij − z_ji
    let pairs: Vec<(usize, usize)> = [(0, 1), (0, 2), (1, 2)]
        .into_iter()
        .filter(|(i, j)| params.contains(&(*i, *j)))
        .collect();
    let mut s = DMatrix::<C64>::zeros(pairs.len().max(1), params.len());
    for (r, &(i, j)) in pairs.iter().enumerate() {
        let col = |p: (usize, usize)| params.iter().position(|q| *q == p).unwrap();
        s[(r, col((i, j)))] = C64::new(1.0, 0.0);
        s[(r, col((j, i)))] = C64::new(-1.0, 0.0);
    }
    let fit = |mu: f64| {
        let penalty = (mu > 0.0).then_some((&s, mu));
        let x = solve_augmented(&a, &b, ridge, penalty);
        matrix_from_params(&params, &x, false)
    };
    let mut z = fit(0.0);
    if z.frobenius_asymmetry() > xi {
        // penalty weights relative to the data scale
        let scale = a.norm_squared().max(f64::MIN_POSITIVE);
        let (mut lo, mut hi) = (-12.0f64, 0.0f64);
        while fit(scale * 10f64.powf(hi)).frobenius_asymmetry() > xi && hi < 24.0 {
            lo = hi;
            hi += 4.0;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if fit(scale * 10f64.powf(mid)).frobenius_asymmetry() > xi {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        z = fit(scale * 10f64.powf(hi));
    }
    LinearFit {
        residual: residual_norm(di, rhs, &z),
        z,
    }
}

/// Estimates both equivalents of `node` from a window.
pub fn estimate(
    window: &MeasurementWindow,
    node: &str,
    config: &EstimatorConfig,
) -> Result<TheveninEquivalent, EstimatorError> {
    config.check()?;
    if window.len() < M_MIN {
        return Err(EstimatorError::WindowTooSmall {
            frames: window.len(),
            required: M_MIN,
        });
    }
    let z_load = load_impedance(window, node, config.i_min)?;
    let energized = z_load.energized();
    let delta = build_delta_system(window, node)?;
    let rhs_t: Vec<Phasor3> = delta.dv_t.iter().map(|v| -*v).collect();
    let rhs_d: Vec<Phasor3> = delta
        .dv_t
        .iter()
        .zip(&delta.dv_d)
        .map(|(t, d)| *t - *d)
        .collect();

    // entries coupling two de-energized phases are unobservable; they are
    // fixed at zero
    let params: Vec<(usize, usize)> = UPPER
        .iter()
        .copied()
        .filter(|&(i, j)| energized[i] || energized[j])
        .collect();
    if params.is_empty() {
        return Err(EstimatorError::DeadChannel {
            node: node.to_string(),
            phase: 'a',
            k: window.frames()[0].k,
        });
    }
    let a = design_matrix(&delta.di, &params, true);
    let condition = condition_number(&a);
    if !(condition <= config.cond_max) {
        return Err(EstimatorError::IllConditioned {
            condition,
            cond_max: config.cond_max,
        });
    }
    let (fit_t, fit_d) = match config.mode {
        EstimatorMode::ExactSymmetric => (
            fit_symmetric(&delta.di, &rhs_t, &a, &params, config.ridge),
            fit_symmetric(&delta.di, &rhs_d, &a, &params, config.ridge),
        ),
        EstimatorMode::SoftConstrained => (
            fit_soft(&delta.di, &rhs_t, energized, config.ridge, config.xi_t),
            fit_soft(&delta.di, &rhs_d, energized, config.ridge, config.xi_d),
        ),
    };
    let (e_eq, e_res) = recover_e_eq(window, node, &fit_t.z)?;
    Ok(TheveninEquivalent {
        node: node.to_string(),
        substation: window.substation_id().to_string(),
        z_eq_t: fit_t.z,
        z_eq_d: fit_d.z,
        absent_phases: z_load.absent_phases(),
        z_load,
        e_eq: Some(e_eq),
        e_eq_residual: Some(e_res),
        residual_t: fit_t.residual,
        residual_d: fit_d.residual,
        condition,
    })
}

/// Window mean of `V_T + Z_T·I` and the largest deviation from it.
pub fn recover_e_eq(
    window: &MeasurementWindow,
    node: &str,
    z_eq_t: &ImpedanceMatrix3,
) -> Result<(Phasor3, f64), EstimatorError> {
    let series = channel_series(window, node)?;
    let samples: Vec<Phasor3> = window
        .frames()
        .iter()
        .zip(&series)
        .map(|(f, (_, c))| f.v_t + z_eq_t.mul_vec(&c.i_l))
        .collect();
    let mean = samples.iter().copied().sum::<Phasor3>() * (1.0 / samples.len() as f64);
    let residual = samples
        .iter()
        .map(|s| s.max_abs_diff(&mean))
        .fold(0.0, f64::max);
    Ok((mean, residual))
}

/// Every μPMU node of the window.
pub fn estimate_window(
    window: &MeasurementWindow,
    config: &EstimatorConfig,
) -> Result<Vec<TheveninEquivalent>, EstimatorError> {
    window
        .nodes()
        .map(|n| estimate(window, n, config))
        .collect()
}

/// Scalar positive-sequence fit of `ΔV_T = −Z_T·ΔI_T` on the substation
/// PMU, and the resulting transmission-side index at the latest frame.
pub fn estimate_substation(
    window: &MeasurementWindow,
    config: &EstimatorConfig,
) -> Result<SubstationEquivalent, EstimatorError> {
    if window.len() < M_MIN {
        return Err(EstimatorError::WindowTooSmall {
            frames: window.len(),
            required: M_MIN,
        });
    }
    let mut v = Vec::with_capacity(window.len());
    let mut i = Vec::with_capacity(window.len());
    for f in window.frames() {
        let it = f.i_t.ok_or(EstimatorError::MissingSubstationCurrent(f.k))?;
        v.push(f.v_t.positive_sequence());
        i.push(it.positive_sequence());
    }
    let (mut num, mut den, mut max_di) = (ZERO, 0.0, 0.0f64);
    for k in 1..v.len() {
        let di = i[k] - i[0];
        let dv = v[k] - v[0];
        num += di.conj() * (-dv);
        den += di.norm_sqr();
        max_di = max_di.max(di.norm());
    }
    let scale = i.iter().map(|x| x.norm()).fold(0.0, f64::max);
    // a single complex unknown is identifiable as soon as some delta is
    // nonzero relative to the current level
    let condition = if max_di > 0.0 { scale / max_di } else { f64::INFINITY };
    if !(condition <= config.cond_max) {
        return Err(EstimatorError::IllConditioned {
            condition,
            cond_max: config.cond_max,
        });
    }
    let z_t_pos = num / (den + config.ridge);
    let latest = v.len() - 1;
    let z_load_pos = v[latest] / i[latest];
    Ok(SubstationEquivalent {
        substation: window.substation_id().to_string(),
        z_t_pos,
        z_load_pos,
        vsi_t: z_t_pos.norm() / z_load_pos.norm(),
        condition,
    })
}

#[derive(Serialize)]
struct EquivalentsFile<'a> {
    equivalents: &'a [TheveninEquivalent],
    substations: &'a [SubstationEquivalent],
}

/// JSON document with the node and substation equivalents.
pub fn write_json<W: Write>(
    w: W,
    equivalents: &[TheveninEquivalent],
    substations: &[SubstationEquivalent],
) -> serde_json::Result<()> {
    serde_json::to_writer_pretty(
        w,
        &EquivalentsFile {
            equivalents,
            substations,
        },
    )
}

/// Estimates grouped by substation.
pub fn by_substation(eqs: &[TheveninEquivalent]) -> BTreeMap<&str, Vec<&TheveninEquivalent>> {
    let mut out: BTreeMap<&str, Vec<&TheveninEquivalent>> = BTreeMap::new();
    for e in eqs {
        out.entry(e.substation.as_str()).or_default().push(e);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::measurement::{
        add_noise, excitation_points, sample_points, sample_trajectory, Channel, MeasurementFrame,
    };
    use crate::phasor::BalancedSpec;
    use crate::powerflow::SolverOptions;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn window_from(
        e: Phasor3,
        z_t: &ImpedanceMatrix3,
        z_d: &ImpedanceMatrix3,
        currents: &[Phasor3],
    ) -> MeasurementWindow {
        let frames = currents
            .iter()
            .enumerate()
            .map(|(k, i)| {
                let v_t = e - z_t.mul_vec(i);
                let v_d = v_t - z_d.mul_vec(i);
                MeasurementFrame {
                    k,
                    t: k as f64,
                    substation_id: "S".into(),
                    v_t,
                    i_t: Some(*i),
                    channels: BTreeMap::from([("n".to_string(), Channel { v_d, i_l: *i })]),
                }
            })
            .collect();
        MeasurementWindow::new(frames).unwrap()
    }

    pub(crate) fn random_symmetric(rng: &mut ChaCha8Rng, scale: f64) -> ImpedanceMatrix3 {
        let mut u = [ZERO; 6];
        for (n, (i, j)) in UPPER.iter().enumerate() {
            let w = if i == j { 1.0 } else { 0.3 };
            u[n] = c(rng.random_range(0.0..w), rng.random_range(0.1..2.0 * w)) * scale;
        }
        ImpedanceMatrix3::from_upper(u)
    }

    fn random_currents(rng: &mut ChaCha8Rng, m: usize) -> Vec<Phasor3> {
        let base = Phasor3::balanced(c(0.6, -0.2));
        (0..m)
            .map(|_| {
                let mut i = base;
                for x in i.0.iter_mut() {
                    *x *= c(1.0 + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
                }
                i
            })
            .collect()
    }

    fn rel_err(a: &ImpedanceMatrix3, b: &ImpedanceMatrix3) -> f64 {
        (*a - *b).frobenius_norm() / b.frobenius_norm()
    }

    #[test]
    fn constant_ratio_load_impedance() {
        let v = Phasor3::balanced(c(1.0, 0.0));
        let frame = MeasurementFrame {
            k: 0,
            t: 0.0,
            substation_id: "S".into(),
            v_t: v,
            i_t: None,
            channels: BTreeMap::from([("n".to_string(), Channel { v_d: v, i_l: v * 0.5 })]),
        };
        let w = MeasurementWindow::new(vec![frame; 4]).unwrap();
        let z = load_impedance(&w, "n", 1e-6).unwrap();
        for p in 0..3 {
            assert!((z.0[p].unwrap() - c(2.0, 0.0)).norm() < 1e-15);
        }
        assert!(z.absent_phases().is_empty());
    }

    #[test]
    fn single_phase_node_flags_absent_phases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z_t = random_symmetric(&mut rng, 0.05);
        let z_d = random_symmetric(&mut rng, 0.02);
        let currents: Vec<Phasor3> = random_currents(&mut rng, 10)
            .into_iter()
            .map(|i| Phasor3([i[0], ZERO, c(1e-9, 0.0)]))
            .collect();
        let w = window_from(Phasor3::balanced(c(1.0, 0.0)), &z_t, &z_d, &currents);
        let z = load_impedance(&w, "n", 1e-6).unwrap();
        assert_eq!(z.absent_phases(), vec!['b', 'c']);
        let eq = estimate(&w, "n", &EstimatorConfig::default()).unwrap();
        assert_eq!(eq.absent_phases, vec!['b', 'c']);
        // the energized column is observable
        for p in 0..3 {
            assert!((eq.z_eq_t.0[p][0] - z_t.0[p][0]).norm() < 1e-8);
        }
    }

    #[test]
    fn intermittent_phase_is_a_dead_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random_symmetric(&mut rng, 0.05);
        let mut currents = random_currents(&mut rng, 6);
        currents[3][1] = ZERO;
        let w = window_from(Phasor3::balanced(c(1.0, 0.0)), &z, &z, &currents);
        assert_eq!(
            load_impedance(&w, "n", 1e-6),
            Err(EstimatorError::DeadChannel {
                node: "n".into(),
                phase: 'b',
                k: 3
            })
        );
    }

    #[test]
    fn lagging_load_impedance_signs() {
        let m = cases::unbalanced_chain(1);
        let frames =
            sample_trajectory(&m, &[0.2, 0.3, 0.4], &["LD".to_string()], &SolverOptions::default())
                .unwrap();
        let w = MeasurementWindow::new(frames.clone()).unwrap();
        let z = load_impedance(&w, "LD", 1e-6).unwrap();
        for p in 0..3 {
            let zp = z.0[p].unwrap();
            assert!(zp.re > 0.0 && zp.im > 0.0);
        }
        // each frame: V/I = |V|²/conj(S) for the consumed power
        for f in &frames {
            let ch = &f.channels["LD"];
            for p in 0..3 {
                let s = ch.v_d[p] * ch.i_l[p].conj();
                let oracle = ch.v_d[p].norm_sqr() / s.conj();
                assert!((ch.v_d[p] / ch.i_l[p] - oracle).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn deltas_reference_the_first_frame() {
        let i0 = Phasor3::balanced(c(0.5, 0.0));
        let delta = Phasor3([c(0.01, 0.0), c(0.0, 0.02), c(-0.01, 0.01)]);
        let z = ImpedanceMatrix3::identity();
        let w = window_from(Phasor3::balanced(c(1.0, 0.0)), &z, &z, &[i0, i0 + delta]);
        let d = build_delta_system(&w, "n").unwrap();
        assert_eq!(d.di.len(), 1);
        assert!(d.di[0].max_abs_diff(&delta) < 1e-15);

        let w = window_from(Phasor3::balanced(c(1.0, 0.0)), &z, &z, &[i0, i0]);
        let d = build_delta_system(&w, "n").unwrap();
        assert_eq!(d.di[0], Phasor3::zero());
        assert_eq!(d.dv_t[0], Phasor3::zero());

        let w = window_from(Phasor3::balanced(c(1.0, 0.0)), &z, &z, &[i0]);
        assert!(matches!(
            build_delta_system(&w, "n"),
            Err(EstimatorError::WindowTooSmall { .. })
        ));
    }

    #[test]
    fn simulated_ramp_satisfies_delta_identity() {
        let m = cases::unbalanced_chain(1);
        let lambdas: Vec<f64> = (0..20).map(|k| 1.0 + 0.2 * k as f64 / 19.0).collect();
        // constant-impedance loads keep the circuit linear, so the deep
        // low-voltage operating points are still unique
        let opts = SolverOptions { v_min: 0.05, ..Default::default() };
        let frames = sample_trajectory(&m, &lambdas, &["LD".to_string()], &opts).unwrap();
        let w = MeasurementWindow::new(frames).unwrap();
        let d = build_delta_system(&w, "LD").unwrap();
        let z_t = m.transmission[0].z;
        let z_d = m.feeders[0].branches[0].z;
        for k in 0..d.di.len() {
            assert!((z_t.mul_vec(&d.di[k]) + d.dv_t[k]).norm() < 1e-10);
            assert!((z_d.mul_vec(&d.di[k]) + d.dv_d[k] - d.dv_t[k]).norm() < 1e-10);
        }
    }

    #[test]
    fn excited_chain_recovers_line_impedances() {
        let m = cases::unbalanced_chain(2);
        let frames = sample_points(
            &m,
            &excitation_points(0.5, 20, 0.02, 11),
            &["LD".to_string()],
            &SolverOptions::default(),
        )
        .unwrap();
        let w = MeasurementWindow::new(frames).unwrap();
        let eq = estimate(&w, "LD", &EstimatorConfig::default()).unwrap();
        assert!(rel_err(&eq.z_eq_t, &m.transmission[0].z) < 1e-8);
        assert!(rel_err(&eq.z_eq_d, &m.feeders[0].branches[0].z) < 1e-8);
        assert!(eq.e_eq_residual.unwrap() < 1e-10);
        assert!(eq.e_eq.unwrap().max_abs_diff(&m.source.voltage) < 1e-9);
    }

    #[test]
    fn balanced_truth_gives_balanced_estimate() {
        let z_t = ImpedanceMatrix3::balanced(BalancedSpec {
            z_self: c(0.02, 0.12),
            z_mutual: c(0.005, 0.04),
        });
        let z_d = ImpedanceMatrix3::balanced(BalancedSpec {
            z_self: c(0.03, 0.05),
            z_mutual: c(0.01, 0.02),
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let currents = random_currents(&mut rng, 12);
        let e = Phasor3::balanced(c(1.02, 0.03));
        let w = window_from(e, &z_t, &z_d, &currents);
        let eq = estimate(&w, "n", &EstimatorConfig::default()).unwrap();
        for z in [eq.z_eq_t, eq.z_eq_d] {
            let d = z.0[0][0];
            let o = z.0[0][1];
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { d } else { o };
                    assert!((z.0[i][j] - want).norm() < 1e-6);
                }
            }
        }
        let a = crate::phasor::rotator();
        let ee = eq.e_eq.unwrap();
        assert!((ee.b() - a * a * ee.a()).norm() < 1e-9);
        assert!((ee.c() - a * ee.a()).norm() < 1e-9);
    }

    #[test]
    fn one_direction_is_ill_conditioned() {
        let i0 = Phasor3::balanced(c(0.5, -0.1));
        let currents: Vec<Phasor3> = (0..8).map(|k| i0 * (1.0 + 0.01 * k as f64)).collect();
        let z = ImpedanceMatrix3::identity();
        let w = window_from(Phasor3::balanced(c(1.0, 0.0)), &z, &z, &currents);
        assert!(matches!(
            estimate(&w, "n", &EstimatorConfig::default()),
            Err(EstimatorError::IllConditioned { .. })
        ));
    }

    #[test]
    fn short_window_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_symmetric(&mut rng, 0.1);
        let w = window_from(Phasor3::balanced(c(1.0, 0.0)), &z, &z, &random_currents(&mut rng, 3));
        assert_eq!(
            estimate(&w, "n", &EstimatorConfig::default()),
            Err(EstimatorError::WindowTooSmall {
                frames: 3,
                required: M_MIN
            })
        );
    }

    #[test]
    fn zero_current_window_recovers_source() {
        let v = Phasor3::balanced(c(0.97, 0.02));
        let z = ImpedanceMatrix3::identity();
        let w = window_from(v, &z, &z, &[Phasor3::zero(); 4]);
        let (e, res) = recover_e_eq(&w, "n", &z).unwrap();
        assert_eq!(e, v);
        assert_eq!(res, 0.0);
    }

    #[test]
    fn soft_mode_respects_budget_and_matches_exact_on_clean_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z_t = random_symmetric(&mut rng, 0.08);
        let z_d = random_symmetric(&mut rng, 0.03);
        let w = window_from(Phasor3::balanced(c(1.0, 0.0)), &z_t, &z_d, &random_currents(&mut rng, 20));
        let soft = EstimatorConfig {
            mode: EstimatorMode::SoftConstrained,
            ..Default::default()
        };
        let eq = estimate(&w, "n", &soft).unwrap();
        assert!(rel_err(&eq.z_eq_t, &z_t) < 1e-8);
        let noisy = MeasurementWindow::new(add_noise(w.frames(), 1e-2, 4).unwrap()).unwrap();
        let tight = EstimatorConfig {
            xi_t: 0.01,
            xi_d: 0.01,
            ..soft
        };
        let eq = estimate(&noisy, "n", &tight).unwrap();
        assert!(eq.z_eq_t.frobenius_asymmetry() <= 0.01 * (1.0 + 1e-9));
        assert!(eq.z_eq_d.frobenius_asymmetry() <= 0.01 * (1.0 + 1e-9));
        assert!(estimate(&w, "n", &EstimatorConfig { xi_t: 0.0, ..soft }).is_err());
    }

    #[test]
    fn ridge_shrinks_the_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = random_symmetric(&mut rng, 0.08);
        let w = window_from(Phasor3::balanced(c(1.0, 0.0)), &z, &z, &random_currents(&mut rng, 10));
        let plain = estimate(&w, "n", &EstimatorConfig::default()).unwrap();
        let ridged = estimate(&w, "n", &EstimatorConfig { ridge: 1e-2, ..Default::default() }).unwrap();
        assert!(ridged.z_eq_t.frobenius_norm() < plain.z_eq_t.frobenius_norm());
    }

    #[test]
    fn substation_positive_sequence_fit() {
        let m = cases::chain_case(1);
        let frames = sample_points(
            &m,
            &excitation_points(4.0, 10, 0.02, 1),
            &["LD".to_string()],
            &SolverOptions::default(),
        )
        .unwrap();
        let w = MeasurementWindow::new(frames).unwrap();
        let s = estimate_substation(&w, &EstimatorConfig::default()).unwrap();
        assert!((s.z_t_pos - c(0.0, 0.08)).norm() < 1e-10);
        let f = w.latest();
        let want = f.v_t.a() / f.i_t.unwrap().a();
        assert!((s.z_load_pos - want).norm() < 1e-10);
    }

    #[test]
    fn json_export_has_nested_complex_arrays() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = random_symmetric(&mut rng, 0.08);
        let w = window_from(Phasor3::balanced(c(1.0, 0.0)), &z, &z, &random_currents(&mut rng, 8));
        let eqs = estimate_window(&w, &EstimatorConfig::default()).unwrap();
        let subs = vec![estimate_substation(&w, &EstimatorConfig::default()).unwrap()];
        let mut buf = Vec::new();
        write_json(&mut buf, &eqs, &subs).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        let zt = &v["equivalents"][0]["z_eq_t"];
        assert_eq!(zt.as_array().unwrap().len(), 3);
        assert_eq!(zt[0][1].as_array().unwrap().len(), 2);
        assert!(v["equivalents"][0]["condition"].as_f64().unwrap() >= 1.0);
        assert_eq!(by_substation(&eqs)["S"].len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rotation_leaves_impedances_unchanged(seed in 0u64..10_000, theta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z_t = random_symmetric(&mut rng, 0.08);
            let z_d = random_symmetric(&mut rng, 0.03);
            let currents = random_currents(&mut rng, 12);
            let e = Phasor3::balanced(c(1.0, 0.0));
            let base = estimate(&window_from(e, &z_t, &z_d, &currents), "n", &EstimatorConfig::default()).unwrap();
            let r = C64::from_polar(1.0, theta);
            let rotated: Vec<Phasor3> = currents.iter().map(|i| *i * r).collect();
            let rot = estimate(&window_from(e * r, &z_t, &z_d, &rotated), "n", &EstimatorConfig::default()).unwrap();
            prop_assert!(rot.z_eq_t.max_abs_diff(&base.z_eq_t) < 1e-10);
            prop_assert!(rot.z_eq_d.max_abs_diff(&base.z_eq_d) < 1e-10);
        }

        #[test]
        fn noiseless_windows_are_recovered_exactly(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z_t = random_symmetric(&mut rng, 0.08);
            let z_d = random_symmetric(&mut rng, 0.03);
            let w = window_from(Phasor3::balanced(c(1.0, 0.0)), &z_t, &z_d, &random_currents(&mut rng, 20));
            let eq = estimate(&w, "n", &EstimatorConfig::default()).unwrap();
            prop_assert!(rel_err(&eq.z_eq_t, &z_t) < 1e-8);
            prop_assert!(rel_err(&eq.z_eq_d, &z_d) < 1e-8);
            prop_assert!(eq.z_eq_t.asymmetry() <= 1e-12 && eq.z_eq_d.asymmetry() <= 1e-12);
        }
    }
}
