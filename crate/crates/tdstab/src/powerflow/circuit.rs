//! Flattened three-phase nodal circuit and a rectangular-coordinate Newton
//! solver on its current-mismatch equations.

use nalgebra::{DMatrix, DVector};

use crate::phasor::{C64, ImpedanceMatrix3, Phasor3};

const MAX_BACKTRACK: usize = 10;

#[derive(Clone, Debug)]
pub(crate) struct CircuitBranch {
    pub from: usize,
    pub to: usize,
    pub y: ImpedanceMatrix3,
}

/// Nodes are either fixed-voltage (slack) or free. Loads are described per
/// node by a constant-power part (consumption positive, injections negative)
/// and a constant-admittance part.
#[derive(Clone, Debug, Default)]
pub(crate) struct Circuit {
    pub names: Vec<String>,
    pub fixed: Vec<Option<Phasor3>>,
    pub branches: Vec<CircuitBranch>,
    pub power: Vec<Phasor3>,
    pub admittance: Vec<Phasor3>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NewtonSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub v_min: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct NewtonOutcome {
    pub voltages: Vec<Phasor3>,
    pub iterations: usize,
    pub mismatch: f64,
}

#[derive(Clone, Debug)]
pub(crate) enum NewtonFailure {
    MaxIterations { iterations: usize, mismatch: f64 },
    Collapse { node: String, magnitude: f64 },
    Singular { iterations: usize },
}

const ZERO: C64 = C64::new(0.0, 0.0);

impl Circuit {
    pub fn add_node(&mut self, name: impl Into<String>, fixed: Option<Phasor3>) -> usize {
        self.names.push(name.into());
        self.fixed.push(fixed);
        self.power.push(Phasor3::zero());
        self.admittance.push(Phasor3::zero());
        self.names.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Load current drawn at node `n` for voltage `v`.
    pub fn load_current(&self, n: usize, v: &Phasor3) -> Phasor3 {
        let mut i = self.admittance[n].zip_with(v, |y, v| y * v);
        for p in 0..3 {
            let s = self.power[n][p];
            if s != ZERO {
                i[p] += (s / v[p]).conj();
            }
        }
        i
    }

    /// KCL current mismatch at every node (outgoing branch current + load
    /// current). Entries for fixed nodes are the net injection required.
    pub fn residual(&self, v: &[Phasor3]) -> Vec<Phasor3> {
        let mut f: Vec<Phasor3> = (0..self.names.len())
            .map(|n| self.load_current(n, &v[n]))
            .collect();
        for b in &self.branches {
            let i = b.y.mul_vec(&(v[b.from] - v[b.to]));
            f[b.from] = f[b.from] + i;
            f[b.to] = f[b.to] - i;
        }
        f
    }

    /// Largest per-phase complex power mismatch `|V·conj(F)|` over free nodes.
    pub fn power_mismatch(&self, v: &[Phasor3]) -> f64 {
        let f = self.residual(v);
        (0..self.names.len())
            .filter(|&n| self.fixed[n].is_none())
            .flat_map(|n| (0..3).map(move |p| (n, p)))
            .map(|(n, p)| (v[n][p] * f[n][p].conj()).norm())
            .fold(0.0, |acc: f64, x| if x.is_nan() { f64::NAN } else { acc.max(x) })
    }

    fn collapse_check(&self, v: &[Phasor3], v_min: f64) -> Option<(usize, f64)> {
        (0..self.names.len())
            .filter(|&n| self.fixed[n].is_none())
            .map(|n| (n, v[n].min_magnitude()))
            .find(|(_, m)| !m.is_finite() || *m < v_min)
    }

    /// Damped Newton–Raphson from `v0` (fixed nodes are overwritten with their set
    /// points).
    pub fn newton(
        &self,
        v0: &[Phasor3],
        settings: NewtonSettings,
    ) -> Result<NewtonOutcome, NewtonFailure> {
        let n = self.names.len();
        let mut v: Vec<Phasor3> = v0.to_vec();
        for (k, fixed) in self.fixed.iter().enumerate() {
            if let Some(fv) = fixed {
                v[k] = *fv;
            }
        }
        let free: Vec<usize> = (0..n).filter(|&k| self.fixed[k].is_none()).collect();
        let mut slot = vec![usize::MAX; n];
        for (u, &k) in free.iter().enumerate() {
            slot[k] = u;
        }
        let dim = 6 * free.len();
        if dim == 0 {
            return Ok(NewtonOutcome {
                voltages: v,
                iterations: 0,
                mismatch: 0.0,
            });
        }

        let mut iterations = 0;
        loop {
            let mismatch = self.power_mismatch(&v);
            if mismatch.is_finite() && mismatch <= settings.tol {
                return Ok(NewtonOutcome {
                    voltages: v,
                    iterations,
                    mismatch,
                });
            }
            if let Some((node, magnitude)) = self.collapse_check(&v, settings.v_min) {
                return Err(NewtonFailure::Collapse {
                    node: self.names[node].clone(),
                    magnitude,
                });
            }
            if iterations >= settings.max_iter || !mismatch.is_finite() {
                return Err(NewtonFailure::MaxIterations {
                    iterations,
                    mismatch,
                });
            }
            iterations += 1;

            let (a_blocks, b_diag) = self.wirtinger(&v);
            let mut jac = DMatrix::<f64>::zeros(dim, dim);
            for (&(r, c), a) in &a_blocks {
                let (ur, uc) = (slot[r], slot[c]);
                if ur == usize::MAX || uc == usize::MAX {
                    continue;
                }
                let bmat = if r == c { b_diag[r] } else { Phasor3::zero() };
                for p in 0..3 {
                    for q in 0..3 {
                        let bpq = if p == q { bmat[p] } else { ZERO };
                        let plus = a.0[p][q] + bpq;
                        let minus = a.0[p][q] - bpq;
                        let (row_re, row_im) = (6 * ur + p, 6 * ur + 3 + p);
                        let (col_re, col_im) = (6 * uc + q, 6 * uc + 3 + q);
                        jac[(row_re, col_re)] += plus.re;
                        jac[(row_re, col_im)] += -minus.im;
                        jac[(row_im, col_re)] += plus.im;
                        jac[(row_im, col_im)] += minus.re;
                    }
                }
            }
            let f = self.residual(&v);
            let mut rhs = DVector::<f64>::zeros(dim);
            for (u, &k) in free.iter().enumerate() {
                for p in 0..3 {
                    rhs[6 * u + p] = -f[k][p].re;
                    rhs[6 * u + 3 + p] = -f[k][p].im;
                }
            }
            let Some(dx) = jac.lu().solve(&rhs) else {
                return Err(NewtonFailure::Singular { iterations });
            };
            // backtrack while the full step increases the current mismatch;
            // near the nose undamped steps overshoot into low voltages
            let norm0 = rhs.norm();
            let mut alpha = 1.0;
            let mut trial = v.clone();
            for _ in 0..MAX_BACKTRACK {
                for (u, &k) in free.iter().enumerate() {
                    for p in 0..3 {
                        trial[k][p] = v[k][p] + C64::new(dx[6 * u + p], dx[6 * u + 3 + p]) * alpha;
                    }
                }
                if self.free_residual_norm(&trial, &free) < norm0 {
                    break;
                }
                alpha *= 0.5;
            }
            v = trial;
        }
    }

    fn free_residual_norm(&self, v: &[Phasor3], free: &[usize]) -> f64 {
        let f = self.residual(v);
        free.iter().map(|&k| f[k].norm_sqr()).sum::<f64>().sqrt()
    }

    /// Holomorphic Jacobian blocks `∂F/∂V` (sparse, by node pair) and the
    /// diagonal anti-holomorphic part `∂F/∂conj(V)` of constant-power loads.
    fn wirtinger(
        &self,
        v: &[Phasor3],
    ) -> (
        std::collections::HashMap<(usize, usize), ImpedanceMatrix3>,
        Vec<Phasor3>,
    ) {
        use std::collections::HashMap;
        let n = self.names.len();
        let mut a: HashMap<(usize, usize), ImpedanceMatrix3> = HashMap::new();
        for k in 0..n {
            a.insert((k, k), ImpedanceMatrix3::diagonal(self.admittance[k]));
        }
        for b in &self.branches {
            let neg = b.y.scale(C64::new(-1.0, 0.0));
            for (key, m) in [
                ((b.from, b.from), b.y),
                ((b.to, b.to), b.y),
                ((b.from, b.to), neg),
                ((b.to, b.from), neg),
            ] {
                let e = a.entry(key).or_insert_with(ImpedanceMatrix3::zero);
                *e = *e + m;
            }
        }
        let b_diag = (0..n)
            .map(|k| {
                let mut d = Phasor3::zero();
                for p in 0..3 {
                    let s = self.power[k][p];
                    if s != ZERO {
                        let vc = v[k][p].conj();
                        d[p] = -s.conj() / (vc * vc);
                    }
                }
                d
            })
            .collect();
        (a, b_diag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn two_bus(x: f64, p: f64) -> Circuit {
        let mut ckt = Circuit::default();
        let s = ckt.add_node("S", Some(Phasor3::balanced(c(1.0, 0.0))));
        let l = ckt.add_node("L", None);
        let z = ImpedanceMatrix3::diagonal(Phasor3::splat(c(0.0, x)));
        ckt.branches.push(CircuitBranch { from: s, to: l, y: z.inverse().unwrap() });
        ckt.power[l] = Phasor3::splat(c(p, 0.0));
        ckt
    }

    const SETTINGS: NewtonSettings = NewtonSettings { tol: 1e-12, max_iter: 100, v_min: 0.3 };

    #[test]
    fn newton_matches_analytic_two_bus_root() {
        let ckt = two_bus(0.1, 1.0);
        let v0 = vec![Phasor3::balanced(c(1.0, 0.0)); 2];
        let out = ckt.newton(&v0, SETTINGS).unwrap();
        // upper root of V⁴ − V² + X²P² = 0
        let want = ((1.0 + (1.0f64 - 4.0 * 0.01).sqrt()) / 2.0).sqrt();
        for m in out.voltages[1].magnitudes() {
            assert!((m - want).abs() < 1e-12, "{m} vs {want}");
        }
    }

    #[test]
    fn newton_fails_beyond_nose() {
        // P_max = 1 / (2·0.1) = 5 per phase
        let ckt = two_bus(0.1, 5.2);
        let v0 = vec![Phasor3::balanced(c(1.0, 0.0)); 2];
        assert!(ckt.newton(&v0, SETTINGS).is_err());
    }

    #[test]
    fn linear_circuit_converges_in_one_step() {
        let mut ckt = two_bus(0.1, 0.0);
        ckt.admittance[1] = Phasor3::splat(c(1.0, 0.0));
        let v0 = vec![Phasor3::balanced(c(1.0, 0.0)); 2];
        let out = ckt.newton(&v0, SETTINGS).unwrap();
        assert!(out.iterations <= 2);
        let want = c(1.0, 0.0) / c(1.0, 0.1);
        assert!((out.voltages[1].a() - want).norm() < 1e-12);
    }
}
