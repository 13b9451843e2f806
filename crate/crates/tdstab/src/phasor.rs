//! Three-phase phasors and 3×3 complex impedance matrices.
//!
//! Everything is stored in rectangular form. Angles only appear when a
//! caller asks for them at an I/O boundary.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;

/// Relative tolerance used when checking balanced (circulant-symmetric) structure.
pub const BALANCED_TOL: f64 = 1e-9;

/// The operator `a = 1∠120°`.
pub fn rotator() -> C64 {
    C64::from_polar(1.0, 2.0 * std::f64::consts::PI / 3.0)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhasorError {
    #[error("matrix is not balanced: max structural deviation {deviation:.3e}")]
    NotBalanced { deviation: f64 },
}

/// A per-phase (a, b, c) complex quantity: voltage, current or power.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Phasor3(pub [C64; 3]);

impl Phasor3 {
    pub const fn new(a: C64, b: C64, c: C64) -> Self {
        Self([a, b, c])
    }

    pub fn zero() -> Self {
        Self([C64::new(0.0, 0.0); 3])
    }

    pub fn splat(v: C64) -> Self {
        Self([v; 3])
    }

    /// Positive-sequence set `magnitude · (1∠0, 1∠−120°, 1∠+120°)`.
    pub fn balanced(magnitude: C64) -> Self {
        let a = rotator();
        Self([magnitude, magnitude * a * a, magnitude * a])
    }

    pub fn a(&self) -> C64 {
        self.0[0]
    }
    pub fn b(&self) -> C64 {
        self.0[1]
    }
    pub fn c(&self) -> C64 {
        self.0[2]
    }

    pub fn iter(&self) -> impl Iterator<Item = &C64> {
        self.0.iter()
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self([f(self.0[0]), f(self.0[1]), f(self.0[2])])
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Self {
        Self([
            f(self.0[0], other.0[0]),
            f(self.0[1], other.0[1]),
            f(self.0[2], other.0[2]),
        ])
    }

    /// Conjugate-transposed inner product `selfᴴ · other`.
    pub fn dot(&self, other: &Self) -> C64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(l, r)| l.conj() * r)
            .sum()
    }

    /// `selfᴴ · self`, always real and non-negative.
    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn sum(&self) -> C64 {
        self.0.iter().sum()
    }

    pub fn magnitudes(&self) -> [f64; 3] {
        [self.0[0].norm(), self.0[1].norm(), self.0[2].norm()]
    }

    pub fn min_magnitude(&self) -> f64 {
        self.magnitudes().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Per-phase complex power `V · conj(I)`.
    pub fn power(&self, current: &Self) -> Self {
        self.zip_with(current, |v, i| v * i.conj())
    }

    /// Positive-sequence component `(x_a + a·x_b + a²·x_c) / 3`.
    pub fn positive_sequence(&self) -> C64 {
        let a = rotator();
        (self.0[0] + a * self.0[1] + a * a * self.0[2]) / 3.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (*self - *other).0.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

impl Index<usize> for Phasor3 {
    type Output = C64;
    fn index(&self, i: usize) -> &C64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Phasor3 {
    fn index_mut(&mut self, i: usize) -> &mut C64 {
        &mut self.0[i]
    }
}

impl Add for Phasor3 {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.zip_with(&rhs, |l, r| l + r)
    }
}

impl Sub for Phasor3 {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.zip_with(&rhs, |l, r| l - r)
    }
}

impl Neg for Phasor3 {
    type Output = Self;
    fn neg(self) -> Self {
        self.map(|v| -v)
    }
}

impl Mul<C64> for Phasor3 {
    type Output = Self;
    fn mul(self, rhs: C64) -> Self {
        self.map(|v| v * rhs)
    }
}

impl Mul<f64> for Phasor3 {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.map(|v| v * rhs)
    }
}

impl std::iter::Sum for Phasor3 {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |acc, x| acc + x)
    }
}

/// Diagonal and off-diagonal entries of a balanced (transposed-line) matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedSpec {
    pub z_self: C64,
    pub z_mutual: C64,
}

/// A complex 3×3 matrix, row-major, in per-unit ohms (or siemens when used
/// as an admittance).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImpedanceMatrix3(pub [[C64; 3]; 3]);

impl ImpedanceMatrix3 {
    pub fn zero() -> Self {
        Self([[C64::new(0.0, 0.0); 3]; 3])
    }

    pub fn identity() -> Self {
        Self::diagonal(Phasor3::splat(C64::new(1.0, 0.0)))
    }

    pub fn diagonal(d: Phasor3) -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            m.0[i][i] = d[i];
        }
        m
    }

    pub fn balanced(spec: BalancedSpec) -> Self {
        let mut m = Self([[spec.z_mutual; 3]; 3]);
        for i in 0..3 {
            m.0[i][i] = spec.z_self;
        }
        m
    }

    /// Builds a symmetric matrix from its upper triangle
    /// `[z00, z01, z02, z11, z12, z22]`.
    pub fn from_upper(u: [C64; 6]) -> Self {
        Self([[u[0], u[1], u[2]], [u[1], u[3], u[4]], [u[2], u[4], u[5]]])
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.0[i][j]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                t.0[i][j] = self.0[j][i];
            }
        }
        t
    }

    pub fn scale(&self, k: C64) -> Self {
        let mut m = *self;
        m.0.iter_mut().flatten().for_each(|v| *v *= k);
        m
    }

    pub fn mul_vec(&self, x: &Phasor3) -> Phasor3 {
        let mut out = Phasor3::zero();
        for i in 0..3 {
            out[i] = (0..3).map(|j| self.0[i][j] * x[j]).sum();
        }
        out
    }

    pub fn mul_mat(&self, rhs: &Self) -> Self {
        let mut out = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest entry-wise `|z[i][j] − z[j][i]|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in (i + 1)..3 {
                worst = worst.max((self.0[i][j] - self.0[j][i]).norm());
            }
        }
        worst
    }

    /// `‖Z − Zᵀ‖_F`.
    pub fn frobenius_asymmetry(&self) -> f64 {
        (*self - self.transpose()).frobenius_norm()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.asymmetry() <= tol
    }

    pub fn is_finite(&self) -> bool {
        self.0
            .iter()
            .flatten()
            .all(|v| v.re.is_finite() && v.im.is_finite())
    }

    fn balanced_deviation(&self) -> f64 {
        let d = self.0[0][0];
        let o = self.0[0][1];
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { d } else { o };
                dev = dev.max((self.0[i][j] - target).norm());
            }
        }
        let scale = self.0.iter().flatten().map(|v| v.norm()).fold(1.0, f64::max);
        dev / scale
    }

    pub fn is_balanced(&self) -> bool {
        self.balanced_deviation() <= BALANCED_TOL
    }

    /// Positive-sequence impedance `z_self − z_mutual` of a balanced matrix.
    pub fn positive_sequence(&self) -> Result<C64, PhasorError> {
        let deviation = self.balanced_deviation();
        if deviation > BALANCED_TOL {
            return Err(PhasorError::NotBalanced { deviation });
        }
        Ok(self.0[0][0] - self.0[0][1])
    }

    pub fn determinant(&self) -> C64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse by cofactors; `None` when the matrix is numerically singular.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.determinant();
        let scale = self.frobenius_norm().powi(3);
        if det.norm() <= 1e-14 * scale.max(f64::MIN_POSITIVE) || !det.is_finite() {
            return None;
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = Self(adj);
        inv.0.iter_mut().flatten().for_each(|v| *v /= det);
        Some(inv)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (*self - *other)
            .0
            .iter()
            .flatten()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }
}

impl Add for ImpedanceMatrix3 {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut m = self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] += rhs.0[i][j];
            }
        }
        m
    }
}

impl Sub for ImpedanceMatrix3 {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut m = self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] -= rhs.0[i][j];
            }
        }
        m
    }
}

impl Mul<Phasor3> for ImpedanceMatrix3 {
    type Output = Phasor3;
    fn mul(self, rhs: Phasor3) -> Phasor3 {
        self.mul_vec(&rhs)
    }
}

pub fn balanced_matrix(spec: BalancedSpec) -> ImpedanceMatrix3 {
    ImpedanceMatrix3::balanced(spec)
}

pub fn positive_sequence(m: &ImpedanceMatrix3) -> Result<C64, PhasorError> {
    m.positive_sequence()
}

pub fn balanced_current(magnitude: C64) -> Phasor3 {
    Phasor3::balanced(magnitude)
}

/// `Σᵢⱼ conj(leftᵢ)·m[i][j]·rightⱼ`.
pub fn quadratic_form(left: &Phasor3, m: &ImpedanceMatrix3, right: &Phasor3) -> C64 {
    left.dot(&m.mul_vec(right))
}
