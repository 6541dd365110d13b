//! Uniform spatial grid on [0, 1] and the trapezoid quadrature
//! conventions shared by every module.
//!
//! All discrete convolutions in this crate use one fixed rule so that
//! kernel solves, transforms and residual checks agree bit for bit:
//!
//! ```text
//!   (a * b)(x_i) ~= dx * sum_{j=0..i} c_j a_{i-j} b_j,
//!   c_0 = c_i = 1/2, interior c_j = 1, and (a * b)(x_0) = 0.
//! ```
//!
//! The rule is symmetric in its weights, so the discrete convolution
//! commutes exactly. It is only associative up to O(dx^2).

use crate::error::{Error, Result};

/// Uniform grid with `n` points covering [0, 1], spacing `dx = 1/(n-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    n: usize,
    dx: f64,
}

impl SpatialGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("grid needs at least 2 points, got {n}")));
        }
        Ok(SpatialGrid {
            n,
            dx: 1.0 / (n - 1) as f64,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    /// Sample a scalar function at every grid point.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.n).map(|i| f(self.x(i))).collect()
    }
}

/// Trapezoid weight for index `j` in a sum over `0..=i`.
#[inline]
pub fn trap_weight(j: usize, i: usize) -> f64 {
    if i == 0 {
        0.0
    } else if j == 0 || j == i {
        0.5
    } else {
        1.0
    }
}

/// One entry of the discrete convolution, `(a * b)(x_i)`.
///
/// Terms are accumulated in symmetric pairs `(j, i-j)` so that
/// swapping the arguments produces the bit-identical result.
#[inline]
pub fn conv_at(a: &[f64], b: &[f64], i: usize, dx: f64) -> f64 {
    if i == 0 {
        return 0.0;
    }
    let mut acc = 0.5 * (a[i] * b[0] + a[0] * b[i]);
    let mut j = 1;
    while 2 * j < i {
        acc += a[i - j] * b[j] + a[j] * b[i - j];
        j += 1;
    }
    if i % 2 == 0 && i >= 2 {
        acc += a[i / 2] * b[i / 2];
    }
    dx * acc
}

/// Full discrete convolution of two grid functions.
pub fn conv(a: &[f64], b: &[f64], dx: f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    (0..a.len()).map(|i| conv_at(a, b, i, dx)).collect()
}

/// Composite trapezoid integral over the whole grid.
pub fn trapz(v: &[f64], dx: f64) -> f64 {
    match v.len() {
        0 | 1 => 0.0,
        n => {
            let mut acc = 0.5 * (v[0] + v[n - 1]);
            for &x in &v[1..n - 1] {
                acc += x;
            }
            dx * acc
        }
    }
}

/// Squared L2 norm, trapezoid rule.
pub fn l2_sq(v: &[f64], dx: f64) -> f64 {
    match v.len() {
        0 | 1 => 0.0,
        n => {
            let mut acc = 0.5 * (v[0] * v[0] + v[n - 1] * v[n - 1]);
            for &x in &v[1..n - 1] {
                acc += x * x;
            }
            dx * acc
        }
    }
}

/// Spatial derivative: central differences inside, one-sided at the ends.
pub fn diff(v: &[f64], dx: f64) -> Vec<f64> {
    let n = v.len();
    let mut d = vec![0.0; n];
    if n < 2 {
        return d;
    }
    d[0] = (v[1] - v[0]) / dx;
    d[n - 1] = (v[n - 1] - v[n - 2]) / dx;
    for i in 1..n - 1 {
        d[i] = (v[i + 1] - v[i - 1]) / (2.0 * dx);
    }
    d
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}
