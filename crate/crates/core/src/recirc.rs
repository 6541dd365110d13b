//! Recirculation coefficient families `beta(x, nu)` and their bounds.
//!
//! The scheduling variable `nu` is the boundary value `u(0, t)` of the
//! plant and is restricted to a box `|nu| <= nu_box`. Every family
//! exposes the coefficient itself plus the three partials `beta_x`,
//! `beta_nu` and `beta_xnu` that the derivative kernel solves need.
//!
//! The Chebyshev family
//!
//! ```text
//!   beta(x, nu) = A cos((gamma + nu) acos x)
//! ```
//!
//! has x-derivatives that are singular at x = 1 whenever `gamma + nu`
//! is not an integer. Analytic partials are therefore only evaluated
//! for `x <= 1 - EPS_SING`; past that point the caller either gets a
//! `Singularity` error (analytic mode) or a one-sided finite
//! difference (finite difference mode).

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;

/// Guard band below x = 1 inside which analytic x-derivatives of the
/// Chebyshev family are refused.
pub const EPS_SING: f64 = 1e-6;

/// Step for the finite difference fallback.
const FD_H: f64 = 1e-6;

/// How x-derivatives are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivMode {
    /// Closed-form partials; errors inside the singular guard band.
    Analytic,
    /// Second order finite differences, one-sided at the right endpoint.
    FiniteDifference,
}

#[derive(Debug, Clone)]
pub enum FamilyKind {
    /// `beta(x, nu) = A cos((gamma + nu) acos x)`.
    Chebyshev { amplitude: f64, gamma: f64 },
    /// `beta(x, nu) = b`, independent of both arguments.
    Constant { b: f64 },
    /// Bilinear interpolation of sampled tables of beta and its partials.
    Tabulated(Box<TabulatedData>),
}

#[derive(Debug, Clone)]
pub struct TabulatedData {
    pub xs: Vec<f64>,
    pub nus: Vec<f64>,
    /// Row-major `[nu][x]` tables.
    pub beta: Vec<f64>,
    pub beta_x: Vec<f64>,
    pub beta_nu: Vec<f64>,
    pub beta_xnu: Vec<f64>,
}

/// All four values of the coefficient at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partials {
    pub beta: f64,
    pub beta_x: f64,
    pub beta_nu: f64,
    pub beta_xnu: f64,
}

/// Suprema of |beta| and its partials over `x in [0,1]`, `|nu| <= nu_box`,
/// plus their maximum `alpha`. Sampled, not certified: these feed
/// property checks, not safety logic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsVector {
    pub b_beta: f64,
    pub b_beta_x: f64,
    pub b_beta_nu: f64,
    pub b_beta_xnu: f64,
    pub alpha: f64,
}

impl BoundsVector {
    fn new(b_beta: f64, b_beta_x: f64, b_beta_nu: f64, b_beta_xnu: f64) -> Self {
        BoundsVector {
            b_beta,
            b_beta_x,
            b_beta_nu,
            b_beta_xnu,
            alpha: b_beta.max(b_beta_x).max(b_beta_nu).max(b_beta_xnu),
        }
    }

    /// `alpha_nu = max(B_beta, B_beta_nu)`.
    pub fn alpha_nu(&self) -> f64 {
        self.b_beta.max(self.b_beta_nu)
    }
}

#[derive(Debug, Clone)]
pub struct RecircFamily {
    kind: FamilyKind,
    nu_box: f64,
    deriv: DerivMode,
}

impl RecircFamily {
    pub fn chebyshev(amplitude: f64, gamma: f64, nu_box: f64) -> Self {
        RecircFamily {
            kind: FamilyKind::Chebyshev { amplitude, gamma },
            nu_box,
            deriv: DerivMode::Analytic,
        }
    }

    pub fn constant(b: f64, nu_box: f64) -> Self {
        RecircFamily {
            kind: FamilyKind::Constant { b },
            nu_box,
            deriv: DerivMode::Analytic,
        }
    }

    pub fn tabulated(data: TabulatedData, nu_box: f64) -> Result<Self> {
        if data.xs.len() < 2 || data.nus.len() < 2 {
            return Err(Error::Config("tabulated family needs at least a 2x2 table".into()));
        }
        let cells = data.xs.len() * data.nus.len();
        for (name, t) in [
            ("beta", &data.beta),
            ("beta_x", &data.beta_x),
            ("beta_nu", &data.beta_nu),
            ("beta_xnu", &data.beta_xnu),
        ] {
            if t.len() != cells {
                return Err(Error::Shape(format!(
                    "{name} table has {} entries, expected {cells}",
                    t.len()
                )));
            }
        }
        Ok(RecircFamily {
            kind: FamilyKind::Tabulated(Box::new(data)),
            nu_box,
            deriv: DerivMode::Analytic,
        })
    }

    /// Sample any family into a tabulated one on the given grids.
    /// Derivatives at the singular endpoint fall back to one-sided
    /// finite differences.
    pub fn to_tabulated(&self, nx: usize, nnu: usize) -> Result<RecircFamily> {
        let xg = SpatialGrid::new(nx)?;
        if nnu < 2 {
            return Err(Error::Config("tabulation needs at least 2 nu samples".into()));
        }
        let fd = self.clone().with_deriv_mode(DerivMode::FiniteDifference);
        let nus: Vec<f64> = (0..nnu)
            .map(|j| -self.nu_box + 2.0 * self.nu_box * j as f64 / (nnu - 1) as f64)
            .collect();
        let mut beta = Vec::with_capacity(nx * nnu);
        let mut beta_x = Vec::with_capacity(nx * nnu);
        let mut beta_nu = Vec::with_capacity(nx * nnu);
        let mut beta_xnu = Vec::with_capacity(nx * nnu);
        for &nu in &nus {
            for i in 0..nx {
                let p = fd.partials(xg.x(i), nu)?;
                beta.push(p.beta);
                beta_x.push(p.beta_x);
                beta_nu.push(p.beta_nu);
                beta_xnu.push(p.beta_xnu);
            }
        }
        RecircFamily::tabulated(
            TabulatedData {
                xs: xg.points(),
                nus,
                beta,
                beta_x,
                beta_nu,
                beta_xnu,
            },
            self.nu_box,
        )
    }

    pub fn with_deriv_mode(mut self, deriv: DerivMode) -> Self {
        self.deriv = deriv;
        self
    }

    pub fn kind(&self) -> &FamilyKind {
        &self.kind
    }

    pub fn nu_box(&self) -> f64 {
        self.nu_box
    }

    pub fn deriv_mode(&self) -> DerivMode {
        self.deriv
    }

    fn check_domain(&self, x: f64, nu: f64) -> Result<()> {
        if !(0.0..=1.0 + 1e-12).contains(&x) {
            return Err(Error::DomainExit {
                what: "x",
                value: x,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if nu.abs() > self.nu_box * (1.0 + 1e-12) || !nu.is_finite() {
            return Err(Error::DomainExit {
                what: "nu",
                value: nu,
                lo: -self.nu_box,
                hi: self.nu_box,
            });
        }
        Ok(())
    }

    /// Coefficient value. Never singular.
    pub fn beta(&self, x: f64, nu: f64) -> Result<f64> {
        self.check_domain(x, nu)?;
        Ok(self.beta_unchecked(x, nu))
    }

    fn beta_unchecked(&self, x: f64, nu: f64) -> f64 {
        match &self.kind {
            FamilyKind::Chebyshev { amplitude, gamma } => {
                let q = gamma + nu;
                amplitude * (q * x.clamp(-1.0, 1.0).acos()).cos()
            }
            FamilyKind::Constant { b } => *b,
            FamilyKind::Tabulated(t) => t.interp(&t.beta, x, nu),
        }
    }

    /// `d beta / d nu`. Regular everywhere for all families.
    pub fn beta_nu(&self, x: f64, nu: f64) -> Result<f64> {
        self.check_domain(x, nu)?;
        Ok(match &self.kind {
            FamilyKind::Chebyshev { amplitude, gamma } => {
                let theta = x.clamp(-1.0, 1.0).acos();
                let q = gamma + nu;
                -amplitude * theta * (q * theta).sin()
            }
            FamilyKind::Constant { .. } => 0.0,
            FamilyKind::Tabulated(t) => t.interp(&t.beta_nu, x, nu),
        })
    }

    /// All four values at once, honoring the derivative mode.
    pub fn partials(&self, x: f64, nu: f64) -> Result<Partials> {
        self.check_domain(x, nu)?;
        let beta = self.beta_unchecked(x, nu);
        let beta_nu = self.beta_nu(x, nu)?;
        let (beta_x, beta_xnu) = match &self.kind {
            FamilyKind::Constant { .. } => (0.0, 0.0),
            FamilyKind::Tabulated(t) => (t.interp(&t.beta_x, x, nu), t.interp(&t.beta_xnu, x, nu)),
            FamilyKind::Chebyshev { amplitude, gamma } => {
                if x <= 1.0 - EPS_SING {
                    let theta = x.acos();
                    let s = theta.sin();
                    let q = gamma + nu;
                    let bx = amplitude * q * (q * theta).sin() / s;
                    let bxnu = amplitude * ((q * theta).sin() + q * theta * (q * theta).cos()) / s;
                    (bx, bxnu)
                } else if self.deriv == DerivMode::FiniteDifference {
                    // One-sided second order stencils pointing left.
                    let h = FD_H;
                    let f0 = self.beta_unchecked(x, nu);
                    let f1 = self.beta_unchecked(x - h, nu);
                    let f2 = self.beta_unchecked(x - 2.0 * h, nu);
                    let bx = (3.0 * f0 - 4.0 * f1 + f2) / (2.0 * h);
                    let g0 = self.beta_nu(x, nu)?;
                    let g1 = self.beta_nu(x - h, nu)?;
                    let g2 = self.beta_nu(x - 2.0 * h, nu)?;
                    let bxnu = (3.0 * g0 - 4.0 * g1 + g2) / (2.0 * h);
                    (bx, bxnu)
                } else {
                    return Err(Error::Singularity { x, eps: EPS_SING });
                }
            }
        };
        Ok(Partials {
            beta,
            beta_x,
            beta_nu,
            beta_xnu,
        })
    }

    /// `beta(., nu)` sampled on a grid.
    pub fn beta_slice(&self, grid: &SpatialGrid, nu: f64) -> Result<Vec<f64>> {
        (0..grid.n()).map(|i| self.beta(grid.x(i), nu)).collect()
    }

    /// `beta_nu(., nu)` sampled on a grid.
    pub fn beta_nu_slice(&self, grid: &SpatialGrid, nu: f64) -> Result<Vec<f64>> {
        (0..grid.n()).map(|i| self.beta_nu(grid.x(i), nu)).collect()
    }

    /// All four partial slices, for the derivative kernel solves.
    pub fn partials_slice(&self, grid: &SpatialGrid, nu: f64) -> Result<Vec<Partials>> {
        (0..grid.n()).map(|i| self.partials(grid.x(i), nu)).collect()
    }

    /// Sampled suprema over the whole `(x, nu)` box at the default
    /// density.
    pub fn bounds(&self) -> BoundsVector {
        self.bounds_over_box(2001, 2001)
    }

    /// Numerically computed suprema over the `(x, nu)` box.
    ///
    /// For the Chebyshev family the x-partials are parametrized by
    /// `theta = acos x`, which stays regular at the endpoint where the
    /// x-form has a removable 0/0, so the sup covers the closed box.
    pub fn bounds_over_box(&self, x_samples: usize, nu_samples: usize) -> BoundsVector {
        match &self.kind {
            FamilyKind::Constant { b } => BoundsVector::new(b.abs(), 0.0, 0.0, 0.0),
            FamilyKind::Chebyshev { amplitude, gamma } => {
                let a = amplitude.abs();
                let nq = nu_samples.max(2);
                let nth = x_samples.max(2);
                let mut bb = 0.0_f64;
                let mut bx = 0.0_f64;
                let mut bnu = 0.0_f64;
                let mut bxnu = 0.0_f64;
                for iq in 0..nq {
                    let nu = -self.nu_box + 2.0 * self.nu_box * iq as f64 / (nq - 1) as f64;
                    let q = gamma + nu;
                    for it in 0..nth {
                        let theta = std::f64::consts::FRAC_PI_2 * it as f64 / (nth - 1) as f64;
                        let (s, qs) = (theta.sin(), (q * theta).sin());
                        bb = bb.max((q * theta).cos().abs());
                        bnu = bnu.max((theta * qs).abs());
                        if theta < 1e-9 {
                            bx = bx.max(q * q);
                            bxnu = bxnu.max(2.0 * q.abs());
                        } else {
                            bx = bx.max((q * qs / s).abs());
                            bxnu = bxnu.max(((qs + q * theta * (q * theta).cos()) / s).abs());
                        }
                    }
                }
                // theta = 0 is always sampled and gives cos = 1, so
                // bb is exactly 1 and b_beta is the exact sup A.
                BoundsVector::new(a * bb, a * bx, a * bnu, a * bxnu)
            }
            FamilyKind::Tabulated(t) => {
                let sup = |v: &[f64]| v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
                BoundsVector::new(sup(&t.beta), sup(&t.beta_x), sup(&t.beta_nu), sup(&t.beta_xnu))
            }
        }
    }
}

impl TabulatedData {
    fn interp(&self, table: &[f64], x: f64, nu: f64) -> f64 {
        let (i, tx) = locate(&self.xs, x);
        let (j, tn) = locate(&self.nus, nu);
        let nx = self.xs.len();
        let f = |jj: usize, ii: usize| table[jj * nx + ii];
        let a = f(j, i) * (1.0 - tx) + f(j, i + 1) * tx;
        let b = f(j + 1, i) * (1.0 - tx) + f(j + 1, i + 1) * tx;
        a * (1.0 - tn) + b * tn
    }
}

/// Find the cell of a sorted abscissa vector containing `v`, clamped
/// to the table range, plus the interpolation fraction inside it.
fn locate(xs: &[f64], v: f64) -> (usize, f64) {
    let n = xs.len();
    if v <= xs[0] {
        return (0, 0.0);
    }
    if v >= xs[n - 1] {
        return (n - 2, 1.0);
    }
    let mut i = match xs.binary_search_by(|p| p.partial_cmp(&v).unwrap()) {
        Ok(i) => i,
        Err(i) => i - 1,
    };
    i = i.min(n - 2);
    ((i), (v - xs[i]) / (xs[i + 1] - xs[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cheb() -> RecircFamily {
        RecircFamily::chebyshev(5.0, 3.0, 5.0)
    }

    #[test]
    fn chebyshev_values() {
        let f = cheb();
        // x = 1 gives acos x = 0, so beta = A.
        assert_relative_eq!(f.beta(1.0, 0.0).unwrap(), 5.0, epsilon = 1e-12);
        // x = 0, q = 3: cos(3 pi / 2) = 0.
        assert_relative_eq!(f.beta(0.0, 0.0).unwrap(), 0.0, epsilon = 1e-10);
        // q = 4 at x = 0: cos(2 pi) = 1.
        assert_relative_eq!(f.beta(0.0, 1.0).unwrap(), 5.0, epsilon = 1e-10);
    }

    #[test]
    fn chebyshev_beta_nu_closed_form() {
        // beta_nu(0, 0) with A = 5, gamma = 3:
        // -A theta sin(q theta) at theta = pi/2, q = 3 gives 5 pi / 2.
        let f = cheb();
        let v = f.beta_nu(0.0, 0.0).unwrap();
        assert_relative_eq!(v, 5.0 * std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn analytic_partials_match_finite_differences() {
        let f = cheb();
        let h = 1e-6;
        for &(x, nu) in &[(0.3, 0.2), (0.77, -1.4), (0.01, 4.0), (0.5, 0.0)] {
            let p = f.partials(x, nu).unwrap();
            let fd_x = (f.beta(x + h, nu).unwrap() - f.beta(x - h, nu).unwrap()) / (2.0 * h);
            let fd_nu = (f.beta(x, nu + h).unwrap() - f.beta(x, nu - h).unwrap()) / (2.0 * h);
            let fd_xnu = (f.beta_nu(x + h, nu).unwrap() - f.beta_nu(x - h, nu).unwrap()) / (2.0 * h);
            assert_relative_eq!(p.beta_x, fd_x, epsilon = 1e-4, max_relative = 1e-5);
            assert_relative_eq!(p.beta_nu, fd_nu, epsilon = 1e-4, max_relative = 1e-5);
            assert_relative_eq!(p.beta_xnu, fd_xnu, epsilon = 1e-4, max_relative = 1e-5);
        }
    }

    #[test]
    fn singular_endpoint_behavior() {
        let f = cheb();
        let x = 1.0 - 0.5 * EPS_SING;
        assert!(matches!(
            f.partials(x, 0.3),
            Err(Error::Singularity { .. })
        ));
        // The finite difference fallback stays usable there.
        let fd = cheb().with_deriv_mode(DerivMode::FiniteDifference);
        let p = fd.partials(x, 0.3).unwrap();
        assert!(p.beta_x.is_finite() && p.beta_xnu.is_finite());
    }

    #[test]
    fn domain_box_enforced() {
        let f = cheb();
        assert!(matches!(f.beta(0.5, 5.1), Err(Error::DomainExit { .. })));
        assert!(matches!(f.beta(1.2, 0.0), Err(Error::DomainExit { .. })));
        assert!(f.beta(0.5, 5.0).is_ok());
    }

    #[test]
    fn constant_family() {
        let f = RecircFamily::constant(2.5, 1.0);
        assert_eq!(f.beta(0.3, 0.5).unwrap(), 2.5);
        let p = f.partials(0.9999999, 0.0).unwrap();
        assert_eq!((p.beta_x, p.beta_nu, p.beta_xnu), (0.0, 0.0, 0.0));
        let b = f.bounds();
        assert_eq!(b.b_beta, 2.5);
        assert_eq!(b.b_beta_x, 0.0);
    }

    #[test]
    fn chebyshev_bounds_dominate_samples() {
        let f = cheb();
        let b = f.bounds();
        assert_relative_eq!(b.b_beta, 5.0);
        // q_max = 8, so the endpoint value of beta_x is A q^2 = 320.
        assert!(b.b_beta_x >= 320.0 - 1e-6, "b_beta_x = {}", b.b_beta_x);
        let fd = cheb().with_deriv_mode(DerivMode::FiniteDifference);
        for i in 0..40 {
            for j in 0..21 {
                let x = i as f64 / 39.0;
                let nu = -5.0 + 10.0 * j as f64 / 20.0;
                let p = fd.partials(x, nu).unwrap();
                assert!(p.beta.abs() <= b.b_beta * 1.0001);
                assert!(p.beta_x.abs() <= b.b_beta_x * 1.0001);
                assert!(p.beta_nu.abs() <= b.b_beta_nu * 1.0001);
                assert!(p.beta_xnu.abs() <= b.b_beta_xnu * 1.0001);
            }
        }
    }

    #[test]
    fn tabulated_reproduces_source_family() {
        let f = cheb();
        let t = f.to_tabulated(801, 201).unwrap();
        for &(x, nu) in &[(0.31, 0.7), (0.62, -2.3), (0.05, 4.9)] {
            let a = f.beta(x, nu).unwrap();
            let b = t.beta(x, nu).unwrap();
            assert_relative_eq!(a, b, epsilon = 5e-3, max_relative = 5e-3);
        }
        let ba = f.bounds();
        let bt = t.bounds();
        assert_relative_eq!(ba.b_beta, bt.b_beta, max_relative = 0.02);
    }
}
