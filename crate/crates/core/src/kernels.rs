//! Backstepping kernel solves.
//!
//! For a frozen scheduling value `nu` the gain kernel solves the
//! Volterra equation of the second kind
//!
//! ```text
//!   k(x, nu) = -beta(x, nu) + (beta(., nu) * k(., nu))(x),
//! ```
//!
//! where `*` is the causal convolution of [`crate::grid`]. The solver
//! marches in x: with trapezoid weights the diagonal term is implicit
//! and is moved to the left side, so each step is a division by
//! `1 - dx/2 beta(0, nu)`.
//!
//! Derivative kernels reuse the same marching core, never numerical
//! differentiation:
//!
//! * `k_nu` solves `k_nu = -beta_nu + beta_nu * k + beta * k_nu`;
//! * `k_x = -beta_x + beta(0) k + beta_x * k` (explicit evaluation);
//! * `k_xnu = -beta_xnu + beta_nu(0) k + beta(0) k_nu
//!            + beta_xnu * k + beta_x * k_nu` (explicit);
//! * the inverse kernel solves `l = k + k * l`.

use crate::error::{Error, Result};
use crate::grid::{conv, conv_at, max_abs, SpatialGrid};
use crate::recirc::{BoundsVector, Partials, RecircFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrature {
    /// The shared trapezoid rule; implicit diagonal.
    Trapezoid,
    /// Left endpoint rule; fully explicit marching, first order.
    LeftRectangle,
}

#[derive(Debug, Clone, Copy)]
pub struct VolterraConfig {
    pub quadrature: Quadrature,
    /// Relative residual tolerance checked after each solve; `None`
    /// skips the check.
    pub residual_tol: Option<f64>,
    /// The marching diagonal must stay above this in magnitude.
    pub diag_tol: f64,
}

impl Default for VolterraConfig {
    fn default() -> Self {
        VolterraConfig {
            quadrature: Quadrature::Trapezoid,
            residual_tol: Some(1e-9),
            diag_tol: 1e-12,
        }
    }
}

/// Which kernels a bundle carries beside `k` and `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSet {
    /// Just `k` (and `l`).
    K,
    /// `k` and `k_nu`.
    KNu,
    /// `k`, `k_nu`, `k_x`, `k_xnu`.
    All,
}

/// One frozen-`nu` family of kernels on a grid.
#[derive(Debug, Clone)]
pub struct KernelBundle {
    pub grid: SpatialGrid,
    pub nu: f64,
    pub k: Vec<f64>,
    pub k_nu: Option<Vec<f64>>,
    pub k_x: Option<Vec<f64>>,
    pub k_xnu: Option<Vec<f64>>,
    pub l: Vec<f64>,
}

/// March the generic equation `y = f + kern * y`.
pub fn solve_volterra(
    forcing: &[f64],
    kern: &[f64],
    grid: &SpatialGrid,
    cfg: &VolterraConfig,
) -> Result<Vec<f64>> {
    let n = grid.n();
    if forcing.len() != n || kern.len() != n {
        return Err(Error::Shape(format!(
            "volterra inputs have lengths {} and {}, grid has {n} points",
            forcing.len(),
            kern.len()
        )));
    }
    let dx = grid.dx();
    let mut y = vec![0.0; n];
    y[0] = forcing[0];
    match cfg.quadrature {
        Quadrature::Trapezoid => {
            let diag = 1.0 - 0.5 * dx * kern[0];
            if diag.abs() < cfg.diag_tol {
                return Err(Error::IllPosed {
                    diag: diag.abs(),
                    tol: cfg.diag_tol,
                });
            }
            for i in 1..n {
                let mut acc = 0.5 * kern[i] * y[0];
                for j in 1..i {
                    acc += kern[i - j] * y[j];
                }
                y[i] = (forcing[i] + dx * acc) / diag;
            }
        }
        Quadrature::LeftRectangle => {
            for i in 1..n {
                let mut acc = 0.0;
                for j in 0..i {
                    acc += kern[i - j] * y[j];
                }
                y[i] = forcing[i] + dx * acc;
            }
        }
    }
    if let Some(tol) = cfg.residual_tol {
        if cfg.quadrature == Quadrature::Trapezoid {
            let r = residual(&y, forcing, kern, grid);
            let scale = 1.0 + max_abs(&y);
            if r > tol * scale {
                return Err(Error::Residual {
                    residual: r,
                    tol: tol * scale,
                });
            }
        }
    }
    Ok(y)
}

/// Max-norm residual of `y = f + kern * y` under the trapezoid rule.
pub fn residual(y: &[f64], forcing: &[f64], kern: &[f64], grid: &SpatialGrid) -> f64 {
    let dx = grid.dx();
    (0..grid.n())
        .map(|i| (y[i] - forcing[i] - conv_at(kern, y, i, dx)).abs())
        .fold(0.0_f64, f64::max)
}

/// Gain kernel `k(., nu)` from a sampled `beta(., nu)` slice.
pub fn solve_k(beta: &[f64], grid: &SpatialGrid, cfg: &VolterraConfig) -> Result<Vec<f64>> {
    let forcing: Vec<f64> = beta.iter().map(|b| -b).collect();
    solve_volterra(&forcing, beta, grid, cfg)
}

/// `k_nu` given `beta`, `beta_nu` and an already solved `k`.
pub fn solve_k_nu(
    beta: &[f64],
    beta_nu: &[f64],
    k: &[f64],
    grid: &SpatialGrid,
    cfg: &VolterraConfig,
) -> Result<Vec<f64>> {
    let bk = conv(beta_nu, k, grid.dx());
    let forcing: Vec<f64> = (0..grid.n()).map(|i| -beta_nu[i] + bk[i]).collect();
    solve_volterra(&forcing, beta, grid, cfg)
}

/// Explicit evaluation of `k_x` from solved `k`. Accepts slices
/// shorter than the grid so callers can stop short of the singular
/// right endpoint of the coefficient derivatives.
pub fn eval_k_x(beta: &[f64], beta_x: &[f64], k: &[f64], grid: &SpatialGrid) -> Vec<f64> {
    let dx = grid.dx();
    (0..k.len())
        .map(|i| -beta_x[i] + beta[0] * k[i] + conv_at(beta_x, k, i, dx))
        .collect()
}

/// Explicit evaluation of `k_xnu` from solved `k` and `k_nu`.
#[allow(clippy::too_many_arguments)]
pub fn eval_k_xnu(
    beta: &[f64],
    beta_x: &[f64],
    beta_nu: &[f64],
    beta_xnu: &[f64],
    k: &[f64],
    k_nu: &[f64],
    grid: &SpatialGrid,
) -> Vec<f64> {
    let dx = grid.dx();
    (0..k.len())
        .map(|i| {
            -beta_xnu[i] + beta_nu[0] * k[i] + beta[0] * k_nu[i]
                + conv_at(beta_xnu, k, i, dx)
                + conv_at(beta_x, k_nu, i, dx)
        })
        .collect()
}

/// Inverse kernel: `l = k + k * l`.
pub fn solve_l(k: &[f64], grid: &SpatialGrid, cfg: &VolterraConfig) -> Result<Vec<f64>> {
    solve_volterra(k, k, grid, cfg)
}

/// Solve everything the requested set needs for one `nu`.
pub fn solve_bundle(
    family: &RecircFamily,
    nu: f64,
    grid: &SpatialGrid,
    cfg: &VolterraConfig,
    set: KernelSet,
) -> Result<KernelBundle> {
    let beta = family.beta_slice(grid, nu)?;
    let k = solve_k(&beta, grid, cfg)?;
    let l = solve_l(&k, grid, cfg)?;
    let (mut k_nu, mut k_x, mut k_xnu) = (None, None, None);
    if set != KernelSet::K {
        let beta_nu = family.beta_nu_slice(grid, nu)?;
        let knu = solve_k_nu(&beta, &beta_nu, &k, grid, cfg)?;
        if set == KernelSet::All {
            let parts: Vec<Partials> = family.partials_slice(grid, nu)?;
            let beta_x: Vec<f64> = parts.iter().map(|p| p.beta_x).collect();
            let beta_xnu: Vec<f64> = parts.iter().map(|p| p.beta_xnu).collect();
            k_x = Some(eval_k_x(&beta, &beta_x, &k, grid));
            k_xnu = Some(eval_k_xnu(
                &beta, &beta_x, &beta_nu, &beta_xnu, &k, &knu, grid,
            ));
        }
        k_nu = Some(knu);
    }
    Ok(KernelBundle {
        grid: grid.clone(),
        nu,
        k,
        k_nu,
        k_x,
        k_xnu,
        l,
    })
}

/// Theoretical envelope for |k|: `B_beta e^{B_beta x}`.
pub fn bound_k(b: &BoundsVector, x: f64) -> f64 {
    b.b_beta * (b.b_beta * x).exp()
}

/// Theoretical envelope for |k_nu|:
/// `alpha_nu e^{alpha_nu x} (1 + alpha_nu x)`.
pub fn bound_k_nu(b: &BoundsVector, x: f64) -> f64 {
    let a = b.alpha_nu();
    a * (a * x).exp() * (1.0 + a * x)
}

/// Theoretical envelope for |k_xnu|:
/// `alpha e^{alpha x}(1 + 2 alpha) + alpha^2 x e^{alpha x}(alpha + 1)`.
pub fn bound_k_xnu(b: &BoundsVector, x: f64) -> f64 {
    let a = b.alpha;
    let e = (a * x).exp();
    a * e * (1.0 + 2.0 * a) + a * a * x * e * (a + 1.0)
}

/// Theoretical envelope for |l|: `kbar e^{kbar x}`, `kbar = B_beta e^{B_beta}`.
pub fn bound_l(b: &BoundsVector, x: f64) -> f64 {
    let kbar = b.b_beta * b.b_beta.exp();
    kbar * (kbar * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::conv;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> SpatialGrid {
        SpatialGrid::new(n).unwrap()
    }

    /// Neumann series oracle: k = sum of Dk_n with Dk_0 = -beta and
    /// Dk_{n+1} = beta * Dk_n. Independent of the marching solver.
    fn neumann_k(beta: &[f64], dx: f64, terms: usize) -> Vec<f64> {
        let mut sum: Vec<f64> = beta.iter().map(|b| -b).collect();
        let mut dk = sum.clone();
        for _ in 0..terms {
            dk = conv(beta, &dk, dx);
            for (s, d) in sum.iter_mut().zip(&dk) {
                *s += d;
            }
        }
        sum
    }

    #[test]
    fn constant_beta_closed_form() {
        // beta = b constant gives k(x) = -b e^{b x}.
        let g = grid(1001);
        for &b in &[1.0, -0.5, 2.0] {
            let beta = vec![b; g.n()];
            let k = solve_k(&beta, &g, &VolterraConfig::default()).unwrap();
            let worst = (0..g.n())
                .map(|i| (k[i] + b * (b * g.x(i)).exp()).abs())
                .fold(0.0_f64, f64::max);
            assert!(worst <= 1e-5, "b={b}: worst error {worst:.3e}");
        }
    }

    #[test]
    fn matches_neumann_series_oracle() {
        let g = grid(401);
        let fam = RecircFamily::chebyshev(5.0, 4.0, 5.0);
        for &nu in &[0.0, -2.0, 3.5] {
            let beta = fam.beta_slice(&g, nu).unwrap();
            let k = solve_k(&beta, &g, &VolterraConfig::default()).unwrap();
            let oracle = neumann_k(&beta, g.dx(), 30);
            let worst = (0..g.n())
                .map(|i| (k[i] - oracle[i]).abs())
                .fold(0.0_f64, f64::max);
            assert!(worst <= 1e-8, "nu={nu}: marching vs series {worst:.3e}");
        }
    }

    #[test]
    fn left_rectangle_converges_to_trapezoid() {
        let fam = RecircFamily::chebyshev(5.0, 3.0, 5.0);
        let err = |n: usize| {
            let g = grid(n);
            let beta = fam.beta_slice(&g, 0.7).unwrap();
            let t = solve_k(&beta, &g, &VolterraConfig::default()).unwrap();
            let r = solve_k(
                &beta,
                &g,
                &VolterraConfig {
                    quadrature: Quadrature::LeftRectangle,
                    ..Default::default()
                },
            )
            .unwrap();
            (0..n).map(|i| (t[i] - r[i]).abs()).fold(0.0_f64, f64::max)
        };
        let (e1, e2) = (err(501), err(1001));
        assert!(e2 < 0.7 * e1, "first order rule should converge: {e1} -> {e2}");
    }

    #[test]
    fn k_nu_matches_central_difference() {
        let g = grid(2001);
        let fam = RecircFamily::chebyshev(5.0, 3.0, 5.0);
        let cfg = VolterraConfig::default();
        let nu = 0.4;
        let h = 1e-5;
        let beta = fam.beta_slice(&g, nu).unwrap();
        let beta_nu = fam.beta_nu_slice(&g, nu).unwrap();
        let k = solve_k(&beta, &g, &cfg).unwrap();
        let k_nu = solve_k_nu(&beta, &beta_nu, &k, &g, &cfg).unwrap();
        let kp = solve_k(&fam.beta_slice(&g, nu + h).unwrap(), &g, &cfg).unwrap();
        let km = solve_k(&fam.beta_slice(&g, nu - h).unwrap(), &g, &cfg).unwrap();
        for i in (0..g.n()).step_by(100) {
            let fd = (kp[i] - km[i]) / (2.0 * h);
            assert_relative_eq!(k_nu[i], fd, epsilon = 1e-4, max_relative = 1e-4);
        }
    }

    #[test]
    fn k_x_matches_grid_derivative() {
        let g = grid(2001);
        let fam = RecircFamily::chebyshev(5.0, 3.0, 5.0);
        let cfg = VolterraConfig::default();
        let nu = -1.3;
        let beta = fam.beta_slice(&g, nu).unwrap();
        let k = solve_k(&beta, &g, &cfg).unwrap();
        // Stay away from x = 1 where beta_x is singular.
        let m = g.n() - g.n() / 10;
        let parts = (0..m)
            .map(|i| fam.partials(g.x(i), nu).unwrap())
            .collect::<Vec<_>>();
        let beta_x: Vec<f64> = parts.iter().map(|p| p.beta_x).collect();
        let kx = eval_k_x(&beta[..m], &beta_x, &k[..m], &g);
        for i in (2..m - 2).step_by(97) {
            let fd = (k[i + 1] - k[i - 1]) / (2.0 * g.dx());
            assert_relative_eq!(kx[i], fd, epsilon = 1e-3, max_relative = 2e-3);
        }
    }

    #[test]
    fn k_xnu_matches_mixed_difference() {
        let g = grid(2001);
        let fam = RecircFamily::chebyshev(5.0, 3.0, 5.0);
        let cfg = VolterraConfig::default();
        let nu = 0.8;
        let h = 1e-5;
        let solve_knu = |nu: f64| {
            let beta = fam.beta_slice(&g, nu).unwrap();
            let beta_nu = fam.beta_nu_slice(&g, nu).unwrap();
            let k = solve_k(&beta, &g, &cfg).unwrap();
            (solve_k_nu(&beta, &beta_nu, &k, &g, &cfg).unwrap(), k)
        };
        let (k_nu, k) = solve_knu(nu);
        let m = g.n() - g.n() / 10;
        let parts = (0..m)
            .map(|i| fam.partials(g.x(i), nu).unwrap())
            .collect::<Vec<_>>();
        let beta: Vec<f64> = parts.iter().map(|p| p.beta).collect();
        let beta_x: Vec<f64> = parts.iter().map(|p| p.beta_x).collect();
        let beta_nu: Vec<f64> = parts.iter().map(|p| p.beta_nu).collect();
        let beta_xnu: Vec<f64> = parts.iter().map(|p| p.beta_xnu).collect();
        let kxnu = eval_k_xnu(&beta, &beta_x, &beta_nu, &beta_xnu, &k[..m], &k_nu[..m], &g);
        // Cross check against the nu-derivative of k_x as well as the
        // x-derivative of k_nu; both are grid differences of solved kernels.
        let kx_p = {
            let bp = fam.beta_slice(&g, nu + h).unwrap();
            let kp = solve_k(&bp, &g, &cfg).unwrap();
            let bx: Vec<f64> = (0..m)
                .map(|i| fam.partials(g.x(i), nu + h).unwrap().beta_x)
                .collect();
            eval_k_x(&bp[..m], &bx, &kp[..m], &g)
        };
        let kx_m = {
            let bm = fam.beta_slice(&g, nu - h).unwrap();
            let km = solve_k(&bm, &g, &cfg).unwrap();
            let bx: Vec<f64> = (0..m)
                .map(|i| fam.partials(g.x(i), nu - h).unwrap().beta_x)
                .collect();
            eval_k_x(&bm[..m], &bx, &km[..m], &g)
        };
        for i in (2..m - 2).step_by(101) {
            let fd_x_of_knu = (k_nu[i + 1] - k_nu[i - 1]) / (2.0 * g.dx());
            let fd_nu_of_kx = (kx_p[i] - kx_m[i]) / (2.0 * h);
            assert_relative_eq!(kxnu[i], fd_x_of_knu, epsilon = 5e-3, max_relative = 5e-3);
            assert_relative_eq!(kxnu[i], fd_nu_of_kx, epsilon = 5e-3, max_relative = 5e-3);
        }
    }

    #[test]
    fn inverse_kernel_residual_tiny() {
        let g = grid(1001);
        let fam = RecircFamily::chebyshev(5.0, 3.0, 5.0);
        let cfg = VolterraConfig::default();
        let beta = fam.beta_slice(&g, 0.3).unwrap();
        let k = solve_k(&beta, &g, &cfg).unwrap();
        let l = solve_l(&k, &g, &cfg).unwrap();
        let r = residual(&l, &k, &k, &g);
        let scale = 1.0 + max_abs(&l);
        assert!(
            r <= 10.0 * f64::EPSILON * scale * g.n() as f64,
            "residual {r:.3e}"
        );
    }

    #[test]
    fn analytic_bounds_hold_on_samples() {
        let g = grid(501);
        let cfg = VolterraConfig::default();
        for gamma in [3.0, 5.0, 8.0] {
            let fam = RecircFamily::chebyshev(5.0, gamma, 5.0);
            let b = fam.bounds_over_box(801, 801);
            for &nu in &[-5.0, -1.1, 0.0, 2.7, 5.0] {
                let bundle = solve_bundle(&fam, nu, &g, &cfg, KernelSet::KNu).unwrap();
                for i in 0..g.n() {
                    let x = g.x(i);
                    assert!(
                        bundle.k[i].abs() <= 1.01 * bound_k(&b, x),
                        "k bound broken at gamma={gamma} nu={nu} x={x}"
                    );
                    assert!(
                        bundle.k_nu.as_ref().unwrap()[i].abs() <= 1.01 * bound_k_nu(&b, x),
                        "k_nu bound broken at gamma={gamma} nu={nu} x={x}"
                    );
                    assert!(
                        bundle.l[i].abs() <= 1.01 * bound_l(&b, x),
                        "l bound broken at gamma={gamma} nu={nu} x={x}"
                    );
                }
            }
        }
    }

    #[test]
    fn lipschitz_in_beta() {
        // ||k1 - k2||_inf <= e^{3 B} ||beta1 - beta2||_inf for B >= both sups.
        let g = grid(501);
        let cfg = VolterraConfig::default();
        let f1 = RecircFamily::chebyshev(5.0, 3.0, 5.0);
        let f2 = RecircFamily::chebyshev(5.0, 3.0, 5.0);
        for &(nu1, nu2) in &[(0.0, 0.1), (1.0, 1.5), (-2.0, -1.9)] {
            let b1 = f1.beta_slice(&g, nu1).unwrap();
            let b2 = f2.beta_slice(&g, nu2).unwrap();
            let k1 = solve_k(&b1, &g, &cfg).unwrap();
            let k2 = solve_k(&b2, &g, &cfg).unwrap();
            let db = (0..g.n()).map(|i| (b1[i] - b2[i]).abs()).fold(0.0, f64::max);
            let dk = (0..g.n()).map(|i| (k1[i] - k2[i]).abs()).fold(0.0, f64::max);
            assert!(dk <= (3.0_f64 * 5.0).exp() * db, "dk={dk}, db={db}");
        }
    }

    #[test]
    fn ill_posed_diagonal_detected() {
        // beta(0) = 2/dx makes the trapezoid diagonal exactly zero.
        let g = grid(101);
        let mut beta = vec![0.0; g.n()];
        beta[0] = 2.0 / g.dx();
        assert!(matches!(
            solve_k(&beta, &g, &VolterraConfig::default()),
            Err(Error::IllPosed { .. })
        ));
    }
}
