//! Timing harness: exact Volterra kernel solves versus neural operator
//! inference across grid resolutions.
//!
//! The exact path scales as Theta(n^2) in the grid size (triangular
//! marching), the operator path as Theta(params + p * n); the harness
//! measures both on identical `(beta, nu, grid)` inputs, reports
//! medians over repeated runs, and fits log-log slopes so the scaling
//! claim can be asserted rather than eyeballed. Coefficient
//! re-evaluation at the grid/sensors is included in both paths for
//! symmetry.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::kernels::{solve_k, VolterraConfig};
use crate::operator::OperatorModel;
use crate::recirc::RecircFamily;

/// One row of the comparison.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRecord {
    pub dx: f64,
    pub n: usize,
    /// Median wall time of the exact solve (seconds).
    pub t_exact_s: f64,
    /// Median wall time of operator inference at all n queries.
    pub t_neural_s: f64,
    pub speedup: f64,
    pub repetitions: usize,
    pub warmups: usize,
    /// Max-norm error of the neural slice against the exact one,
    /// relative to the exact slice's scale.
    pub slice_error: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmups: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repetitions: 11,
            warmups: 3,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Time one closure over the configured repetitions (monotonic clock),
/// returning the median seconds and the last result.
fn time_median<T>(cfg: &BenchConfig, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    for _ in 0..cfg.warmups {
        f()?;
    }
    let mut times = Vec::with_capacity(cfg.repetitions);
    let mut last = None;
    for _ in 0..cfg.repetitions.max(1) {
        let t0 = Instant::now();
        let out = f()?;
        times.push(t0.elapsed().as_secs_f64());
        last = Some(out);
    }
    Ok((median(times), last.unwrap()))
}

/// Run the comparison for every dx in `dx_list`.
///
/// Each dx yields `n = round(1/dx) + 1` grid points. The exact path
/// re-samples `beta(., nu)` on the grid and solves the Volterra
/// equation; the neural path re-samples `beta` at the model's sensors
/// and infers the kernel at all n queries.
pub fn bench_kernel(
    family: &RecircFamily,
    nu: f64,
    model: &OperatorModel,
    dx_list: &[f64],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRecord>> {
    let vcfg = VolterraConfig::default();
    let mut rows = Vec::with_capacity(dx_list.len());
    for &dx in dx_list {
        if !(dx > 0.0 && dx <= 0.5) {
            return Err(Error::Config(format!("benchmark dx = {dx} out of range")));
        }
        let n = (1.0 / dx).round() as usize + 1;
        let grid = SpatialGrid::new(n)?;
        let xs = grid.points();
        let (t_exact, exact) = time_median(cfg, || {
            let beta = family.beta_slice(&grid, nu)?;
            solve_k(&beta, &grid, &vcfg)
        })?;
        let (t_neural, neural) = time_median(cfg, || {
            let mut beta = Vec::with_capacity(model.n_sensors());
            for &x in &model.sensor_xs {
                beta.push(family.beta(x, nu)?);
            }
            model.infer_k(&beta, &xs)
        })?;
        let scale = exact.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        let slice_error = exact
            .iter()
            .zip(&neural)
            .fold(0.0_f64, |m, (&e, &p)| m.max((e - p).abs()))
            / scale.max(f64::MIN_POSITIVE);
        rows.push(BenchRecord {
            dx,
            n,
            t_exact_s: t_exact,
            t_neural_s: t_neural,
            speedup: t_exact / t_neural,
            repetitions: cfg.repetitions,
            warmups: cfg.warmups,
            slice_error,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log t` versus `log n`.
pub fn loglog_slope(rows: &[BenchRecord], pick: impl Fn(&BenchRecord) -> f64) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).ln(), pick(r).ln()))
        .collect();
    let n = pts.len() as f64;
    let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / n, sy / n);
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    num / den.max(f64::MIN_POSITIVE)
}

/// CSV dump with an environment fingerprint comment row.
pub fn to_csv(rows: &[BenchRecord]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "# host={} cores={} profile={}\n",
        std::env::var("HOSTNAME").unwrap_or_else(|_| "unknown".into()),
        std::thread::available_parallelism().map_or(0, |p| p.get()),
        if cfg!(debug_assertions) { "debug" } else { "release" },
    ));
    s.push_str("dx,n,t_exact_s,t_neural_s,speedup,slice_error\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.3},{:.6e}\n",
            r.dx, r.n, r.t_exact_s, r.t_neural_s, r.speedup, r.slice_error
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{gen_dataset, train, DatasetConfig, ModelSpec, TargetVariant, TrainConfig};

    fn quick_model() -> OperatorModel {
        let ds = gen_dataset(&DatasetConfig {
            n_gamma: 4,
            n_nu: 8,
            n_grid: 101,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let spec = ModelSpec {
            branch_hidden: vec![64, 64],
            trunk_hidden: vec![12],
            p: 16,
            variant: TargetVariant::KOnly,
        };
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            ..Default::default()
        };
        train(&ds, &spec, &cfg).unwrap().0
    }

    #[test]
    fn records_are_consistent() {
        let fam = RecircFamily::chebyshev(5.0, 3.0, 5.0);
        let model = quick_model();
        let cfg = BenchConfig {
            repetitions: 3,
            warmups: 1,
        };
        let rows = bench_kernel(&fam, 0.5, &model, &[1e-2, 5e-3], &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.t_exact_s > 0.0 && r.t_neural_s > 0.0);
            assert!((r.speedup - r.t_exact_s / r.t_neural_s).abs() <= 1e-6 * r.speedup);
            assert_eq!(r.n, (1.0 / r.dx).round() as usize + 1);
            assert!(r.slice_error.is_finite());
        }
        let csv = to_csv(&rows);
        assert!(csv.starts_with("# host="));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn exact_solve_scales_quadratically() {
        // Slope check on the exact path alone; no model quality needed.
        let fam = RecircFamily::chebyshev(5.0, 3.0, 5.0);
        let model = quick_model();
        let cfg = BenchConfig {
            repetitions: 5,
            warmups: 2,
        };
        let rows = bench_kernel(&fam, 0.0, &model, &[2e-3, 1e-3, 5e-4], &cfg).unwrap();
        let slope = loglog_slope(&rows, |r| r.t_exact_s);
        assert!((1.5..=2.5).contains(&slope), "exact slope {slope}");
    }

    #[test]
    fn bad_dx_rejected() {
        let fam = RecircFamily::chebyshev(5.0, 3.0, 5.0);
        let model = quick_model();
        assert!(bench_kernel(&fam, 0.0, &model, &[0.0], &BenchConfig::default()).is_err());
    }
}
