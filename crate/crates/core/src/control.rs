//! Boundary feedback laws and stability diagnostics.
//!
//! The stabilizing control is the scheduled backstepping feedback
//!
//! ```text
//!   U(t) = int_0^1 k(1 - y, u(0,t)) u(y, t) dy,
//! ```
//!
//! where the gain kernel is re-evaluated at the current boundary trace
//! every step. The laws differ only in how they obtain the kernel
//! slice: a fresh Volterra solve (exact), a neural operator inference,
//! linear interpolation in a precomputed table, or a frozen slice at
//! `nu = 0` (the linear baseline). Diagnostics evaluate Lyapunov
//! functionals of the target state `w = u - k * u` and the analytic
//! sandwich/decay properties they must satisfy.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{self, conv_at, SpatialGrid};
use crate::kernels::{solve_k, VolterraConfig};
use crate::operator::OperatorModel;
use crate::plant::{self, transform, PlantState, PsiVariant, SimConfig, Trajectory};
use crate::recirc::RecircFamily;

/// How the feedback obtains its kernel slice.
#[derive(Debug, Clone)]
pub enum ControlLaw {
    /// `U = 0`.
    OpenLoop,
    /// Frozen slice `k(., 0)`: the linearization-based baseline.
    Linear { k0: Vec<f64> },
    /// Fresh Volterra solve at `nu = u(0,t)` every step.
    ExactGS { volterra: VolterraConfig },
    /// Neural operator inference at `nu = u(0,t)` every step.
    NeuralGS { model: Box<OperatorModel> },
    /// Precomputed slices on a `nu` grid, linear interpolation between
    /// the two neighbors. Quantifies what naive caching buys.
    TableGS {
        nus: Vec<f64>,
        slices: Vec<Vec<f64>>,
    },
}

impl ControlLaw {
    pub fn label(&self) -> &'static str {
        match self {
            ControlLaw::OpenLoop => "open-loop",
            ControlLaw::Linear { .. } => "linear",
            ControlLaw::ExactGS { .. } => "exact-gs",
            ControlLaw::NeuralGS { .. } => "neural-gs",
            ControlLaw::TableGS { .. } => "table-gs",
        }
    }
}

/// A law plus the (fixed) trapezoid quadrature convention.
#[derive(Debug, Clone)]
pub struct ControllerSpec {
    pub law: ControlLaw,
}

impl ControllerSpec {
    pub fn open_loop() -> Self {
        ControllerSpec {
            law: ControlLaw::OpenLoop,
        }
    }

    /// Solve `k(., 0)` once and freeze it.
    pub fn linear(family: &RecircFamily, grid: &SpatialGrid, cfg: &VolterraConfig) -> Result<Self> {
        let beta = family.beta_slice(grid, 0.0)?;
        let k0 = solve_k(&beta, grid, cfg)?;
        Ok(ControllerSpec {
            law: ControlLaw::Linear { k0 },
        })
    }

    pub fn exact_gs(volterra: VolterraConfig) -> Self {
        ControllerSpec {
            law: ControlLaw::ExactGS { volterra },
        }
    }

    pub fn neural_gs(model: OperatorModel) -> Self {
        ControllerSpec {
            law: ControlLaw::NeuralGS {
                model: Box::new(model),
            },
        }
    }

    /// Precompute `n_nu` kernel slices over the family's scheduling box.
    pub fn table_gs(
        family: &RecircFamily,
        grid: &SpatialGrid,
        cfg: &VolterraConfig,
        n_nu: usize,
    ) -> Result<Self> {
        if n_nu < 2 {
            return Err(Error::Config("kernel table needs at least 2 nu samples".into()));
        }
        let b = family.nu_box();
        let nus: Vec<f64> = (0..n_nu)
            .map(|j| -b + 2.0 * b * j as f64 / (n_nu - 1) as f64)
            .collect();
        let mut slices = Vec::with_capacity(n_nu);
        for &nu in &nus {
            let beta = family.beta_slice(grid, nu)?;
            slices.push(solve_k(&beta, grid, cfg)?);
        }
        Ok(ControllerSpec {
            law: ControlLaw::TableGS { nus, slices },
        })
    }
}

/// Kernel slice for the current state, per the law. `None` for the
/// open loop (no kernel work at all).
fn kernel_slice(spec: &ControllerSpec, state: &PlantState, family: &RecircFamily) -> Result<Option<Vec<f64>>> {
    let nu = state.trace();
    match &spec.law {
        ControlLaw::OpenLoop => Ok(None),
        ControlLaw::Linear { k0 } => {
            if k0.len() != state.grid.n() {
                return Err(Error::Shape(format!(
                    "frozen slice has {} points, grid has {}",
                    k0.len(),
                    state.grid.n()
                )));
            }
            Ok(Some(k0.clone()))
        }
        ControlLaw::ExactGS { volterra } => {
            let beta = family.beta_slice(&state.grid, nu)?;
            Ok(Some(solve_k(&beta, &state.grid, volterra)?))
        }
        ControlLaw::NeuralGS { model } => {
            // Resample beta at the model's sensors; the beta call
            // enforces the scheduling box exactly like the exact law.
            let mut beta = Vec::with_capacity(model.n_sensors());
            for &x in &model.sensor_xs {
                beta.push(family.beta(x, nu)?);
            }
            Ok(Some(model.infer_k(&beta, &state.grid.points())?))
        }
        ControlLaw::TableGS { nus, slices } => {
            let b = family.nu_box();
            if nu.abs() > b * (1.0 + 1e-12) || !nu.is_finite() {
                return Err(Error::DomainExit {
                    what: "nu",
                    value: nu,
                    lo: -b,
                    hi: b,
                });
            }
            let last = nus.len() - 1;
            let hi = nus.partition_point(|&g| g < nu).clamp(1, last);
            let (n0, n1) = (nus[hi - 1], nus[hi]);
            let t = ((nu - n0) / (n1 - n0)).clamp(0.0, 1.0);
            let (s0, s1) = (&slices[hi - 1], &slices[hi]);
            if s0.len() != state.grid.n() {
                return Err(Error::Shape(format!(
                    "table slices have {} points, grid has {}",
                    s0.len(),
                    state.grid.n()
                )));
            }
            Ok(Some(
                s0.iter().zip(s1).map(|(&a, &b)| a + t * (b - a)).collect(),
            ))
        }
    }
}

/// Trapezoid integral `int_0^1 k(1-y) u(y) dy` on the shared grid:
/// `k(1 - y_j) = k[n-1-j]` exactly, so this is the final entry of the
/// discrete convolution.
fn feedback_integral(k: &[f64], u: &[f64], dx: f64) -> f64 {
    conv_at(k, u, u.len() - 1, dx)
}

/// One control evaluation for the current state.
pub fn compute_control(spec: &ControllerSpec, state: &PlantState, family: &RecircFamily) -> Result<f64> {
    match kernel_slice(spec, state, family)? {
        None => Ok(0.0),
        Some(k) => Ok(feedback_integral(&k, &state.u, state.grid.dx())),
    }
}

/// Wall-time statistics of the per-step kernel computation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TimingStats {
    pub min_s: f64,
    pub median_s: f64,
    pub max_s: f64,
    pub total_s: f64,
    pub count: usize,
}

impl TimingStats {
    pub fn from_samples(mut xs: Vec<f64>) -> Self {
        if xs.is_empty() {
            return TimingStats {
                min_s: 0.0,
                median_s: 0.0,
                max_s: 0.0,
                total_s: 0.0,
                count: 0,
            };
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        let n = xs.len();
        let median = if n % 2 == 1 {
            xs[n / 2]
        } else {
            0.5 * (xs[n / 2 - 1] + xs[n / 2])
        };
        TimingStats {
            min_s: xs[0],
            median_s: median,
            max_s: xs[n - 1],
            total_s: xs.iter().sum(),
            count: n,
        }
    }
}

/// A closed-loop trajectory plus the cost split between obtaining the
/// kernel and evaluating the feedback integral.
#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory,
    pub kernel_stats: TimingStats,
    pub integral_stats: TimingStats,
}

/// Run the plant under the chosen law, timing the kernel computation
/// separately from the feedback quadrature at every step.
pub fn run_closed_loop(
    u0: Vec<f64>,
    family: &RecircFamily,
    spec: &ControllerSpec,
    cfg: &SimConfig,
) -> Result<ClosedLoopRun> {
    let mut kernel_times = Vec::new();
    let mut integral_times = Vec::new();
    let trajectory = plant::simulate(u0, family, cfg, |state| {
        let t0 = Instant::now();
        let k = kernel_slice(spec, state, family)?;
        let t1 = Instant::now();
        let u = match k {
            None => 0.0,
            Some(k) => feedback_integral(&k, &state.u, state.grid.dx()),
        };
        kernel_times.push(t1.duration_since(t0).as_secs_f64());
        integral_times.push(t1.elapsed().as_secs_f64());
        Ok(u)
    })?;
    Ok(ClosedLoopRun {
        trajectory,
        kernel_stats: TimingStats::from_samples(kernel_times),
        integral_stats: TimingStats::from_samples(integral_times),
    })
}

/// Target state `w = u - k * u` with a caller-supplied kernel slice
/// (exact solve or operator inference, per the analysis path).
pub fn target_state(state: &PlantState, k: &[f64]) -> Result<Vec<f64>> {
    if k.len() != state.grid.n() {
        return Err(Error::Shape(format!(
            "kernel slice has {} points, grid has {}",
            k.len(),
            state.grid.n()
        )));
    }
    Ok(transform(&state.u, k, state.grid.dx()))
}

/// Which Lyapunov functional family is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LyapunovVariant {
    /// `V = 1/2 int e^{cx} w^2 + 1/2 int e^{cx} w_x^2` (full-kernel
    /// analysis; any c > 0).
    FullKernel { c: f64 },
    /// `V = c/2 int e^{cx} w^2 + c/2 int e^{cx} w_x^2 + w(0)^2 / 8`
    /// (gain-only analysis; requires c >= 1).
    GainOnly { c: f64 },
}

impl LyapunovVariant {
    pub fn c(&self) -> f64 {
        match self {
            LyapunovVariant::FullKernel { c } | LyapunovVariant::GainOnly { c } => *c,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LyapunovVariant::FullKernel { c } if *c > 0.0 => Ok(()),
            LyapunovVariant::GainOnly { c } if *c >= 1.0 => Ok(()),
            LyapunovVariant::FullKernel { c } => Err(Error::Config(format!(
                "full-kernel Lyapunov functional needs c > 0, got {c}"
            ))),
            LyapunovVariant::GainOnly { c } => Err(Error::Config(format!(
                "gain-only Lyapunov functional needs c >= 1, got {c}"
            ))),
        }
    }
}

/// One evaluation of the Lyapunov functional on a target state.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LyapunovSample {
    pub t: f64,
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub v: f64,
    pub variant: LyapunovVariant,
}

/// Weighted trapezoid quadratures of the chosen functional; `w_x` by
/// the shared central-difference stencil.
pub fn lyapunov_eval(w: &[f64], dx: f64, t: f64, variant: LyapunovVariant) -> Result<LyapunovSample> {
    variant.validate()?;
    let c = variant.c();
    let wx = grid::diff(w, dx);
    let weighted_sq = |v: &[f64]| -> f64 {
        let n = v.len();
        let mut acc = 0.5 * (v[0] * v[0] + (c).exp() * v[n - 1] * v[n - 1]);
        for (i, &x) in v.iter().enumerate().take(n - 1).skip(1) {
            acc += (c * (i as f64) * dx).exp() * x * x;
        }
        dx * acc
    };
    let (v1, v2, v3) = match variant {
        LyapunovVariant::FullKernel { .. } => (0.5 * weighted_sq(w), 0.5 * weighted_sq(&wx), 0.0),
        LyapunovVariant::GainOnly { .. } => (
            0.5 * c * weighted_sq(w),
            0.5 * c * weighted_sq(&wx),
            w[0] * w[0] / 8.0,
        ),
    };
    Ok(LyapunovSample {
        t,
        v1,
        v2,
        v3,
        v: v1 + v2 + v3,
        variant,
    })
}

/// Evaluate the functional along a recorded trajectory, solving the
/// exact kernel at each sample's boundary trace for the transform.
pub fn lyapunov_trace(
    traj: &Trajectory,
    family: &RecircFamily,
    vcfg: &VolterraConfig,
    variant: LyapunovVariant,
) -> Result<Vec<LyapunovSample>> {
    let dx = traj.grid.dx();
    let mut out = Vec::with_capacity(traj.snapshots.len());
    for (i, u) in traj.snapshots.iter().enumerate() {
        let nu = u[0].clamp(-family.nu_box(), family.nu_box());
        let beta = family.beta_slice(&traj.grid, nu)?;
        let k = solve_k(&beta, &traj.grid, vcfg)?;
        let w = transform(u, &k, dx);
        out.push(lyapunov_eval(&w, dx, traj.times[i], variant)?);
    }
    Ok(out)
}

/// Verdict of the monotone-decay property after the first transit.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayReport {
    /// Samples considered (t > t_after).
    pub samples: usize,
    /// Worst per-step increase, normalized by V(0).
    pub worst_step_increase: f64,
    pub holds: bool,
}

/// Check that V is non-increasing for `t > t_after` up to a per-step
/// slack of `slack_frac * V(0)`.
pub fn decay_check(samples: &[LyapunovSample], t_after: f64, slack_frac: f64) -> DecayReport {
    let v0 = samples.first().map_or(0.0, |s| s.v);
    let mut worst = 0.0_f64;
    let mut count = 0usize;
    for pair in samples.windows(2) {
        if pair[0].t <= t_after {
            continue;
        }
        count += 1;
        worst = worst.max((pair[1].v - pair[0].v) / v0.max(f64::MIN_POSITIVE));
    }
    DecayReport {
        samples: count,
        worst_step_increase: worst,
        holds: worst <= slack_frac,
    }
}

/// Worst-case slacks of the variant's sandwich inequalities over a set
/// of target states.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SandwichReport {
    /// Most negative margin of the lower inequality (>= 0 means it held
    /// everywhere).
    pub worst_lower_margin: f64,
    /// Most negative margin of the upper inequality.
    pub worst_upper_margin: f64,
    pub holds: bool,
}

/// Evaluate the sandwich inequalities on every sample.
///
/// Full-kernel form: `Psi(w) <= 2V <= e^c Psi(w)` with the boundary-free
/// `Psi`. Gain-only form: `V <= (c e^c / 2) Psi(w)` and `Psi(w) <= 8V`
/// with the boundary-inclusive `Psi`.
pub fn sandwich_check(ws: &[Vec<f64>], dx: f64, variant: LyapunovVariant) -> Result<SandwichReport> {
    let c = variant.c();
    let mut lower = f64::INFINITY;
    let mut upper = f64::INFINITY;
    for w in ws {
        let s = lyapunov_eval(w, dx, 0.0, variant)?;
        let (lo, hi) = match variant {
            LyapunovVariant::FullKernel { .. } => {
                let psi = plant::psi_norm(w, dx, PsiVariant::NoBoundary);
                (2.0 * s.v - psi, c.exp() * psi - 2.0 * s.v)
            }
            LyapunovVariant::GainOnly { .. } => {
                let psi = plant::psi_norm(w, dx, PsiVariant::WithBoundary);
                (8.0 * s.v - psi, 0.5 * c * c.exp() * psi - s.v)
            }
        };
        lower = lower.min(lo);
        upper = upper.min(hi);
    }
    // Quadrature slack proportional to dx: the continuous inequalities
    // are exact, the discrete ones inherit the stencil error.
    let tol = -10.0 * dx * f64::EPSILON.max(1e-12);
    Ok(SandwichReport {
        worst_lower_margin: lower,
        worst_upper_margin: upper,
        holds: lower >= tol && upper >= tol,
    })
}

/// Agmon-type boundary bound `w(0)^2 <= 2 ||w|| ||w_x|| + 10 dx (1 + Psi)`
/// checked on one target state.
pub fn agmon_check(w: &[f64], dx: f64) -> bool {
    let wx = grid::diff(w, dx);
    let nw = grid::l2_sq(w, dx).sqrt();
    let nwx = grid::l2_sq(&wx, dx).sqrt();
    let psi = plant::psi_norm(w, dx, PsiVariant::WithBoundary);
    w[0] * w[0] <= 2.0 * nw * nwx + 10.0 * dx * (1.0 + psi)
}

/// Machine-readable summary of one closed-loop run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub law: &'static str,
    pub termination: String,
    pub t_final: f64,
    pub final_omega: f64,
    pub steps_recorded: usize,
    pub kernel_time: TimingStats,
    pub integral_time: TimingStats,
    /// Decay verdict when Lyapunov diagnostics were run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecayReport>,
}

impl RunSummary {
    pub fn new(spec: &ControllerSpec, run: &ClosedLoopRun) -> Self {
        RunSummary {
            law: spec.law.label(),
            termination: run.trajectory.termination.label().to_string(),
            t_final: *run.trajectory.times.last().unwrap_or(&0.0),
            final_omega: run.trajectory.final_omega(),
            steps_recorded: run.trajectory.times.len(),
            kernel_time: run.kernel_stats,
            integral_time: run.integral_stats,
            decay: None,
        }
    }

    pub fn with_decay(mut self, decay: DecayReport) -> Self {
        self.decay = Some(decay);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
