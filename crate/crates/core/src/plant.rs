//! First order upwind simulator for the plant
//!
//! ```text
//!   u_t(x,t) = u_x(x,t) + beta(x, u(0,t)) u(0,t),  x in [0,1)
//!   u(1,t)   = U(t),
//! ```
//!
//! plus the state norms and the backstepping transform pair used by
//! the diagnostics.
//!
//! The transport term moves left with unit speed, so the explicit
//! scheme is stable for `dt <= dx` (Courant number at most one) and
//! reduces to an exact shift at `dt = dx`. The recirculation source
//! uses the boundary value frozen at the start of the step.

use crate::error::{Error, Result};
use crate::grid::{self, conv_at, SpatialGrid};
use crate::recirc::RecircFamily;

pub const BLOWUP_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct PlantState {
    pub grid: SpatialGrid,
    pub t: f64,
    pub u: Vec<f64>,
}

impl PlantState {
    pub fn new(grid: SpatialGrid, u: Vec<f64>) -> Result<Self> {
        if u.len() != grid.n() {
            return Err(Error::Shape(format!(
                "state has {} values, grid has {} points",
                u.len(),
                grid.n()
            )));
        }
        Ok(PlantState { grid, t: 0.0, u })
    }

    /// Boundary trace `u(0, t)`, the scheduling variable.
    pub fn trace(&self) -> f64 {
        self.u[0]
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Keep every `record_stride`-th step in the trajectory (the
    /// final step is always kept).
    pub record_stride: usize,
    pub blowup_threshold: f64,
}

impl SimConfig {
    pub fn new(dt: f64, t_end: f64) -> Self {
        SimConfig {
            dt,
            t_end,
            record_stride: 1,
            blowup_threshold: BLOWUP_THRESHOLD,
        }
    }

    pub fn with_record_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride.max(1);
        self
    }

    fn validate(&self, grid: &SpatialGrid) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t_end > 0.0) {
            return Err(Error::Config(format!(
                "dt = {} and t_end = {} must be positive",
                self.dt, self.t_end
            )));
        }
        if self.dt > grid.dx() * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "dt = {} violates the Courant condition dt <= dx = {}",
                self.dt,
                grid.dx()
            )));
        }
        Ok(())
    }
}

/// Why a simulation stopped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    Completed,
    /// The boundary trace left the scheduling box at time `t`.
    DomainExit { t: f64 },
    /// The sup norm of the state crossed the blow-up threshold at `t`.
    BlowUp { t: f64 },
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::Completed => "completed",
            Termination::DomainExit { .. } => "domain-exit",
            Termination::BlowUp { .. } => "blow-up",
        }
    }
}

/// Recorded history of one run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: SpatialGrid,
    pub dt: f64,
    pub times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
    /// Boundary input applied over the step starting at each time.
    pub controls: Vec<f64>,
    pub traces: Vec<f64>,
    pub omegas: Vec<f64>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn final_omega(&self) -> f64 {
        *self.omegas.last().unwrap_or(&f64::NAN)
    }
}

/// Advance one step in place. `u_next_boundary` is the boundary input
/// applied at the end of the step.
pub fn upwind_step(
    state: &mut PlantState,
    family: &RecircFamily,
    dt: f64,
    u_next_boundary: f64,
) -> Result<()> {
    let n = state.grid.n();
    let dx = state.grid.dx();
    let lam = dt / dx;
    let trace = state.u[0];
    // Evaluating beta at the trace enforces the scheduling box.
    let mut src = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        src.push(family.beta(state.grid.x(i), trace)? * trace);
    }
    let u = &mut state.u;
    for i in 0..n - 1 {
        u[i] = u[i] + lam * (u[i + 1] - u[i]) + dt * src[i];
    }
    u[n - 1] = u_next_boundary;
    state.t += dt;
    Ok(())
}

/// Run the plant under a boundary feedback closure. Domain exits and
/// blow-ups terminate the run and are reported in the trajectory, not
/// as errors.
pub fn simulate(
    u0: Vec<f64>,
    family: &RecircFamily,
    cfg: &SimConfig,
    mut controller: impl FnMut(&PlantState) -> Result<f64>,
) -> Result<Trajectory> {
    let grid = SpatialGrid::new(u0.len())?;
    cfg.validate(&grid)?;
    let mut state = PlantState::new(grid.clone(), u0)?;
    let steps = (cfg.t_end / cfg.dt).round() as usize;
    let mut traj = Trajectory {
        grid: grid.clone(),
        dt: cfg.dt,
        times: Vec::new(),
        snapshots: Vec::new(),
        controls: Vec::new(),
        traces: Vec::new(),
        omegas: Vec::new(),
        termination: Termination::Completed,
    };
    let record = |state: &PlantState, control: f64, traj: &mut Trajectory| {
        traj.times.push(state.t);
        traj.snapshots.push(state.u.clone());
        traj.controls.push(control);
        traj.traces.push(state.trace());
        traj.omegas.push(omega_norm(&state.u, grid.dx()));
    };
    for step in 0..steps {
        let control = match controller(&state) {
            Ok(c) => c,
            Err(Error::DomainExit { .. }) => {
                traj.termination = Termination::DomainExit { t: state.t };
                break;
            }
            Err(e) => return Err(e),
        };
        if step % cfg.record_stride == 0 {
            record(&state, control, &mut traj);
        }
        match upwind_step(&mut state, family, cfg.dt, control) {
            Ok(()) => {}
            Err(Error::DomainExit { .. }) => {
                traj.termination = Termination::DomainExit { t: state.t };
                break;
            }
            Err(e) => return Err(e),
        }
        let m = grid::max_abs(&state.u);
        if m > cfg.blowup_threshold {
            traj.termination = Termination::BlowUp { t: state.t };
            break;
        }
    }
    if traj.termination == Termination::Completed {
        let control = controller(&state).unwrap_or(f64::NAN);
        record(&state, control, &mut traj);
    }
    Ok(traj)
}

/// `Omega(u) = u(0)^2 + ||u||^2 + ||u_x||^2`.
pub fn omega_norm(u: &[f64], dx: f64) -> f64 {
    let ux = grid::diff(u, dx);
    u[0] * u[0] + grid::l2_sq(u, dx) + grid::l2_sq(&ux, dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiVariant {
    /// `||w||^2 + ||w_x||^2`.
    NoBoundary,
    /// Adds `w(0)^2`.
    WithBoundary,
}

/// `Psi(w)` in either variant.
pub fn psi_norm(w: &[f64], dx: f64, variant: PsiVariant) -> f64 {
    let wx = grid::diff(w, dx);
    let base = grid::l2_sq(w, dx) + grid::l2_sq(&wx, dx);
    match variant {
        PsiVariant::NoBoundary => base,
        PsiVariant::WithBoundary => base + w[0] * w[0],
    }
}

/// Forward backstepping transform `w = u - k * u` with a frozen
/// kernel slice.
pub fn transform(u: &[f64], k: &[f64], dx: f64) -> Vec<f64> {
    (0..u.len()).map(|i| u[i] - conv_at(k, u, i, dx)).collect()
}

/// Inverse transform `u = w + l * w`.
pub fn inverse_transform(w: &[f64], l: &[f64], dx: f64) -> Vec<f64> {
    (0..w.len()).map(|i| w[i] + conv_at(l, w, i, dx)).collect()
}
