//! Numerical workbench for gain-scheduled backstepping control of the
//! transport PDE
//!
//! ```text
//!   u_t(x,t) = u_x(x,t) + beta(x, u(0,t)) u(0,t),   x in [0,1)
//!   u(1,t)   = U(t)
//! ```
//!
//! with nonlinear recirculation through the boundary value `u(0,t)`.
//! The crate covers the full loop: recirculation families and their
//! analytic bounds, Volterra kernel solves for the backstepping gains,
//! a first-order upwind simulator, a small DeepONet-style operator
//! surrogate for the kernel map, scheduled feedback laws, Lyapunov
//! diagnostics, and a timing harness comparing exact kernel solves
//! against operator inference.

pub mod bench;
pub mod cli;
pub mod control;
pub mod error;
pub mod formats;
pub mod grid;
pub mod kernels;
pub mod operator;
pub mod plant;
pub mod recirc;

pub use error::{Error, Result};
pub use grid::SpatialGrid;

/// Number of worker threads for parallel sections. Defaults to the
/// number of available cores; `GSNO_THREADS` overrides it (values < 1
/// or unparsable fall back to 1).
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("GSNO_THREADS") {
        return v.trim().parse::<usize>().unwrap_or(1).max(1);
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}
