use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// A scheduling parameter or boundary value left the admissible box.
    #[error("domain exit: {what} = {value} outside [{lo}, {hi}]")]
    DomainExit {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// Analytic x-derivatives of the Chebyshev family blow up at x = 1.
    #[error("singular derivative evaluation at x = {x} (within {eps} of the endpoint)")]
    Singularity { x: f64, eps: f64 },

    /// The marching diagonal of a Volterra solve is numerically zero.
    #[error("volterra solve ill-posed: marching diagonal {diag:.3e} below {tol:.3e}")]
    IllPosed { diag: f64, tol: f64 },

    /// A solved kernel slice failed its residual check.
    #[error("volterra residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    Residual { residual: f64, tol: f64 },

    /// The simulated state exceeded the blow-up threshold.
    #[error("state blow-up at t = {t}: max |u| = {max_abs:.3e}")]
    BlowUp { t: f64, max_abs: f64 },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code mapping used by the command line interface:
    /// numerical failures return 1, usage and format errors return 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DomainExit { .. }
            | Error::Singularity { .. }
            | Error::IllPosed { .. }
            | Error::Residual { .. }
            | Error::BlowUp { .. }
            | Error::Divergence { .. } => 1,
            Error::Shape(_) | Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => 2,
        }
    }
}
