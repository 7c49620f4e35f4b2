use thiserror::Error;

/// Errors raised by the model, controller and integrator layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error(
        "resolution guard violated: sigma*h = {sigma_h:.4} > 0.5 \
         (the tanh transition needs at least 8 nodes; refine the grid or lower sigma)"
    )]
    Resolution { sigma_h: f64 },

    #[error("clamped-end constraint violated: {0}")]
    Constraint(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("assembled system disagrees with the modular right-hand side (relative error {rel_err:.3e})")]
    Assembly { rel_err: f64 },

    #[error("Casimir structure violated: {0}")]
    CasimirStructure(String),

    #[error("input profile is identically zero")]
    DegenerateInput,
}

impl Error {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
