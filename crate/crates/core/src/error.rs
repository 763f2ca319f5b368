use thiserror::Error;

/// Errors raised by the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("kernel evaluated at coincident points")]
    SingularEvaluation,

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("proxy violation: {0}")]
    ProxyViolation(String),

    #[error("singular block at HBS tree node {node} (level {level}), condition estimate {cond:.3e}")]
    HbsSingular { node: usize, level: usize, cond: f64 },

    #[error("Woodbury operator numerically singular (condition {cond:.3e}); try the svd_optimal update mode")]
    WoodburySingular { cond: f64 },

    #[error("HBS operator has no inverse factors; call invert first")]
    MissingInverse,

    #[error("GMRES did not converge: {0}")]
    NonConvergence(Box<crate::krylov::NonConvergence>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            what,
            expected,
            found,
        });
    }
    Ok(())
}
