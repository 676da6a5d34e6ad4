use thiserror::Error;

/// A pipeline failure, classified by the exit code it maps to.
#[derive(Debug, Error)]
pub enum Failure {
    /// Bad flags or flag combinations.
    #[error("{0}")]
    Usage(String),
    /// Unreadable, malformed or invariant-violating input.
    #[error("{0}")]
    Input(String),
    /// An optimization produced a non-finite loss.
    #[error("{0}")]
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    /// The one-line stderr form, `E<code>: <message>`.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("E{}: {msg}", self.exit_code())
    }

    pub fn input(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        Failure::Input(format!("{context}: {e}"))
    }
}

impl From<d4d_core::Error> for Failure {
    fn from(e: d4d_core::Error) -> Self {
        match e {
            d4d_core::Error::Diverged { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

pub type Result<T, E = Failure> = std::result::Result<T, E>;
