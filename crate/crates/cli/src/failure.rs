use std::fmt;
use std::process::ExitCode;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or manifest: exit 2.
    Usage(String),
    /// Anything else that stops a command: exit 1.
    Runtime(String),
    /// Training hit a non-finite loss: exit 3.
    NonFinite(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
            Failure::NonFinite(_) => 3,
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Runtime(m) => write!(f, "{m}"),
            Failure::NonFinite(m) => write!(f, "training aborted: {m}"),
        }
    }
}

impl From<genb::Error> for Failure {
    fn from(e: genb::Error) -> Self {
        match e {
            genb::Error::Config(_) => Failure::Usage(e.to_string()),
            genb::Error::NonFiniteLoss { .. } => Failure::NonFinite(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub fn io_failure(path: &std::path::Path, e: impl fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}
