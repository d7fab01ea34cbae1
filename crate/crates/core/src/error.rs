//! Errors surfaced by the command-line front end, each mapped to an exit
//! status.

use thiserror::Error;

use crate::bench::BenchError;
use crate::dataio::DataError;
use crate::matchloss::MatchError;
use crate::metatrain::TrainError;
use crate::search::SearchError;
use crate::sim4opt::Sim4OptError;
use crate::surrogate::SurrogateError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => EXIT_CONFIG,
            Self::Numerical(_) => EXIT_NUMERICAL,
            Self::Io(_) => EXIT_IO,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config { .. } => "config",
            Self::Numerical(_) => "numerical",
            Self::Io(_) => "io",
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::config("-", e.to_string())
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Csv(_) | DataError::Parse { .. } => CliError::Io(e.to_string()),
            DataError::InvalidFraction(_) => invalid(e),
            _ => numerical(e),
        }
    }
}

impl From<SurrogateError> for CliError {
    fn from(e: SurrogateError) -> Self {
        match e {
            SurrogateError::Io(_) | SurrogateError::Checkpoint(_) => CliError::Io(e.to_string()),
            SurrogateError::InvalidArchitecture(_) => invalid(e),
            _ => numerical(e),
        }
    }
}

impl From<MatchError> for CliError {
    fn from(e: MatchError) -> Self {
        match e {
            MatchError::Surrogate(s) => s.into(),
            MatchError::InvalidNodes | MatchError::TooFewPoints(_) => invalid(e),
            _ => numerical(e),
        }
    }
}

impl From<Sim4OptError> for CliError {
    fn from(e: Sim4OptError) -> Self {
        match e {
            Sim4OptError::InvalidDelta(_) | Sim4OptError::InvalidConfig(_) => invalid(e),
            Sim4OptError::Bundle(_) => CliError::Io(e.to_string()),
            Sim4OptError::Pairs(m) => m.into(),
            _ => numerical(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::NoTasks | TrainError::TooFewPoints(_) => invalid(e),
            TrainError::Match(m) => m.into(),
            TrainError::Tasks(t) => t.into(),
            TrainError::Surrogate(s) => s.into(),
            TrainError::NonFiniteLoss(_) => numerical(e),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Surrogate(s) => s.into(),
            SearchError::InvalidConfig(_) | SearchError::BoundsMismatch { .. } => invalid(e),
            SearchError::EmptyPool => numerical(e),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Data(d) => d.into(),
            BenchError::Tasks(t) => t.into(),
            BenchError::Train(t) => t.into(),
            BenchError::Search(s) => s.into(),
            BenchError::Surrogate(s) => s.into(),
            BenchError::Match(m) => m.into(),
            BenchError::Gp(_) | BenchError::EmptyTask => numerical(e),
            _ => invalid(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(CliError::config("a.b", "bad").exit_code(), 2);
        let e: CliError = TrainError::NonFiniteLoss(3).into();
        assert_eq!(e.exit_code(), 3);
        let e: CliError = SurrogateError::Checkpoint("truncated".into()).into();
        assert_eq!(e.exit_code(), 4);
        let e: CliError = BenchError::Train(TrainError::InvalidConfig("x".into())).into();
        assert_eq!(e.exit_code(), 2);
    }
}
