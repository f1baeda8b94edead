use std::fmt;

/// Failure class, which fixes the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags, config file or resource files.
    Config,
    /// Input data that fails validation, or missing upstream outputs.
    Data,
    /// Anything else, such as an unwritable output directory.
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Internal => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    pub kind: ErrorKind,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn new(stage: &'static str, kind: ErrorKind, source: impl Into<anyhow::Error>) -> Self {
        CliError {
            stage,
            kind,
            source: source.into(),
        }
    }

    pub fn config(stage: &'static str, source: impl Into<anyhow::Error>) -> Self {
        Self::new(stage, ErrorKind::Config, source)
    }

    pub fn data(stage: &'static str, source: impl Into<anyhow::Error>) -> Self {
        Self::new(stage, ErrorKind::Data, source)
    }

    pub fn internal(stage: &'static str, source: impl Into<anyhow::Error>) -> Self {
        Self::new(stage, ErrorKind::Internal, source)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {:#}", self.stage, self.source)
    }
}

impl std::error::Error for CliError {}

/// Attaches a stage and failure class to any error.
pub trait Staged<T> {
    fn stage(self, stage: &'static str, kind: ErrorKind) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Staged<T> for Result<T, E> {
    fn stage(self, stage: &'static str, kind: ErrorKind) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(stage, kind, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_kind() {
        let e: Result<(), std::io::Error> = Err(std::io::Error::other("boom"));
        let e = e.stage("ingest", ErrorKind::Data).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert_eq!(e.to_string(), "ingest failed: boom");
        assert_eq!(CliError::config("config", anyhow::anyhow!("x")).exit_code(), 2);
        assert_eq!(CliError::internal("write", anyhow::anyhow!("x")).exit_code(), 4);
    }
}
