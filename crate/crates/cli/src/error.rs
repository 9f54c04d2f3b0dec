use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {msg}")]
    ConfigParse { path: PathBuf, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error("run diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },
}

impl CliError {
    /// Process exit code: 2 for a diverged run, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged { .. } => 2,
            _ => 1,
        }
    }
}

impl From<safe_core::Error> for CliError {
    fn from(e: safe_core::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
