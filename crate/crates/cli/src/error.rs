use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
            Self::Io(_) => 4,
        }
    }
}

impl From<synthsae::Error> for CliError {
    fn from(e: synthsae::Error) -> Self {
        use synthsae::Error as E;
        match e {
            E::Config(m) => Self::Config(m),
            E::Io(io) => Self::Io(io.to_string()),
            E::Container(c) => Self::Io(c.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

pub fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = Result<T, CliError>;
