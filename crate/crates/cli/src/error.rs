use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] breathae::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Stable short name used in the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        use breathae::Error as E;
        match self {
            Self::Config(_) => "config",
            Self::MissingFile(_) => "missing_file",
            Self::Io { .. } => "io",
            Self::Core(e) => match e {
                E::Config(_) | E::Spec(_) => "config",
                E::Format(_) | E::Corrupt(_) => "schema",
                E::Version { .. } => "version",
                E::Io(_) => "io",
                E::Json(_) => "schema",
                _ => "runtime",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "missing_file" | "io" => 3,
            "schema" | "version" => 4,
            _ => 1,
        }
    }

    /// One-line JSON description of the failure.
    pub fn error_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}
