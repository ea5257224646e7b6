use qgt_core::QgtError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("run {run}: {source}")]
    Run {
        run: String,
        #[source]
        source: QgtError,
    },

    #[error(transparent)]
    Core(#[from] QgtError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }

    fn core(&self) -> Option<&QgtError> {
        match self {
            HarnessError::Run { source, .. } | HarnessError::Core(source) => Some(source),
            _ => None,
        }
    }

    /// Process exit status: 2 for bad configuration, 3 for numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match (self, self.core()) {
            (HarnessError::Config(_), _) | (HarnessError::Json(_), _) => 2,
            (_, Some(QgtError::InvalidArgument(_))) => 2,
            (
                _,
                Some(
                    QgtError::TrainingDiverged(_)
                    | QgtError::SingularSystem { .. }
                    | QgtError::DegenerateClustering(_),
                ),
            ) => 3,
            _ => 1,
        }
    }
}
