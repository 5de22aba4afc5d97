use std::fmt;

use tmgp::data::DataError;
use tmgp::evaluation::EvaluationError;
use tmgp::models::ModelError;
use tmgp::topology::TopologyError;
use tmgp::training::TrainingError;

/// Process exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 2,
    Ingestion = 3,
    Numeric = 4,
    Io = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Usage, anyhow::anyhow!("{msg}"))
    }

    pub fn ingestion(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Ingestion, anyhow::anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn data_kind(e: &DataError) -> Kind {
    match e {
        DataError::Io { .. } => Kind::Io,
        DataError::Precondition(_) => Kind::Usage,
        DataError::Validation(_) | DataError::Dimension(_) | DataError::Ingestion { .. } => Kind::Ingestion,
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::Io { .. } => Kind::Io,
        ModelError::Serialization(_) | ModelError::Dimension(_) => Kind::Ingestion,
        ModelError::Autodiff(_) => Kind::Numeric,
    }
}

fn topology_kind(e: &TopologyError) -> Kind {
    match e {
        TopologyError::Validation(_) | TopologyError::Precondition(_) => Kind::Ingestion,
        _ => Kind::Numeric,
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::new(data_kind(&e), e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new(model_kind(&e), e)
    }
}

impl From<TopologyError> for CliError {
    fn from(e: TopologyError) -> Self {
        Self::new(topology_kind(&e), e)
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        let kind = match &e {
            TrainingError::Data(d) => data_kind(d),
            TrainingError::Model(m) => model_kind(m),
            TrainingError::Dimension(_) => Kind::Ingestion,
            _ => Kind::Numeric,
        };
        Self::new(kind, e)
    }
}

impl From<EvaluationError> for CliError {
    fn from(e: EvaluationError) -> Self {
        let kind = match &e {
            EvaluationError::Io { .. } => Kind::Io,
            EvaluationError::Dimension(_) | EvaluationError::Parse(_) => Kind::Ingestion,
            EvaluationError::Topology(t) => topology_kind(t),
            EvaluationError::Precondition(_) => Kind::Numeric,
        };
        Self::new(kind, e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(Kind::Io, e)
    }
}
