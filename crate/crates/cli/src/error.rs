use nelf::geometry::GeometryError;
use nelf::image::ImageError;
use nelf::metrics::MetricsError;
use nelf::model::ModelError;
use nelf::scenes::SceneError;
use nelf::train::TrainError;

/// Command failure, classified by exit code: 2 usage, 3 I/O, 4 numeric.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::InvalidGrid(_) | GeometryError::CoincidentPlanes(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) | ModelError::WrongEmbedding { .. } | ModelError::Subdivision(_) => {
                CliError::Usage(e.to_string())
            }
            ModelError::Geometry(g) => g.into(),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(m) => m.into(),
            MetricsError::DimensionMismatch(..) | MetricsError::TooSmall(..) | MetricsError::OutOfRange(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::InvalidScene(_) => CliError::Usage(e.to_string()),
            SceneError::Geometry(g) => g.into(),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Io { .. } | TrainError::CorruptCheckpoint(_) | TrainError::VersionMismatch { .. } => {
                CliError::Io(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            TrainError::Metrics(m) => m.into(),
            TrainError::Net(_) => CliError::Numeric(e.to_string()),
            TrainError::EmptyDataset | TrainError::EmptySplit(_) | TrainError::InvalidConfig(_) => {
                CliError::Usage(e.to_string())
            }
        }
    }
}
