use std::path::PathBuf;

use epitoken::epidata::DataError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] epitoken::Error),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// 2 config, 3 i/o, 4 data validation, 5 missing checkpoint, 6 divergence, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use epitoken::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::Io { .. } => 3,
                E::Data(DataError::Io { .. } | DataError::MissingFile(_)) => 3,
                E::Data(_) | E::InsufficientData(_) => 4,
                E::MissingCheckpoint(_) => 5,
                E::Divergence { .. } | E::NonFiniteForecast { .. } => 6,
                _ => 1,
            },
        }
    }

    pub fn hint(&self) -> Option<&'static str> {
        use epitoken::Error as E;
        match self {
            CliError::Core(E::MissingCheckpoint(_)) => Some("run `epitoken train` first or pass --checkpoint <stem>"),
            CliError::Core(E::Divergence { .. }) => Some("lower lr or set normalize = \"per_region_max\""),
            CliError::Core(E::Data(_)) => Some("check the CSV headers and that every region has a row for every date"),
            CliError::Config(_) => Some("see README.md for the list of config keys"),
            _ => None,
        }
    }
}
