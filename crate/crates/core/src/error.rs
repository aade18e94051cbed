use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] dodt_autodiff::Error),
    #[error("action contains NaN")]
    NanAction,
    #[error("action has {found} components, environment expects {expected}")]
    ActionDim { expected: usize, found: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("unknown environment `{0}` (expected pendulum, point_reach or chain)")]
    UnknownEnv(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("no episode has at least {required} steps")]
    NoLongEpisode { required: usize },
    #[error("trajectory buffer is empty")]
    EmptyBuffer,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dimension mismatch: checkpoint expects obs_dim={expected_obs} act_dim={expected_act}, environment has obs_dim={found_obs} act_dim={found_act}")]
    DimMismatch {
        expected_obs: usize,
        expected_act: usize,
        found_obs: usize,
        found_act: usize,
    },
    #[error("ownership audit: {0}")]
    Audit(String),
    #[error("round {round} failed in {phase} phase: {source}")]
    Round {
        round: usize,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
