use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage that produced an error while coding a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    MotionEstimation,
    MvPrediction,
    MvdCoding,
    MvRefinement,
    MotionCompensation,
    ResidualCoding,
    ResidualRefinement,
    Intra,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::MotionEstimation => "motion-estimation",
            Stage::MvPrediction => "mv-prediction",
            Stage::MvdCoding => "mvd-coding",
            Stage::MvRefinement => "mv-refinement",
            Stage::MotionCompensation => "motion-compensation",
            Stage::ResidualCoding => "residual-coding",
            Stage::ResidualRefinement => "residual-refinement",
            Stage::Intra => "intra",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode/encode: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),

    #[error("no frames found in {0}")]
    NoFrames(PathBuf),

    #[error("inconsistent frame resolution: expected {expected:?}, found {found:?} in {path}")]
    InconsistentResolution {
        expected: (usize, usize),
        found: (usize, usize),
        path: PathBuf,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of {have} frames is shorter than clip length {need}")]
    SequenceTooShort { have: usize, need: usize },

    #[error("frame {height}x{width} too small: {reason}")]
    TooSmall {
        height: usize,
        width: usize,
        reason: &'static str,
    },

    #[error("symbol {value} outside coder alphabet bound +/-{bound}")]
    SymbolOutOfRange { value: i64, bound: i64 },

    #[error("truncated payload: {0}")]
    Truncated(&'static str),

    #[error("cdf table checksum mismatch: payload {found:#06x}, local {expected:#06x}")]
    TableChecksum { expected: u16, found: u16 },

    #[error("bad container header: {0}")]
    Header(String),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged in phase {phase} at step {step}: {reason}")]
    Divergence {
        phase: String,
        step: usize,
        reason: String,
    },

    #[error("frozen parameters changed during phase {0}")]
    FreezeViolation(String),

    #[error("external intra codec failed: {0}")]
    External(String),

    #[error("flow backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("{stage} stage failed on frame {frame}: {source}")]
    AtStage {
        stage: Stage,
        frame: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at(self, stage: Stage, frame: usize) -> Self {
        Error::AtStage {
            stage,
            frame,
            source: Box::new(self),
        }
    }

    /// True when the error stems from a model/weights disagreement rather than bad data.
    pub fn is_model_mismatch(&self) -> bool {
        match self {
            Error::ModelMismatch(_) | Error::TableChecksum { .. } | Error::MissingCheckpoint(_) => {
                true
            }
            Error::AtStage { source, .. } => source.is_model_mismatch(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait StageExt<T> {
    fn at_stage(self, stage: Stage, frame: usize) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn at_stage(self, stage: Stage, frame: usize) -> Result<T> {
        self.map_err(|e| e.into().at(stage, frame))
    }
}
