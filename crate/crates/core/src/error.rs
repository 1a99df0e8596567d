use std::path::PathBuf;

use crate::quality::GateFailure;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image: {0}")]
    Format(String),

    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty crop: box does not overlap the image")]
    EmptyCrop,

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("frame index regressed: {got} after {previous}")]
    Sequencing { previous: u64, got: u64 },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("insufficient edge support: {found} edge pixels (need {required})")]
    InsufficientEdges { found: usize, required: usize },

    #[error("no circle found: best score {score:.3} below {required:.3}")]
    NoPeak { score: f64, required: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("weights: {0}")]
    Weights(String),

    #[error("template: {0}")]
    Template(String),

    #[error("no comparable bits: mask intersection is empty")]
    NoOverlap,

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("quality gate failed: {}", format_failures(.0))]
    QualityGate(Vec<GateFailure>),

    #[error("gallery: {0}")]
    Gallery(String),

    #[error("subject {subject} ({eye}) is not enrolled")]
    NotEnrolled { subject: String, eye: String },

    #[error("subject {subject} ({eye}) is already enrolled")]
    Duplicate { subject: String, eye: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
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

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        match self {
            // Gate failures already say where they came from.
            e @ Error::QualityGate(_) => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

fn format_failures(failures: &[GateFailure]) -> String {
    failures
        .iter()
        .map(|f| format!("{} = {:.2} (needs {})", f.metric, f.value, f.requirement))
        .collect::<Vec<_>>()
        .join(", ")
}
