use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. Contract violations (shape mismatches,
/// out-of-range indices) panic instead; these variants cover data-dependent
/// and I/O failures a caller can meaningfully react to.
#[derive(Debug, Error)]
pub enum FicsError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed artifact {path}: {reason}")]
    BadArtifact { path: PathBuf, reason: String },

    #[error("artifact {path} failed its integrity check (stored hash {stored}, computed {computed})")]
    HashMismatch {
        path: PathBuf,
        stored: String,
        computed: String,
    },

    #[error("artifact {path} has version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("artifact {path} has kind `{found}`, expected `{expected}`")]
    KindMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("group (y={class}, a={attribute}) {reason}")]
    DegenerateGroup {
        class: usize,
        attribute: usize,
        reason: String,
    },

    #[error("group (y={class}, a={attribute}) has {have} examples but {need} are required")]
    InsufficientGroup {
        class: usize,
        attribute: usize,
        need: usize,
        have: usize,
    },

    #[error("cannot train on {reason}")]
    UnusableTrainingSet { reason: String },

    #[error("classifier of kind `{kind}` must be frozen before use here")]
    NotFrozen { kind: String },

    #[error(
        "discriminator diverged: loss stayed below {threshold:e} for {window} consecutive \
         steps (at generator step {step})"
    )]
    Divergence {
        step: usize,
        threshold: f32,
        window: usize,
    },

    #[error(
        "rejection sampling collapsed: {accepted} of {candidates} candidates accepted \
         (rate below {min_rate:e}); candidate and target supports likely mismatch"
    )]
    AcceptanceCollapse {
        candidates: u64,
        accepted: u64,
        min_rate: f64,
    },

    #[error(
        "generator produces no samples with attribute {attribute} under class {class} \
         (empirical q-hat is zero while the target is {target}); intervention insufficient"
    )]
    MissingAttributeSupport {
        class: usize,
        attribute: usize,
        target: f64,
    },

    #[error("checkpoint was trained in mode `{trained}` but `{requested}` sampling was requested")]
    ModeMismatch { trained: String, requested: String },

    #[error("resampling weights are degenerate: {reason}")]
    DegenerateWeights { reason: String },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("backward on a detached graph: loss depends on no trainable leaf")]
    DetachedGraph,

    #[error("feature matrix has {rows} rows but dimension {dim} needs at least {min_rows}")]
    RankDeficient {
        rows: usize,
        dim: usize,
        min_rows: usize,
    },

    #[error("matrix square root hit eigenvalue {value:e} below the -1e-6 tolerance")]
    NegativeEigenvalue { value: f64 },

    #[error("class {class} is missing from {side}")]
    MissingClass { class: usize, side: String },

    #[error("invalid configuration: {reason}")]
    Config { reason: String },

    #[error("refusing to tabulate reports over different datasets ({a} vs {b})")]
    MixedDatasets { a: String, b: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<FicsError>,
    },
}

pub type Result<T> = std::result::Result<T, FicsError>;

impl FicsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FicsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(reason: impl Into<String>) -> Self {
        FicsError::Config {
            reason: reason.into(),
        }
    }

    pub fn bad_artifact(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        FicsError::BadArtifact {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
