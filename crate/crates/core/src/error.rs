use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("bad magic")]
    BadMagic,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("header/payload size mismatch: {0}")]
    SizeMismatch(String),

    #[error("non-finite data in row {row}")]
    NonFinite { row: usize },

    #[error("invalid metadata: {0}")]
    InvalidMeta(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("dictionary atom {atom} has norm {norm}, expected unit norm")]
    NonUnitAtom { atom: usize, norm: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unsatisfiable: {0}")]
    Unsatisfiable(String),

    #[error("tries-exhausted after {0} proposals")]
    TriesExhausted(usize),

    #[error("cv requires ≥2 subsets (found {0})")]
    CvRequiresTwoSubsets(usize),

    #[error("no atom has a defined CV")]
    NoActiveAtoms,

    #[error("no reliance mass: every score is zero")]
    NoRelianceMass,

    #[error("training split must contain both classes")]
    SingleClass,

    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),

    #[error("pool too small: {items} items for {atoms} atoms")]
    PoolTooSmall { items: usize, atoms: usize },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("unknown atom id {atom} (dictionary has {n_dicts} atoms)")]
    UnknownAtom { atom: usize, n_dicts: usize },

    #[error("coherence cap {cap} unattainable after {tries} resamples")]
    Coherence { cap: f64, tries: usize },
}
