use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite objective while probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("non-finite gradient at attack step {step}")]
    NonFiniteGradient { step: usize },

    #[error("adversarial example escaped its constraint set: {0}")]
    Containment(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid discrete world: {0}")]
    World(String),

    #[error("absolute continuity violated at atom {atom}: p = {p}, q = {q}")]
    AbsoluteContinuity { atom: usize, p: f64, q: f64 },

    #[error("enumeration budget exceeded: {needed} negative multisets > {budget}")]
    Budget { needed: u128, budget: u128 },

    #[error("malformed CIFAR record at byte offset {offset}: {detail}")]
    Cifar { offset: usize, detail: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NumericalAbort { epoch: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
