use thiserror::Error;

pub type Result<T> = std::result::Result<T, IvError>;

#[derive(Debug, Error)]
pub enum IvError {
    /// Argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Γ̂ₙ (or another matrix that must be inverted) is singular or too
    /// ill-conditioned to invert reliably.
    #[error("rank deficient matrix (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("insufficient sample: need at least {needed} observations, got {got}")]
    InsufficientSample { needed: usize, got: usize },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("degenerate instrument: {0}")]
    DegenerateInstrument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl IvError {
    /// True for failures caused by the numbers rather than the inputs' shape or
    /// syntax (rank deficiency, degenerate samples, domain violations).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            IvError::Domain(_)
                | IvError::RankDeficient { .. }
                | IvError::DegenerateSample(_)
                | IvError::DegenerateInstrument(_)
        )
    }
}
