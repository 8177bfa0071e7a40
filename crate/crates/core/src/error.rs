use thiserror::Error;

/// Every failure the engine, trainer and file loaders can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate row {row}: every key is masked")]
    DegenerateRow { row: usize },
    #[error("degenerate vector: zero norm")]
    DegenerateVector,
    #[error("config error: {0}")]
    Config(String),
    #[error("capacity error: position {position} exceeds max positions {max}")]
    Capacity { position: usize, max: usize },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("ordering error: frame {incoming} is not newer than frame {newest}")]
    Ordering { incoming: usize, newest: usize },
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: expected {expected} payload bytes, found {actual}")]
    Length { expected: u64, actual: u64 },
    #[error("numeric error at step {step}: loss is {loss}")]
    Numeric { step: usize, loss: f64 },
    #[error("selection error: {0}")]
    Selection(String),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("task spec error: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
