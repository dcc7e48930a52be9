use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloakError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("mesh invariant violated at triangle {triangle}: {reason}")]
    MeshInvariant { triangle: usize, reason: String },
    #[error("mesh file parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("empty operator: {0}")]
    EmptyOperator(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("point ({x}, {y}) lies outside triangle {triangle}")]
    OutsideTriangle { triangle: usize, x: f64, y: f64 },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CloakError {
    pub fn config(msg: impl Into<String>) -> Self {
        CloakError::Config(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CloakError::Config(_)
            | CloakError::MeshInvariant { .. }
            | CloakError::Parse { .. }
            | CloakError::Dimension { .. }
            | CloakError::Io(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CloakError>;
