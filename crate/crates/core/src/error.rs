use thiserror::Error;

/// Failures raised by the model layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    /// `measure` is `|det(J Jᵀ)|` on the task rows, `floor` the configured ε.
    #[error("kinematic singularity: measure {measure:.3e} below floor {floor:.3e}")]
    KinematicSingularity { measure: f64, floor: f64 },
    #[error("Euler-angle representation singularity (theta = {theta:.6})")]
    RepresentationSingularity { theta: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type ModelResult<T> = Result<T, ModelError>;
