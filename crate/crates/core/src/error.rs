use crate::model::ParamSnapshot;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("step index {t} out of range 1..={horizon}")]
    Index { t: usize, horizon: usize },

    #[error("non-finite state during rollout at step {step}")]
    Rollout { step: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {what} (parameter norm {param_norm:.3e})")]
    Numeric { what: String, param_norm: f64 },

    #[error("unknown prompt {0}")]
    UnknownPrompt(usize),

    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),

    #[error("training diverged in {stage} at step {step}")]
    Diverged {
        stage: &'static str,
        step: usize,
        last_good: Box<ParamSnapshot>,
    },

    #[error("gradient check failed: worst relative error {worst_rel_err:.3e} at coordinates {coords:?}")]
    GradCheck { worst_rel_err: f64, coords: Vec<usize> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("comparison error: {0}")]
    Compare(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
