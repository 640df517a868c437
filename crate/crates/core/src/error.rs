use thiserror::Error;

/// Errors produced by the planner, the slicer and the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no catalog entry named `{0}`")]
    UnknownEntry(String),

    #[error("weights ({weights:.3e} B) do not fit in pool memory ({memory:.3e} B)")]
    WeightsExceedMemory { weights: f64, memory: f64 },

    #[error("{heads} KV heads cannot be split evenly over {devices} devices")]
    HeadDivisibility { heads: usize, devices: usize },

    #[error("computation graph: {0}")]
    Graph(String),

    #[error("schedule infeasible: t_attn={t_attn_us}us vs t_model/(n-1)={target_us:.1}us and stretching is disabled")]
    InfeasibleSchedule { t_attn_us: u64, target_us: f64 },

    #[error("empty partial attention cannot be finalized")]
    EmptyPartial,

    #[error("no feasible configuration")]
    NoFeasibleConfig,

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Error {
    Error::Invalid {
        what,
        reason: reason.into(),
    }
}
