//! Spectral importance scoring and selective restoration of adapted
//! checkpoints toward their base weights.

pub mod archmap;
pub mod canonical;
pub mod checkpoint;
pub mod evaluator;
pub mod harness;
pub mod merger;
pub mod metrics;
pub mod planner;
pub mod rng;
pub mod search;
pub mod spectral;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Arch(#[from] archmap::ArchError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error("tensor `{0}`: {1}")]
    Tensor(String, metrics::MetricError),
    #[error(transparent)]
    Plan(#[from] planner::PlanError),
    #[error(transparent)]
    Merge(#[from] merger::MergeError),
    #[error(transparent)]
    Eval(#[from] evaluator::EvalError),
    #[error(transparent)]
    Search(#[from] search::SearchError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// 2 for bad input or configuration, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use search::SearchError;
        match self {
            Error::Search(SearchError::AllTrialsFailed(..) | SearchError::Workspace(_))
            | Error::Eval(_)
            | Error::Output { .. } => 1,
            _ => 2,
        }
    }
}
