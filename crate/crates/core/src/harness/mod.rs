//! Report generation and synthetic fixtures behind the command-line tool.

pub mod analysis;
pub mod frontier;
pub mod heatmap;
pub mod synth;

pub use analysis::{analyze, score_pairs, Analysis, AnalysisReport, CheckpointDigests, ImportanceRow};
pub use frontier::{frontier, frontier_csv, parse_grid, FrontierPoint};
pub use heatmap::{heatmap, HeatmapTable};
pub use synth::{synthesize, Perturbation, SynthSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("checkpoints do not align; names present in only one: {}", .0.join(", "))]
    Unaligned(Vec<String>),
    #[error("no aligned tensors to analyze")]
    NothingToAnalyze,
    #[error("report has no per-layer components")]
    NoLayeredComponents,
    #[error("empty fraction grid")]
    EmptyGrid,
    #[error("invalid grid value {0:?}")]
    BadGrid(String),
    #[error("invalid synth spec: {0}")]
    InvalidSynth(String),
}
