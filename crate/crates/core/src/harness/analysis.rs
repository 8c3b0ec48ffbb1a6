//! Per-tensor importance report for an aligned checkpoint pair.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::archmap::{ArchProfile, ComponentKind};
use crate::canonical;
use crate::checkpoint::{self, Checkpoint};
use crate::metrics::{self, MetricConfig, RawMetrics};
use crate::planner::{self, MergePlan, Policy, ScoredRow};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub name: String,
    pub layer: Option<usize>,
    pub component: ComponentKind,
    pub snr: f64,
    pub swci: f64,
    pub svdr: f64,
    pub rel_change: f64,
    pub fused: f64,
    pub rank_in_group: usize,
    pub restore: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub metrics: MetricConfig,
    pub policy: Policy,
}

/// SHA-256 of the input checkpoint files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointDigests {
    pub base: String,
    pub adapted: String,
}

impl CheckpointDigests {
    pub fn of_bytes(base: &[u8], adapted: &[u8]) -> Self {
        Self {
            base: canonical::sha256_hex(base),
            adapted: canonical::sha256_hex(adapted),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    /// Sorted by (component, layer, name).
    pub rows: Vec<ImportanceRow>,
    pub config: ReportConfig,
    pub digests: CheckpointDigests,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        canonical::to_canonical_json(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| crate::Error::Usage(format!("malformed analysis report: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub report: AnalysisReport,
    pub scored: Vec<ScoredRow>,
    pub plan: MergePlan,
}

/// Metrics and fused score for every aligned pair, sorted by
/// (component, layer, name). Names present in only one checkpoint are an error.
pub fn score_pairs(
    base: &Checkpoint,
    adapted: &Checkpoint,
    profile: &ArchProfile,
    cfg: &MetricConfig,
) -> Result<Vec<ScoredRow>> {
    cfg.validate()?;
    let alignment = checkpoint::aligned_pairs(base, adapted)?;
    let unmatched = alignment.unmatched();
    if !unmatched.is_empty() {
        return Err(HarnessError::Unaligned(unmatched.iter().map(|s| s.to_string()).collect()).into());
    }
    if alignment.pairs.is_empty() {
        return Err(HarnessError::NothingToAnalyze.into());
    }
    let raw: Vec<_> = alignment
        .pairs
        .iter()
        .map(|p| {
            let m = metrics::compute_metrics(&p.base.to_matrix(), &p.adapted.to_matrix(), cfg)
                .map_err(|e| crate::Error::Tensor(p.name().to_string(), e))?;
            Ok((profile.classify(p.name()), m))
        })
        .collect::<Result<Vec<_>>>()?;
    let fused = metrics::fuse_scores(&raw, cfg)?;
    let mut rows: Vec<ScoredRow> = raw
        .into_iter()
        .zip(fused)
        .map(|((locator, metrics), (_, fused))| ScoredRow {
            locator,
            metrics,
            fused,
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &ScoredRow| (r.locator.component, r.locator.layer, r.locator.name.clone());
        key(a).cmp(&key(b))
    });
    Ok(rows)
}

fn report_row(row: &ScoredRow, plan: &MergePlan) -> ImportanceRow {
    let entry = plan
        .entries
        .iter()
        .find(|e| e.name == row.locator.name)
        .expect("plan covers every scored row");
    let RawMetrics {
        swci,
        svdr,
        snr,
        rel_change,
    } = row.metrics;
    ImportanceRow {
        name: row.locator.name.clone(),
        layer: row.locator.layer,
        component: row.locator.component,
        snr,
        swci,
        svdr,
        rel_change,
        fused: row.fused,
        rank_in_group: entry.rank_in_group,
        restore: entry.restore,
    }
}

/// Score, plan, and assemble the report.
pub fn analyze(
    base: &Checkpoint,
    adapted: &Checkpoint,
    digests: CheckpointDigests,
    profile: &ArchProfile,
    cfg: &MetricConfig,
    policy: &Policy,
) -> Result<Analysis> {
    let scored = score_pairs(base, adapted, profile, cfg)?;
    let plan = planner::build_plan(&scored, policy)?;
    let rows = scored.iter().map(|r| report_row(r, &plan)).collect();
    Ok(Analysis {
        report: AnalysisReport {
            rows,
            config: ReportConfig {
                metrics: cfg.clone(),
                policy: plan.policy.clone(),
            },
            digests,
        },
        scored,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{synthesize, SynthSpec};
    use crate::planner::PolicyName;

    fn digests() -> CheckpointDigests {
        CheckpointDigests::of_bytes(b"", b"")
    }

    #[test]
    fn identical_checkpoints_score_flat() {
        let (base, _) = synthesize(&SynthSpec::default()).unwrap();
        let a = analyze(
            &base,
            &base,
            digests(),
            &ArchProfile::llama(),
            &MetricConfig::default(),
            &Policy::preset(PolicyName::Balanced),
        )
        .unwrap();
        assert_eq!(a.report.rows.len(), base.len());
        for r in &a.report.rows {
            assert_eq!((r.swci, r.svdr, r.fused), (0.0, 0.0, 0.5), "{}", r.name);
        }
    }

    #[test]
    fn rows_sorted_and_json_stable() {
        let (base, adapted) = synthesize(&SynthSpec::default()).unwrap();
        let run = || {
            analyze(
                &base,
                &adapted,
                digests(),
                &ArchProfile::llama(),
                &MetricConfig::default(),
                &Policy::preset(PolicyName::Conservative),
            )
            .unwrap()
            .report
        };
        let report = run();
        let keys: Vec<_> = report
            .rows
            .iter()
            .map(|r| (r.component, r.layer, r.name.clone()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let json = report.to_json();
        assert_eq!(json, run().to_json());
        assert_eq!(AnalysisReport::from_json(&json).unwrap().to_json(), json);
    }

    #[test]
    fn unmatched_names_are_listed() {
        let (base, mut adapted) = synthesize(&SynthSpec::default()).unwrap();
        adapted.tensors.remove("lm_head.weight");
        let err = score_pairs(&base, &adapted, &ArchProfile::llama(), &MetricConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("lm_head.weight"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
