//! Domain/general trade-off over a sweep of restoration fractions.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::canonical;
use crate::checkpoint::Checkpoint;
use crate::evaluator::Evaluator;
use crate::planner::{Policy, PolicyName, ScoredRow};
use crate::search;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub frac_mlp: f64,
    pub frac_attn: f64,
    pub t: f64,
    /// `NaN` when the evaluator failed for this point.
    pub domain_score: f64,
    pub general_score: f64,
}

/// `0.0, 0.1, …, 1.0`.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Comma-separated fractions in `[0, 1]`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s.parse::<f64>() {
            Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
            _ => Err(HarnessError::BadGrid(s.to_string())),
        })
        .collect::<Result<Vec<f64>, _>>()?;
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid.into());
    }
    Ok(grid)
}

/// Evaluate every grid point. Without `attn_grid` both fractions follow
/// `mlp_grid` together; with it the grid is the cartesian product.
pub fn frontier(
    base: &Checkpoint,
    adapted: &Checkpoint,
    scored: &[ScoredRow],
    template: &Policy,
    mlp_grid: &[f64],
    attn_grid: Option<&[f64]>,
    evaluator: &dyn Evaluator,
) -> Result<Vec<FrontierPoint>> {
    if mlp_grid.is_empty() || attn_grid.is_some_and(|g| g.is_empty()) {
        return Err(HarnessError::EmptyGrid.into());
    }
    let pairs: Vec<(f64, f64)> = match attn_grid {
        None => mlp_grid.iter().map(|&f| (f, f)).collect(),
        Some(attn) => mlp_grid
            .iter()
            .flat_map(|&m| attn.iter().map(move |&a| (m, a)))
            .collect(),
    };
    let workdir = tempfile::tempdir().map_err(|e| search::SearchError::Workspace(e.to_string()))?;
    pairs
        .into_iter()
        .map(|(frac_mlp, frac_attn)| {
            let policy = Policy {
                name: PolicyName::Custom,
                frac_mlp,
                frac_attn,
                ..template.clone()
            };
            policy.validate()?;
            let (domain_score, general_score) =
                match search::evaluate_policy(base, adapted, scored, &policy, evaluator, workdir.path()) {
                    Ok((s, _)) => (s.domain_score, s.general_score),
                    Err(_) => (f64::NAN, f64::NAN),
                };
            Ok(FrontierPoint {
                frac_mlp,
                frac_attn,
                t: canonical::round_sig(policy.t),
                domain_score,
                general_score,
            })
        })
        .collect()
}

/// CSV with header `frac_mlp,frac_attn,t,domain_score,general_score`.
pub fn frontier_csv(points: &[FrontierPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frac_mlp", "frac_attn", "t", "domain_score", "general_score"])
        .expect("in-memory write");
    for p in points {
        w.write_record(
            [p.frac_mlp, p.frac_attn, p.t, p.domain_score, p.general_score].map(canonical::format_float),
        )
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("").is_err());
        assert!(parse_grid(" , ").is_err());
        assert!(parse_grid("0.2,1.5").is_err());
        assert!(parse_grid("x").is_err());
        assert_eq!(default_grid().len(), 11);
    }

    #[test]
    fn csv_layout() {
        let csv = frontier_csv(&[FrontierPoint {
            frac_mlp: 0.5,
            frac_attn: 0.5,
            t: 1.0,
            domain_score: 0.25,
            general_score: f64::NAN,
        }]);
        assert_eq!(csv, "frac_mlp,frac_attn,t,domain_score,general_score\n0.5,0.5,1.0,0.25,nan\n");
    }
}
