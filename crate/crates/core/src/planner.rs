//! Ranking within component groups and restoration policies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archmap::{ComponentKind, MacroGroup, ParamLocator};
use crate::canonical;
use crate::metrics::{normalize_by_group, RawMetrics};
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("{what} = {value} is outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("no MLP or attention tensors to plan over")]
    NothingRestorable,
    #[error("unknown {what} {value:?}")]
    Unknown { what: &'static str, value: String },
    #[error("malformed plan JSON: {0}")]
    Json(String),
    #[error("plan digest mismatch: recorded {recorded}, computed {computed}")]
    DigestMismatch { recorded: String, computed: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Conservative,
    Balanced,
    Aggressive,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Combined,
    SwciOnly,
    SvdrOnly,
    SnrOnly,
    Random,
}

/// Which end of the ranking gets restored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RestoreEnd {
    #[default]
    Top,
    Bottom,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, { $($s:literal => $v:expr),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = PlanError;
            fn from_str(s: &str) -> Result<Self, PlanError> {
                match s {
                    $($s => Ok($v),)*
                    _ => Err(PlanError::Unknown { what: $what, value: s.to_string() }),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($s); })*
                unreachable!()
            }
        }
    };
}

str_enum!(PolicyName, "policy", {
    "conservative" => PolicyName::Conservative,
    "balanced" => PolicyName::Balanced,
    "aggressive" => PolicyName::Aggressive,
    "custom" => PolicyName::Custom,
});
str_enum!(SelectionMode, "mode", {
    "combined" => SelectionMode::Combined,
    "swci_only" => SelectionMode::SwciOnly,
    "svdr_only" => SelectionMode::SvdrOnly,
    "snr_only" => SelectionMode::SnrOnly,
    "random" => SelectionMode::Random,
});
str_enum!(RestoreEnd, "restore end", {
    "top" => RestoreEnd::Top,
    "bottom" => RestoreEnd::Bottom,
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub name: PolicyName,
    pub frac_mlp: f64,
    pub frac_attn: f64,
    pub t: f64,
    pub mode: SelectionMode,
    pub seed: u64,
    pub restore_end: RestoreEnd,
}

pub const DEFAULT_T: f64 = 0.5;

impl Policy {
    /// Preset fractions: conservative (0.40, 0.40), balanced (0.50, 0.60),
    /// aggressive (0.60, 0.95). `Custom` starts from zero fractions.
    pub fn preset(name: PolicyName) -> Self {
        let (frac_mlp, frac_attn) = match name {
            PolicyName::Conservative => (0.40, 0.40),
            PolicyName::Balanced => (0.50, 0.60),
            PolicyName::Aggressive => (0.60, 0.95),
            PolicyName::Custom => (0.0, 0.0),
        };
        Self {
            name,
            frac_mlp,
            frac_attn,
            t: DEFAULT_T,
            mode: SelectionMode::Combined,
            seed: 0,
            restore_end: RestoreEnd::Top,
        }
    }

    pub fn custom(frac_mlp: f64, frac_attn: f64, t: f64) -> Self {
        Self {
            frac_mlp,
            frac_attn,
            t,
            ..Self::preset(PolicyName::Custom)
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        for (what, value) in [
            ("frac_mlp", self.frac_mlp),
            ("frac_attn", self.frac_attn),
            ("t", self.t),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(PlanError::OutOfRange { what, value });
            }
        }
        Ok(())
    }

    fn fraction_for(&self, group: MacroGroup) -> f64 {
        match group {
            MacroGroup::Mlp => self.frac_mlp,
            MacroGroup::Attention => self.frac_attn,
            MacroGroup::Other => 0.0,
        }
    }
}

/// Number of tensors restored from a group of `group_size`: `floor(f·G + 0.5)`.
pub fn selection_count(frac: f64, group_size: usize) -> usize {
    ((frac * group_size as f64 + 0.5).floor() as usize).min(group_size)
}

/// Metrics and fused score of one aligned tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub locator: ParamLocator,
    pub metrics: RawMetrics,
    pub fused: f64,
}

/// Sort descending by score; ties by ascending layer, then name. Returns
/// `(locator, score, rank)` with ranks `1..=G`.
pub fn rank_group(rows: &[(ParamLocator, f64)]) -> Vec<(ParamLocator, f64, usize)> {
    let mut sorted: Vec<&(ParamLocator, f64)> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| a.0.order_key().cmp(&b.0.order_key()))
    });
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, (loc, s))| (loc.clone(), *s, i + 1))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub name: String,
    pub layer: Option<usize>,
    pub component: ComponentKind,
    pub fused_score: f64,
    /// Score the selection mode ranked by (equals `fused_score` in combined mode).
    pub selection_score: f64,
    pub rank_in_group: usize,
    pub restore: bool,
    /// Interpolation coefficient toward the base; 0 for entries not restored.
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub entries: Vec<PlanEntry>,
    pub policy: Policy,
    pub config_digest: String,
}

#[derive(Serialize)]
struct DigestView<'a> {
    entries: &'a [PlanEntry],
    policy: &'a Policy,
}

/// SHA-256 over the canonical JSON of `(entries, policy)`.
pub fn plan_digest(plan: &MergePlan) -> String {
    digest_of(&plan.entries, &plan.policy)
}

fn digest_of(entries: &[PlanEntry], policy: &Policy) -> String {
    let text = canonical::to_canonical_json(&DigestView { entries, policy })
        .expect("plan serializes");
    canonical::sha256_hex(text.as_bytes())
}

impl MergePlan {
    pub fn restored(&self) -> impl Iterator<Item = &PlanEntry> {
        self.entries.iter().filter(|e| e.restore)
    }

    pub fn restored_names(&self) -> Vec<&str> {
        self.restored().map(|e| e.name.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        canonical::to_canonical_json(self).expect("plan serializes")
    }

    /// Parse a plan and check that its recorded digest matches its content.
    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let plan: MergePlan =
            serde_json::from_str(text).map_err(|e| PlanError::Json(e.to_string()))?;
        plan.policy.validate()?;
        for e in &plan.entries {
            if !(0.0..=1.0).contains(&e.t) {
                return Err(PlanError::OutOfRange { what: "t", value: e.t });
            }
        }
        let computed = plan_digest(&plan);
        if computed != plan.config_digest {
            return Err(PlanError::DigestMismatch {
                recorded: plan.config_digest,
                computed,
            });
        }
        Ok(plan)
    }
}

fn mode_scores(rows: &[ScoredRow], mode: SelectionMode) -> Vec<f64> {
    let groups: Vec<ComponentKind> = rows.iter().map(|r| r.locator.component).collect();
    let pick = |f: fn(&RawMetrics) -> f64| {
        let raw: Vec<f64> = rows.iter().map(|r| f(&r.metrics)).collect();
        normalize_by_group(&groups, &raw)
    };
    match mode {
        SelectionMode::Combined | SelectionMode::Random => rows.iter().map(|r| r.fused).collect(),
        SelectionMode::SwciOnly => pick(|m| m.swci),
        SelectionMode::SvdrOnly => pick(|m| m.svdr),
        SelectionMode::SnrOnly => pick(|m| m.snr),
    }
}

/// Rank every component group and mark the restored set per `policy`.
pub fn build_plan(rows: &[ScoredRow], policy: &Policy) -> Result<MergePlan, PlanError> {
    policy.validate()?;
    if !rows
        .iter()
        .any(|r| r.locator.component.macro_group() != MacroGroup::Other)
    {
        return Err(PlanError::NothingRestorable);
    }
    let t = canonical::round_sig(policy.t);
    let policy = Policy { t, ..policy.clone() };
    let scores = mode_scores(rows, policy.mode);

    let mut groups: BTreeMap<ComponentKind, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry(r.locator.component).or_default().push(i);
    }

    let mut entries = Vec::with_capacity(rows.len());
    for (kind, members) in groups {
        let order: Vec<usize> = match policy.mode {
            SelectionMode::Random => {
                let mut idx = members.clone();
                idx.sort_by(|&a, &b| rows[a].locator.order_key().cmp(&rows[b].locator.order_key()));
                let mut r = rng::stream(policy.seed, &format!("random-select/{kind}"));
                idx.shuffle(&mut r);
                idx
            }
            _ => {
                let sign = match policy.restore_end {
                    RestoreEnd::Top => 1.0,
                    RestoreEnd::Bottom => -1.0,
                };
                let keyed: Vec<(ParamLocator, f64)> = members
                    .iter()
                    .map(|&i| (rows[i].locator.clone(), sign * scores[i]))
                    .collect();
                let by_name: BTreeMap<&str, usize> = members
                    .iter()
                    .map(|&i| (rows[i].locator.name.as_str(), i))
                    .collect();
                rank_group(&keyed)
                    .into_iter()
                    .map(|(loc, _, _)| by_name[loc.name.as_str()])
                    .collect()
            }
        };
        let n = selection_count(policy.fraction_for(kind.macro_group()), order.len());
        for (pos, &i) in order.iter().enumerate() {
            let restore = pos < n;
            let row = &rows[i];
            entries.push(PlanEntry {
                name: row.locator.name.clone(),
                layer: row.locator.layer,
                component: kind,
                fused_score: row.fused,
                selection_score: scores[i],
                rank_in_group: pos + 1,
                restore,
                t: if restore { t } else { 0.0 },
            });
        }
    }
    entries.sort_by(|a, b| {
        (a.component, a.layer, &a.name).cmp(&(b.component, b.layer, &b.name))
    });
    let config_digest = digest_of(&entries, &policy);
    Ok(MergePlan {
        entries,
        policy,
        config_digest,
    })
}
