//! Tensor-name parsing into (layer, component) locators.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ArchError {
    #[error("invalid pattern {pattern:?}: {source}")]
    Pattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("pattern {0:?} has more than one capture group")]
    TooManyGroups(String),
    #[error("unknown component kind {0:?}")]
    UnknownComponent(String),
    #[error("cannot read profile {path}: {reason}")]
    ProfileFile { path: String, reason: String },
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    QProj,
    KProj,
    VProj,
    OProj,
    MlpGate,
    MlpUp,
    MlpDown,
    Embedding,
    Norm,
    Head,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroGroup {
    Attention,
    Mlp,
    Other,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 11] = [
        ComponentKind::QProj,
        ComponentKind::KProj,
        ComponentKind::VProj,
        ComponentKind::OProj,
        ComponentKind::MlpGate,
        ComponentKind::MlpUp,
        ComponentKind::MlpDown,
        ComponentKind::Embedding,
        ComponentKind::Norm,
        ComponentKind::Head,
        ComponentKind::Other,
    ];

    /// The seven per-layer projection kinds.
    pub const LAYERED: [ComponentKind; 7] = [
        ComponentKind::QProj,
        ComponentKind::KProj,
        ComponentKind::VProj,
        ComponentKind::OProj,
        ComponentKind::MlpGate,
        ComponentKind::MlpUp,
        ComponentKind::MlpDown,
    ];

    pub fn macro_group(self) -> MacroGroup {
        use ComponentKind::*;
        match self {
            QProj | KProj | VProj | OProj => MacroGroup::Attention,
            MlpGate | MlpUp | MlpDown => MacroGroup::Mlp,
            Embedding | Norm | Head | Other => MacroGroup::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        use ComponentKind::*;
        match self {
            QProj => "q_proj",
            KProj => "k_proj",
            VProj => "v_proj",
            OProj => "o_proj",
            MlpGate => "mlp_gate",
            MlpUp => "mlp_up",
            MlpDown => "mlp_down",
            Embedding => "embedding",
            Norm => "norm",
            Head => "head",
            Other => "other",
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentKind {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ComponentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ArchError::UnknownComponent(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamLocator {
    pub name: String,
    pub layer: Option<usize>,
    pub component: ComponentKind,
}

impl ParamLocator {
    /// Sort key inside a component group.
    pub fn order_key(&self) -> (Option<usize>, &str) {
        (self.layer, &self.name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub pattern: String,
    pub component: String,
}

#[derive(Debug, Clone)]
struct Rule {
    regex: Regex,
    component: ComponentKind,
}

/// Ordered name patterns; the first match wins and unmatched names fall back
/// to [`ComponentKind::Other`].
#[derive(Debug, Clone)]
pub struct ArchProfile {
    rules: Vec<Rule>,
}

const LLAMA_RULES: &[(&str, &str)] = &[
    (r"model\.layers\.(\d+)\.self_attn\.q_proj\.weight", "q_proj"),
    (r"model\.layers\.(\d+)\.self_attn\.k_proj\.weight", "k_proj"),
    (r"model\.layers\.(\d+)\.self_attn\.v_proj\.weight", "v_proj"),
    (r"model\.layers\.(\d+)\.self_attn\.o_proj\.weight", "o_proj"),
    (r"model\.layers\.(\d+)\.mlp\.gate_proj\.weight", "mlp_gate"),
    (r"model\.layers\.(\d+)\.mlp\.up_proj\.weight", "mlp_up"),
    (r"model\.layers\.(\d+)\.mlp\.down_proj\.weight", "mlp_down"),
    (r"model\.layers\.(\d+)\.[A-Za-z_]*norm\.weight", "norm"),
    (r"model\.embed_tokens\.weight", "embedding"),
    (r"model\.norm\.weight", "norm"),
    (r"lm_head\.weight", "head"),
];

impl ArchProfile {
    pub fn new(entries: &[ProfileEntry]) -> Result<Self, ArchError> {
        let rules = entries
            .iter()
            .map(|e| {
                let anchored = format!("^(?:{})$", e.pattern);
                let regex = Regex::new(&anchored).map_err(|source| ArchError::Pattern {
                    pattern: e.pattern.clone(),
                    source,
                })?;
                // captures_len counts the implicit whole-match group.
                if regex.captures_len() > 2 {
                    return Err(ArchError::TooManyGroups(e.pattern.clone()));
                }
                Ok(Rule {
                    regex,
                    component: e.component.parse()?,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rules })
    }

    /// Built-in profile for LLaMA-style checkpoint names.
    pub fn llama() -> Self {
        let entries: Vec<ProfileEntry> = LLAMA_RULES
            .iter()
            .map(|(p, c)| ProfileEntry {
                pattern: p.to_string(),
                component: c.to_string(),
            })
            .collect();
        Self::new(&entries).expect("built-in profile is valid")
    }

    /// Load a JSON array of `{"pattern", "component"}` objects.
    pub fn from_json(text: &str) -> Result<Self, ArchError> {
        let entries: Vec<ProfileEntry> =
            serde_json::from_str(text).map_err(|e| ArchError::ProfileFile {
                path: "<inline>".into(),
                reason: e.to_string(),
            })?;
        Self::new(&entries)
    }

    pub fn from_file(path: &Path) -> Result<Self, ArchError> {
        let text = std::fs::read_to_string(path).map_err(|e| ArchError::ProfileFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            ArchError::ProfileFile { reason, .. } => ArchError::ProfileFile {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn classify(&self, name: &str) -> ParamLocator {
        for rule in &self.rules {
            let Some(caps) = rule.regex.captures(name) else {
                continue;
            };
            let layer = match caps.get(1) {
                Some(m) => match m.as_str().parse::<usize>() {
                    Ok(layer) => Some(layer),
                    // A layer group that is not a decimal index disqualifies the rule.
                    Err(_) => continue,
                },
                None => None,
            };
            return ParamLocator {
                name: name.to_string(),
                layer,
                component: rule.component,
            };
        }
        ParamLocator {
            name: name.to_string(),
            layer: None,
            component: ComponentKind::Other,
        }
    }
}

impl Default for ArchProfile {
    fn default() -> Self {
        Self::llama()
    }
}

/// Partition locators by component; each list is ordered by (layer, name).
pub fn group_by_component(
    locators: impl IntoIterator<Item = ParamLocator>,
) -> BTreeMap<ComponentKind, Vec<ParamLocator>> {
    let mut groups: BTreeMap<ComponentKind, Vec<ParamLocator>> = BTreeMap::new();
    for loc in locators {
        groups.entry(loc.component).or_default().push(loc);
    }
    for list in groups.values_mut() {
        list.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn llama_names(layers: usize) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..layers {
            for p in ["q_proj", "k_proj", "v_proj", "o_proj"] {
                names.push(format!("model.layers.{l}.self_attn.{p}.weight"));
            }
            for p in ["gate_proj", "up_proj", "down_proj"] {
                names.push(format!("model.layers.{l}.mlp.{p}.weight"));
            }
        }
        names
    }

    #[test]
    fn classifies_llama_names() {
        let p = ArchProfile::llama();
        let v = p.classify("model.layers.17.self_attn.v_proj.weight");
        assert_eq!((v.layer, v.component), (Some(17), ComponentKind::VProj));
        let e = p.classify("model.embed_tokens.weight");
        assert_eq!((e.layer, e.component), (None, ComponentKind::Embedding));
        let u = p.classify("totally.unknown.tensor");
        assert_eq!((u.layer, u.component), (None, ComponentKind::Other));
        let n = p.classify("model.layers.3.post_attention_layernorm.weight");
        assert_eq!((n.layer, n.component), (Some(3), ComponentKind::Norm));
        assert_eq!(p.classify("lm_head.weight").component, ComponentKind::Head);
        assert_eq!(
            p.classify("model.layers.2.mlp.down_proj.weight").component,
            ComponentKind::MlpDown
        );
        // Anchoring: a suffix or prefix does not match.
        assert_eq!(
            p.classify("x.model.layers.2.mlp.down_proj.weight").component,
            ComponentKind::Other
        );
    }

    #[test]
    fn custom_profile_first_match_wins() {
        let p = ArchProfile::from_json(
            r#"[{"pattern": "h\\.(\\d+)\\.attn\\.c_attn\\.weight", "component": "q_proj"},
                {"pattern": "h\\.(\\d+)\\..*", "component": "mlp_up"}]"#,
        )
        .unwrap();
        assert_eq!(p.classify("h.4.attn.c_attn.weight").component, ComponentKind::QProj);
        let up = p.classify("h.4.mlp.c_fc.weight");
        assert_eq!((up.layer, up.component), (Some(4), ComponentKind::MlpUp));
    }

    #[test]
    fn bad_profiles_are_rejected() {
        assert!(matches!(
            ArchProfile::from_json(r#"[{"pattern": "(a", "component": "q_proj"}]"#),
            Err(ArchError::Pattern { .. })
        ));
        assert!(matches!(
            ArchProfile::from_json(r#"[{"pattern": "a", "component": "ffn"}]"#),
            Err(ArchError::UnknownComponent(_))
        ));
        assert!(matches!(
            ArchProfile::from_json(r#"[{"pattern": "(\\d)(\\d)", "component": "q_proj"}]"#),
            Err(ArchError::TooManyGroups(_))
        ));
    }

    #[test]
    fn thirty_two_layers_make_seven_groups() {
        let p = ArchProfile::llama();
        let groups = group_by_component(llama_names(32).iter().map(|n| p.classify(n)));
        assert_eq!(groups.len(), 7);
        for (kind, list) in &groups {
            assert_eq!(list.len(), 32, "{kind}");
            let layers: Vec<usize> = list.iter().map(|l| l.layer.unwrap()).collect();
            assert_eq!(layers, (0..32).collect::<Vec<_>>());
        }
        assert!(group_by_component(Vec::new()).is_empty());
    }

    proptest! {
        #[test]
        fn grouping_partitions_and_ignores_order(
            perm in Just((0..5 * 7).collect::<Vec<usize>>()).prop_shuffle()
        ) {
            let p = ArchProfile::llama();
            let names = llama_names(5);
            let ordered = group_by_component(names.iter().map(|n| p.classify(n)));
            let shuffled = group_by_component(perm.iter().map(|&i| p.classify(&names[i])));
            prop_assert_eq!(&ordered, &shuffled);
            let total: usize = ordered.values().map(Vec::len).sum();
            prop_assert_eq!(total, names.len());
        }
    }
}
