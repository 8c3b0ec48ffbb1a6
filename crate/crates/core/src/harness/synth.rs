//! Seeded LLaMA-shaped checkpoint pairs for tests and demos.
//!
//! Base tensors are `N(0, 1/hidden)`. Targeted tensors in the adapted copy get
//! `lowrank_scale · U Vᵀ + noise_scale · N(0, 1)`, where `U` and `V` have
//! `lowrank_rank` columns of roughly unit norm.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::archmap::{ArchProfile, ComponentKind};
use crate::checkpoint::{Checkpoint, DType, TensorRecord};
use crate::rng;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub lowrank_rank: usize,
    pub lowrank_scale: f64,
    pub noise_scale: f64,
    /// Empty means the seven per-layer projection kinds.
    pub target_components: Vec<ComponentKind>,
    /// Empty means every layer. Tensors without a layer match on component alone.
    pub target_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub layers: usize,
    pub hidden: usize,
    pub seed: u64,
    pub perturbation: Perturbation,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            layers: 8,
            hidden: 64,
            seed: 0,
            perturbation: Perturbation {
                lowrank_rank: 4,
                lowrank_scale: 1.0,
                noise_scale: 0.0,
                target_components: Vec::new(),
                target_layers: Vec::new(),
            },
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidSynth(m));
        let p = &self.perturbation;
        if self.layers == 0 || self.hidden == 0 {
            return bad("layers and hidden must be positive".into());
        }
        if p.lowrank_rank == 0 || p.lowrank_rank > self.hidden {
            return bad(format!("need 1 <= lowrank_rank <= hidden, got {}", p.lowrank_rank));
        }
        if !p.lowrank_scale.is_finite() || !(p.noise_scale.is_finite() && p.noise_scale >= 0.0) {
            return bad("scales must be finite and noise_scale non-negative".into());
        }
        if let Some(l) = p.target_layers.iter().find(|&&l| l >= self.layers) {
            return bad(format!("target layer {l} out of range for {} layers", self.layers));
        }
        Ok(())
    }

    /// Tensor names and shapes in LLaMA layout; intermediate and vocabulary
    /// sizes are both `2·hidden`.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (h, wide) = (self.hidden, 2 * self.hidden);
        let mut out = vec![("model.embed_tokens.weight".to_string(), vec![wide, h])];
        for l in 0..self.layers {
            let p = format!("model.layers.{l}");
            for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
                out.push((format!("{p}.self_attn.{proj}.weight"), vec![h, h]));
            }
            out.push((format!("{p}.mlp.gate_proj.weight"), vec![wide, h]));
            out.push((format!("{p}.mlp.up_proj.weight"), vec![wide, h]));
            out.push((format!("{p}.mlp.down_proj.weight"), vec![h, wide]));
            out.push((format!("{p}.input_layernorm.weight"), vec![h]));
            out.push((format!("{p}.post_attention_layernorm.weight"), vec![h]));
        }
        out.push(("model.norm.weight".to_string(), vec![h]));
        out.push(("lm_head.weight".to_string(), vec![wide, h]));
        out
    }

    fn targets(&self, kind: ComponentKind, layer: Option<usize>) -> bool {
        let p = &self.perturbation;
        let kind_ok = if p.target_components.is_empty() {
            ComponentKind::LAYERED.contains(&kind)
        } else {
            p.target_components.contains(&kind)
        };
        let layer_ok = match layer {
            Some(l) => p.target_layers.is_empty() || p.target_layers.contains(&l),
            None => true,
        };
        kind_ok && layer_ok
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, seed: u64, label: &str) -> DMatrix<f64> {
    let mut r = rng::stream(seed, label);
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut r);
        std * z
    })
}

fn record(name: &str, shape: &[usize], m: &DMatrix<f64>) -> TensorRecord {
    // Row-major flattening to match the on-disk layout.
    let data = m.transpose().iter().map(|&v| v as f32).collect();
    TensorRecord::new(name, shape.to_vec(), DType::F32, data).expect("layout shapes are valid")
}

/// Build `(base, adapted)`.
pub fn synthesize(spec: &SynthSpec) -> Result<(Checkpoint, Checkpoint)> {
    spec.validate()?;
    let profile = ArchProfile::llama();
    let p = &spec.perturbation;
    let mut base = Checkpoint::new();
    let mut adapted = Checkpoint::new();
    for (name, shape) in spec.layout() {
        let (rows, cols) = match shape[..] {
            [r, c] => (r, c),
            _ => (1, shape.iter().product()),
        };
        let w0 = gaussian(rows, cols, (1.0 / spec.hidden as f64).sqrt(), spec.seed, &format!("synth/base/{name}"));
        let w0 = w0.map(|v| v as f32 as f64);
        let loc = profile.classify(&name);
        let mut w1 = w0.clone();
        if spec.targets(loc.component, loc.layer) {
            if p.lowrank_scale != 0.0 {
                let k = p.lowrank_rank.min(rows).min(cols);
                let u = gaussian(rows, k, 1.0 / (rows as f64).sqrt(), spec.seed, &format!("synth/u/{name}"));
                let v = gaussian(cols, k, 1.0 / (cols as f64).sqrt(), spec.seed, &format!("synth/v/{name}"));
                w1 += p.lowrank_scale * u * v.transpose();
            }
            if p.noise_scale != 0.0 {
                w1 += gaussian(rows, cols, p.noise_scale, spec.seed, &format!("synth/noise/{name}"));
            }
        }
        base.insert(record(&name, &shape, &w0))?;
        adapted.insert(record(&name, &shape, &w1))?;
    }
    Ok((base, adapted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{to_bytes, DtypePolicy};

    #[test]
    fn zero_perturbation_is_identity() {
        let mut spec = SynthSpec::default();
        spec.perturbation.lowrank_scale = 0.0;
        let (b, a) = synthesize(&spec).unwrap();
        assert_eq!(b, a);
    }

    #[test]
    fn deterministic_bytes() {
        let spec = SynthSpec { seed: 11, ..SynthSpec::default() };
        let (b1, a1) = synthesize(&spec).unwrap();
        let (b2, a2) = synthesize(&spec).unwrap();
        assert_eq!(to_bytes(&b1, DtypePolicy::Preserve).unwrap(), to_bytes(&b2, DtypePolicy::Preserve).unwrap());
        assert_eq!(to_bytes(&a1, DtypePolicy::Preserve).unwrap(), to_bytes(&a2, DtypePolicy::Preserve).unwrap());
        let (b3, _) = synthesize(&SynthSpec { seed: 12, ..SynthSpec::default() }).unwrap();
        assert_ne!(b1, b3);
    }

    #[test]
    fn only_targets_change() {
        let mut spec = SynthSpec::default();
        spec.perturbation.target_components = vec![ComponentKind::MlpGate];
        spec.perturbation.target_layers = vec![3];
        spec.perturbation.noise_scale = 0.01;
        let (b, a) = synthesize(&spec).unwrap();
        assert_eq!(b.len(), 1 + 8 * 9 + 2);
        let changed: Vec<&str> = b
            .iter()
            .filter(|t| a.get(&t.name).unwrap().data != t.data)
            .map(|t| t.name.as_str())
            .collect();
        assert_eq!(changed, vec!["model.layers.3.mlp.gate_proj.weight"]);
    }

    #[test]
    fn base_variance_matches_hidden() {
        let (b, _) = synthesize(&SynthSpec::default()).unwrap();
        let t = b.get("lm_head.weight").unwrap();
        let var = t.data.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / t.numel() as f64;
        assert!((var * 64.0 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn invalid_specs() {
        let mut s = SynthSpec::default();
        s.perturbation.lowrank_rank = 65;
        assert!(s.validate().is_err());
        s.perturbation.lowrank_rank = 0;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.perturbation.target_layers = vec![8];
        assert!(s.validate().is_err());
    }
}
