//! Whole-tensor SLERP restoration driven by a [`MergePlan`].

use crate::checkpoint::Checkpoint;
use crate::planner::MergePlan;

pub const META_PLAN_DIGEST: &str = "spearmm.plan_digest";
pub const META_POLICY: &str = "spearmm.policy";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SlerpError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("vectors are antipodal (cosine {0}); interpolation path is undefined")]
    Antipodal(f64),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("t = {0} is outside [0, 1]")]
    InvalidT(f64),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MergeError {
    #[error("plan names tensor `{0}` missing from the {1} checkpoint")]
    MissingTensor(String, &'static str),
    #[error("tensor `{name}` has shape {base:?} in base but {adapted:?} in adapted")]
    ShapeMismatch {
        name: String,
        base: Vec<usize>,
        adapted: Vec<usize>,
    },
    #[error("tensor `{name}`: {source}")]
    Slerp {
        name: String,
        #[source]
        source: SlerpError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlerpParams {
    pub t: f64,
    pub parallel_threshold: f64,
    pub zero_norm_threshold: f64,
}

impl SlerpParams {
    pub fn new(t: f64) -> Self {
        Self {
            t,
            ..Self::default()
        }
    }
}

impl Default for SlerpParams {
    fn default() -> Self {
        Self {
            t: 0.5,
            parallel_threshold: 1e-7,
            zero_norm_threshold: 1e-12,
        }
    }
}

/// `(1 - t)·a + t·b`, accumulated in `f64`.
pub fn lerp(a: &[f32], b: &[f32], t: f64) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((1.0 - t) * x as f64 + t * y as f64) as f32)
        .collect()
}

/// Spherical interpolation from `a` (t = 0) to `b` (t = 1) over the flattened
/// vectors. Falls back to [`lerp`] when either norm is below
/// `zero_norm_threshold` or the vectors are within `parallel_threshold` of
/// parallel. Endpoints are returned verbatim.
pub fn slerp(a: &[f32], b: &[f32], p: &SlerpParams) -> Result<Vec<f32>, SlerpError> {
    if a.len() != b.len() {
        return Err(SlerpError::LengthMismatch(a.len(), b.len()));
    }
    if !(0.0..=1.0).contains(&p.t) {
        return Err(SlerpError::InvalidT(p.t));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(SlerpError::NonFinite);
    }
    if p.t == 0.0 {
        return Ok(a.to_vec());
    }
    if p.t == 1.0 {
        return Ok(b.to_vec());
    }

    let (mut dot, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < p.zero_norm_threshold || nb < p.zero_norm_threshold {
        return Ok(lerp(a, b, p.t));
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    if 1.0 - cos < p.parallel_threshold {
        return Ok(lerp(a, b, p.t));
    }
    if cos < -1.0 + p.parallel_threshold {
        return Err(SlerpError::Antipodal(cos));
    }
    let omega = cos.acos();
    let sin = omega.sin();
    let wa = ((1.0 - p.t) * omega).sin() / sin;
    let wb = (p.t * omega).sin() / sin;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (wa * x as f64 + wb * y as f64) as f32)
        .collect())
}

/// Build the merged checkpoint: restored entries become
/// `slerp(adapted, base, entry.t)`, everything else is copied from `adapted`.
pub fn apply_plan(
    base: &Checkpoint,
    adapted: &Checkpoint,
    plan: &MergePlan,
) -> Result<Checkpoint, MergeError> {
    let mut merged = adapted.clone();
    for entry in &plan.entries {
        let b = base
            .get(&entry.name)
            .ok_or_else(|| MergeError::MissingTensor(entry.name.clone(), "base"))?;
        let a = adapted
            .get(&entry.name)
            .ok_or_else(|| MergeError::MissingTensor(entry.name.clone(), "adapted"))?;
        if a.shape != b.shape {
            return Err(MergeError::ShapeMismatch {
                name: entry.name.clone(),
                base: b.shape.clone(),
                adapted: a.shape.clone(),
            });
        }
        if !entry.restore {
            continue;
        }
        let data = slerp(&a.data, &b.data, &SlerpParams::new(entry.t)).map_err(|source| {
            MergeError::Slerp {
                name: entry.name.clone(),
                source,
            }
        })?;
        merged
            .tensors
            .get_mut(&entry.name)
            .expect("adapted tensor present")
            .data = data;
    }
    merged
        .metadata
        .insert(META_PLAN_DIGEST.into(), plan.config_digest.clone());
    merged
        .metadata
        .insert(META_POLICY.into(), plan.policy.name.to_string());
    Ok(merged)
}
