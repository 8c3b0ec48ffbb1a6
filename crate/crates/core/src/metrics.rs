//! Per-tensor adaptation metrics and their group-normalized fusion.
//!
//! * SWCI: relative Frobenius displacement `‖w_prop − w_0‖ / (‖w_0‖ + ε)`,
//!   capped, times the spectral SNR.
//! * SVDR: relative drop of the top-k singular value mass from base to adapted.
//! * Fused score: `α·norm(SWCI) + β·norm(SVDR)`, where `norm` is min-max over
//!   the tensor's component group (constant groups map to 0.5).

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::archmap::{ComponentKind, ParamLocator};
use crate::spectral::{self, SpectralError, Spectrum, EPSILON};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: base {base:?} vs adapted {adapted:?}")]
    ShapeMismatch {
        base: (usize, usize),
        adapted: (usize, usize),
    },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("invalid metric config: {0}")]
    InvalidConfig(String),
    #[error("no rows to fuse")]
    Empty,
}

/// Which checkpoint's weights feed the SNR factor of SWCI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SnrSource {
    #[default]
    Adapted,
    Base,
    /// Arithmetic mean of the base and adapted SNR.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub k_top: usize,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub relative_change_cap: f64,
    pub snr_source: SnrSource,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            k_top: 16,
            alpha: 0.5,
            beta: 0.5,
            epsilon: EPSILON,
            relative_change_cap: 1e3,
            snr_source: SnrSource::Adapted,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        let bad = |m: String| Err(MetricError::InvalidConfig(m));
        if self.k_top == 0 {
            return bad("k_top must be at least 1".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.alpha + self.beta <= 0.0 {
            return bad("alpha + beta must be positive".into());
        }
        if self.relative_change_cap.is_nan() || self.relative_change_cap <= 0.0 {
            return bad("relative_change_cap must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawMetrics {
    pub swci: f64,
    pub svdr: f64,
    pub snr: f64,
    pub rel_change: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Swci {
    pub swci: f64,
    pub rel_change: f64,
    pub snr: f64,
}

fn check_shapes(w0: &DMatrix<f64>, wprop: &DMatrix<f64>) -> Result<(), MetricError> {
    if w0.shape() != wprop.shape() {
        return Err(MetricError::ShapeMismatch {
            base: w0.shape(),
            adapted: wprop.shape(),
        });
    }
    Ok(())
}

fn relative_change(w0: &DMatrix<f64>, wprop: &DMatrix<f64>, cfg: &MetricConfig) -> f64 {
    let diff = (wprop - w0).norm();
    (diff / (w0.norm() + cfg.epsilon)).min(cfg.relative_change_cap)
}

fn pick_snr(base: &Spectrum, adapted: &Spectrum, source: SnrSource) -> f64 {
    match source {
        SnrSource::Adapted => spectral::snr_from_spectrum(adapted).snr,
        SnrSource::Base => spectral::snr_from_spectrum(base).snr,
        SnrSource::Mean => {
            0.5 * (spectral::snr_from_spectrum(base).snr + spectral::snr_from_spectrum(adapted).snr)
        }
    }
}

fn svdr_from_spectra(base: &Spectrum, adapted: &Spectrum, cfg: &MetricConfig) -> f64 {
    let k = cfg.k_top.min(base.singular_values.len());
    let top0: f64 = base.singular_values[..k].iter().sum();
    let top1: f64 = adapted.singular_values[..k].iter().sum();
    (top0 - top1) / (top0 + cfg.epsilon)
}

pub fn compute_swci(
    w0: &DMatrix<f64>,
    wprop: &DMatrix<f64>,
    cfg: &MetricConfig,
) -> Result<Swci, MetricError> {
    check_shapes(w0, wprop)?;
    let base = spectral::singular_values(w0)?;
    let adapted = spectral::singular_values(wprop)?;
    let rel_change = relative_change(w0, wprop, cfg);
    let snr = pick_snr(&base, &adapted, cfg.snr_source);
    Ok(Swci {
        swci: rel_change * snr,
        rel_change,
        snr,
    })
}

pub fn compute_svdr(
    w0: &DMatrix<f64>,
    wprop: &DMatrix<f64>,
    cfg: &MetricConfig,
) -> Result<f64, MetricError> {
    check_shapes(w0, wprop)?;
    let base = spectral::singular_values(w0)?;
    let adapted = spectral::singular_values(wprop)?;
    Ok(svdr_from_spectra(&base, &adapted, cfg))
}

/// SWCI, SVDR and SNR for one aligned pair, decomposing each matrix once.
pub fn compute_metrics(
    w0: &DMatrix<f64>,
    wprop: &DMatrix<f64>,
    cfg: &MetricConfig,
) -> Result<RawMetrics, MetricError> {
    check_shapes(w0, wprop)?;
    let base = spectral::singular_values(w0)?;
    let adapted = spectral::singular_values(wprop)?;
    let rel_change = relative_change(w0, wprop, cfg);
    let snr = pick_snr(&base, &adapted, cfg.snr_source);
    Ok(RawMetrics {
        swci: rel_change * snr,
        svdr: svdr_from_spectra(&base, &adapted, cfg),
        snr,
        rel_change,
    })
}

/// Min-max normalize `values` within each component group. Output is aligned
/// with the input; a group whose values are all equal maps to 0.5.
pub fn normalize_by_group(groups: &[ComponentKind], values: &[f64]) -> Vec<f64> {
    assert_eq!(groups.len(), values.len());
    let mut ranges: BTreeMap<ComponentKind, (f64, f64)> = BTreeMap::new();
    for (&g, &v) in groups.iter().zip(values) {
        let r = ranges.entry(g).or_insert((v, v));
        r.0 = r.0.min(v);
        r.1 = r.1.max(v);
    }
    groups
        .iter()
        .zip(values)
        .map(|(g, &v)| {
            let (lo, hi) = ranges[g];
            if hi > lo {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.5
            }
        })
        .collect()
}

/// Fused score per row, in input order.
pub fn fuse_scores(
    rows: &[(ParamLocator, RawMetrics)],
    cfg: &MetricConfig,
) -> Result<Vec<(ParamLocator, f64)>, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::Empty);
    }
    let groups: Vec<ComponentKind> = rows.iter().map(|(l, _)| l.component).collect();
    let swci: Vec<f64> = rows.iter().map(|(_, m)| m.swci).collect();
    let svdr: Vec<f64> = rows.iter().map(|(_, m)| m.svdr).collect();
    let swci_n = normalize_by_group(&groups, &swci);
    let svdr_n = normalize_by_group(&groups, &svdr);
    Ok(rows
        .iter()
        .zip(swci_n.iter().zip(&svdr_n))
        .map(|((loc, _), (s, v))| (loc.clone(), cfg.alpha * s + cfg.beta * v))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, "metrics-test");
        DMatrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut r);
            z
        })
    }

    fn loc(component: ComponentKind, layer: usize) -> ParamLocator {
        ParamLocator {
            name: format!("{component}.{layer}"),
            layer: Some(layer),
            component,
        }
    }

    fn raw(swci: f64, svdr: f64) -> RawMetrics {
        RawMetrics {
            swci,
            svdr,
            snr: 0.0,
            rel_change: 0.0,
        }
    }

    #[test]
    fn identical_weights_score_zero() {
        let w = gaussian(12, 9, 1);
        let cfg = MetricConfig::default();
        assert_eq!(compute_swci(&w, &w, &cfg).unwrap().swci, 0.0);
        assert_eq!(compute_svdr(&w, &w, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn doubling_gives_unit_change() {
        let w = gaussian(10, 10, 2);
        let w2 = &w * 2.0;
        let cfg = MetricConfig::default();
        let s = compute_swci(&w, &w2, &cfg).unwrap();
        // The epsilon in the denominator shifts the ratio by about 1e-8 / ‖w‖.
        assert!((s.rel_change - 1.0).abs() < 1e-8);
        let snr = spectral::estimate_snr(&w2).unwrap().snr;
        assert!((s.swci - snr).abs() <= 1e-9 * snr.max(1.0));
        assert!((compute_svdr(&w, &w2, &cfg).unwrap() + 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_base_hits_the_cap() {
        let w0 = DMatrix::zeros(6, 6);
        let mut wprop = DMatrix::zeros(6, 6);
        wprop[(0, 0)] = 5.0;
        wprop[(1, 1)] = 0.01;
        let cfg = MetricConfig::default();
        let s = compute_swci(&w0, &wprop, &cfg).unwrap();
        assert_eq!(s.rel_change, 1e3);
        assert_eq!(s.swci, 1e3 * s.snr);
        assert!(s.snr > 0.0);
    }

    #[test]
    fn halving_a_diagonal() {
        let w0 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 3.0, 2.0, 1.0]));
        let cfg = MetricConfig::default();
        let svdr = compute_svdr(&w0, &(&w0 * 0.5), &cfg).unwrap();
        assert!((svdr - 0.5).abs() < 1e-6);
        let cfg2 = MetricConfig { k_top: 2, ..cfg };
        // top-2: (4 + 3 - 2 - 1.5) / 7
        let svdr2 = compute_svdr(&w0, &(&w0 * 0.5), &cfg2).unwrap();
        assert!((svdr2 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = MetricConfig::default();
        assert!(matches!(
            compute_svdr(&DMatrix::zeros(2, 3), &DMatrix::zeros(3, 2), &cfg),
            Err(MetricError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn snr_sources_differ() {
        let w0 = gaussian(32, 32, 5);
        let mut spike = DMatrix::zeros(32, 32);
        spike[(0, 0)] = 60.0;
        let wprop = &w0 + spike;
        let mk = |snr_source| MetricConfig {
            snr_source,
            ..MetricConfig::default()
        };
        let a = compute_swci(&w0, &wprop, &mk(SnrSource::Adapted)).unwrap().snr;
        let b = compute_swci(&w0, &wprop, &mk(SnrSource::Base)).unwrap().snr;
        let m = compute_swci(&w0, &wprop, &mk(SnrSource::Mean)).unwrap().snr;
        assert!(a > b);
        assert!((m - 0.5 * (a + b)).abs() < 1e-12);
    }

    #[test]
    fn fusion_degenerate_and_endpoints() {
        let cfg = MetricConfig {
            alpha: 0.3,
            beta: 0.6,
            ..MetricConfig::default()
        };
        let single = fuse_scores(&[(loc(ComponentKind::QProj, 0), raw(3.0, 0.2))], &cfg).unwrap();
        assert!((single[0].1 - 0.45).abs() < 1e-12);

        let cfg = MetricConfig::default();
        let rows = vec![
            (loc(ComponentKind::MlpUp, 0), raw(10.0, 1.0)),
            (loc(ComponentKind::MlpUp, 1), raw(0.0, 0.0)),
            (loc(ComponentKind::QProj, 0), raw(100.0, -5.0)),
        ];
        let fused = fuse_scores(&rows, &cfg).unwrap();
        assert_eq!(fused[0].1, 1.0);
        assert_eq!(fused[1].1, 0.0);
        assert_eq!(fused[2].1, 0.5);
        assert!(matches!(fuse_scores(&[], &cfg), Err(MetricError::Empty)));
    }

    #[test]
    fn alpha_only_follows_swci_order() {
        let cfg = MetricConfig {
            alpha: 1.0,
            beta: 0.0,
            ..MetricConfig::default()
        };
        let rows = vec![
            (loc(ComponentKind::VProj, 0), raw(2.5, 0.9)),
            (loc(ComponentKind::VProj, 1), raw(7.0, -0.3)),
            (loc(ComponentKind::VProj, 2), raw(0.4, 0.1)),
        ];
        let fused = fuse_scores(&rows, &cfg).unwrap();
        let mut by_fused: Vec<usize> = (0..3).collect();
        by_fused.sort_by(|&a, &b| fused[b].1.total_cmp(&fused[a].1));
        let mut by_swci: Vec<usize> = (0..3).collect();
        by_swci.sort_by(|&a, &b| rows[b].1.swci.total_cmp(&rows[a].1.swci));
        assert_eq!(by_fused, by_swci);
    }

    #[test]
    fn config_validation() {
        assert!(MetricConfig::default().validate().is_ok());
        for cfg in [
            MetricConfig { k_top: 0, ..Default::default() },
            MetricConfig { alpha: 0.0, beta: 0.0, ..Default::default() },
            MetricConfig { alpha: 1.5, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn fused_scores_stay_in_range(
            vals in proptest::collection::vec((-1e3f64..1e3, -5.0f64..1.0, 0usize..3), 1..20),
            alpha in 0.0f64..1.0,
            beta in 0.0f64..1.0,
        ) {
            prop_assume!(alpha + beta > 0.0);
            let kinds = [ComponentKind::QProj, ComponentKind::MlpGate, ComponentKind::Norm];
            let rows: Vec<_> = vals
                .iter()
                .enumerate()
                .map(|(i, &(s, v, g))| (loc(kinds[g], i), raw(s.abs(), v)))
                .collect();
            let cfg = MetricConfig { alpha, beta, ..Default::default() };
            for (_, f) in fuse_scores(&rows, &cfg).unwrap() {
                prop_assert!(f >= 0.0 && f <= alpha + beta + 1e-12);
            }
        }

        #[test]
        fn swci_scaling_keeps_ranking(
            vals in proptest::collection::btree_set(0u32..100_000, 2..12),
            scale in 0.01f64..100.0,
        ) {
            let cfg = MetricConfig::default();
            let mut r = rng::stream(vals.len() as u64, "svdr");
            let rows: Vec<_> = vals
                .iter()
                .enumerate()
                .map(|(i, &s)| (loc(ComponentKind::KProj, i), raw(s as f64, r.random_range(-1.0..1.0))))
                .collect();
            let scaled: Vec<_> = rows
                .iter()
                .map(|(l, m)| (l.clone(), RawMetrics { swci: m.swci * scale, ..*m }))
                .collect();
            let order = |f: Vec<(ParamLocator, f64)>| {
                let mut idx: Vec<usize> = (0..f.len()).collect();
                idx.sort_by(|&a, &b| f[b].1.total_cmp(&f[a].1).then(a.cmp(&b)));
                idx
            };
            let a = fuse_scores(&rows, &cfg).unwrap();
            let b = fuse_scores(&scaled, &cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.1 - y.1).abs() < 1e-9);
            }
            prop_assert_eq!(order(a), order(b));
        }

        #[test]
        fn svdr_never_exceeds_one(seed in 0u64..1000, scale in 0.0f64..3.0) {
            let w0 = gaussian(8, 6, seed);
            let wprop = &w0 * scale + gaussian(8, 6, seed + 1) * 0.3;
            let cfg = MetricConfig { k_top: 6, ..Default::default() };
            let svdr = compute_svdr(&w0, &wprop, &cfg).unwrap();
            prop_assert!(svdr <= 1.0);
            let s0: f64 = spectral::singular_values(&w0).unwrap().singular_values.iter().sum();
            let s1: f64 = spectral::singular_values(&wprop).unwrap().singular_values.iter().sum();
            prop_assert!(svdr >= 1.0 - s1 / s0 - 1e-9);
        }
    }
}
