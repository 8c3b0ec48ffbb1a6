//! Singular values and spectral signal-to-noise estimation.
//!
//! The noise model treats a weight matrix as low-rank signal plus i.i.d.
//! noise of unknown scale `s`. Under that model the squared singular values,
//! divided by `max(m, n) * s^2`, follow the Marchenko–Pastur law with aspect
//! ratio `min(m, n) / max(m, n)`, whose upper edge is `s * (sqrt(m) + sqrt(n))`.
//! The scale is read off the lower half of the spectrum, which low-rank signal
//! leaves untouched, by matching its mean to the partial mean of the law over
//! the same lower quantile range.

use nalgebra::DMatrix;

/// Shared denominator guard.
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpectralError {
    #[error("non-finite entry {value} at row {row}, col {col}")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("matrix has no entries ({rows}x{cols})")]
    Empty { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Non-increasing, non-negative; `min(rows, cols)` values.
    pub singular_values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrEstimate {
    pub snr: f64,
    /// Singular values at or below this are attributed to noise.
    pub noise_threshold: f64,
    /// Estimated per-entry noise standard deviation.
    pub noise_scale: f64,
    /// Sum of squared singular values above the threshold.
    pub signal_energy: f64,
    /// Sum of squared singular values at or below the threshold.
    pub noise_energy: f64,
}

fn check_finite(w: &DMatrix<f64>) -> Result<(), SpectralError> {
    if w.is_empty() {
        return Err(SpectralError::Empty {
            rows: w.nrows(),
            cols: w.ncols(),
        });
    }
    for col in 0..w.ncols() {
        for row in 0..w.nrows() {
            let value = w[(row, col)];
            if !value.is_finite() {
                return Err(SpectralError::NonFinite { row, col, value });
            }
        }
    }
    Ok(())
}

pub fn singular_values(w: &DMatrix<f64>) -> Result<Spectrum, SpectralError> {
    check_finite(w)?;
    let (rows, cols) = w.shape();
    let mut values: Vec<f64> = if rows == 1 || cols == 1 {
        vec![w.norm()]
    } else {
        w.clone()
            .singular_values()
            .iter()
            .map(|v| v.max(0.0))
            .collect()
    };
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(Spectrum {
        singular_values: values,
        rows,
        cols,
    })
}

pub fn estimate_snr(w: &DMatrix<f64>) -> Result<SnrEstimate, SpectralError> {
    Ok(snr_from_spectrum(&singular_values(w)?))
}

pub fn snr_from_spectrum(spectrum: &Spectrum) -> SnrEstimate {
    let sv = &spectrum.singular_values;
    let (m, n) = (spectrum.rows as f64, spectrum.cols as f64);
    let rank = sv.len();
    let long = m.max(n);
    let lower = rank.div_ceil(2);
    let lower_mean_sq = sv[rank - lower..].iter().map(|s| s * s).sum::<f64>() / lower as f64;
    let q = mp_lower_partial_mean(rank as f64 / long, lower as f64 / rank as f64);
    let noise_scale = (lower_mean_sq / (long * q)).sqrt();
    let noise_threshold = noise_scale * (m.sqrt() + n.sqrt());

    let (mut signal_energy, mut noise_energy) = (0.0, 0.0);
    for &s in sv {
        if s > noise_threshold {
            signal_energy += s * s;
        } else {
            noise_energy += s * s;
        }
    }
    SnrEstimate {
        snr: signal_energy / (noise_energy + EPSILON),
        noise_threshold,
        noise_scale,
        signal_energy,
        noise_energy,
    }
}

const MP_NODES: usize = 4096;

/// Mean of a unit-mean Marchenko–Pastur variable (aspect ratio `beta` in
/// (0, 1]) restricted to its lowest `mass` quantile range.
///
/// Integrates in the angle `x = a + (b - a)(1 - cos θ)/2`, which removes the
/// square-root singularities at both support edges.
pub fn mp_lower_partial_mean(beta: f64, mass: f64) -> f64 {
    let beta = beta.clamp(f64::MIN_POSITIVE, 1.0);
    let mass = mass.clamp(f64::MIN_POSITIVE, 1.0);
    let root = beta.sqrt();
    let (a, b) = ((1.0 - root).powi(2), (1.0 + root).powi(2));
    let half_width = (b - a) / 2.0;
    let step = std::f64::consts::PI / MP_NODES as f64;

    let nodes: Vec<(f64, f64)> = (0..MP_NODES)
        .map(|i| {
            let theta = (i as f64 + 0.5) * step;
            let x = a + half_width * (1.0 - theta.cos());
            let sin = theta.sin();
            // density(x) dx with density = sqrt((b-x)(x-a)) / (2π β x)
            let w = half_width * half_width * sin * sin
                / (2.0 * std::f64::consts::PI * beta * x)
                * step;
            (x, w)
        })
        .collect();
    let total: f64 = nodes.iter().map(|(_, w)| w).sum();

    let (mut acc_mass, mut acc_moment) = (0.0, 0.0);
    for (x, w) in nodes {
        let w = w / total;
        if acc_mass + w >= mass {
            acc_moment += (mass - acc_mass) * x;
            return acc_moment / mass;
        }
        acc_mass += w;
        acc_moment += w * x;
    }
    acc_moment / acc_mass
}
