//! Independent reference implementations and fixture builders shared by the
//! integration tests.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use spearmm::rng;

pub fn gaussian(rows: usize, cols: usize, seed: u64, label: &str) -> DMatrix<f64> {
    let mut r = rng::stream(seed, label);
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut r);
        z
    })
}

pub fn unit_vector(n: usize, seed: u64, label: &str) -> DMatrix<f64> {
    let v = gaussian(n, 1, seed, label);
    let norm = v.norm();
    v / norm
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in m.iter_mut() {
                    let (mkp, mkq) = (row[p], row[q]);
                    row[p] = c * mkp - s * mkq;
                    row[q] = s * mkp + c * mkq;
                }
                let (rp, rq) = (m[p].clone(), m[q].clone());
                for k in 0..n {
                    m[p][k] = c * rp[k] - s * rq[k];
                    m[q][k] = s * rp[k] + c * rq[k];
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// Singular values via the eigenvalues of the smaller Gram matrix, descending.
pub fn gram_singular_values(w: &DMatrix<f64>) -> Vec<f64> {
    let gram = if w.nrows() >= w.ncols() {
        w.transpose() * w
    } else {
        w * w.transpose()
    };
    let mut s: Vec<f64> = jacobi_eigenvalues(&gram)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Element-by-element spherical interpolation written from the textbook
/// formula with no fallbacks beyond the parallel case.
pub fn scalar_slerp(a: &[f32], b: &[f32], t: f64) -> Vec<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += a[i] as f64 * a[i] as f64;
        nb += b[i] as f64 * b[i] as f64;
    }
    let cos = dot / (na.sqrt() * nb.sqrt());
    let omega = cos.clamp(-1.0, 1.0).acos();
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let (x, y) = (a[i] as f64, b[i] as f64);
        if omega.sin().abs() < 1e-9 {
            out.push((1.0 - t) * x + t * y);
        } else {
            out.push((((1.0 - t) * omega).sin() * x + (t * omega).sin() * y) / omega.sin());
        }
    }
    out
}
