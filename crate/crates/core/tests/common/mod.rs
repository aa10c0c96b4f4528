//! Independent reference computations shared by integration tests.

#![allow(dead_code)]

use rtransfer_core::rng::RngState;

pub mod cases;
pub mod contracts;

/// Singular values of a row-major `rows × cols` matrix by one-sided Jacobi
/// rotations, sorted in descending order.
pub fn jacobi_singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    // orthogonalize the columns of the taller orientation
    let (m, n, mut u) = if rows >= cols {
        (rows, cols, a.to_vec())
    } else {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        (cols, rows, t)
    };
    let at = |u: &[f64], r: usize, c: usize| u[r * n + c];
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    let (x, y) = (at(&u, r, p), at(&u, r, q));
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(f64::MIN_POSITIVE));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (x, y) = (at(&u, r, p), at(&u, r, q));
                    u[r * n + p] = c * x - s * y;
                    u[r * n + q] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n)
        .map(|c| (0..m).map(|r| at(&u, r, c).powi(2)).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Largest singular value via [`jacobi_singular_values`].
pub fn oracle_spectral_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    jacobi_singular_values(a, rows, cols)[0]
}

/// Standard-normal matrix entries.
pub fn gaussian(n: usize, rng: &mut RngState) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Maximum of `f` over a `steps × steps` grid spanning `[lo0, hi0] × [lo1, hi1]`.
pub fn grid_max(lo: [f64; 2], hi: [f64; 2], steps: usize, f: impl Fn(f64, f64) -> f64) -> f64 {
    let at = |i: usize, d: usize| lo[d] + (hi[d] - lo[d]) * i as f64 / (steps - 1) as f64;
    let mut best = f64::NEG_INFINITY;
    for i in 0..steps {
        for j in 0..steps {
            best = best.max(f(at(i, 0), at(j, 1)));
        }
    }
    best
}

/// Cross-entropy of a logit row against `label`, computed directly.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}
