//! Small dense symmetric linear algebra in f64 (row-major `n × n`).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors in columns.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        bail!(Shape, "expected {n}x{n} matrix, got {} values", a.len());
    }
    if a.iter().any(|x| !x.is_finite()) {
        bail!(NonFinite, "matrix has non-finite entries");
    }
    let mut m = a.to_vec();
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (libm::fabs(theta) + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| m[i * n + i]).collect(), v))
}

/// `V·diag(f(λ))·Vᵀ`.
pub fn spectral_map(a: &[f64], n: usize, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let (w, v) = symmetric_eigen(a, n)?;
    let fw: Vec<f64> = w.into_iter().map(f).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| v[i * n + k] * fw[k] * v[j * n + k]).sum();
        }
    }
    Ok(out)
}

/// Principal square root of a PSD matrix; negative round-off eigenvalues clamp to 0.
pub fn sqrtm_psd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    spectral_map(a, n, |x| libm::sqrt(x.max(0.0)))
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

pub fn trace(a: &[f64], n: usize) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}

/// `S = A^{1/2}·(A^{1/2} B A^{1/2})^{1/2}·A^{−1/2}`, the square root of
/// `A·B` for SPD `A` and PSD `B`. `S² = AB` and `tr S = tr (A^{1/2} B A^{1/2})^{1/2}`.
pub fn product_sqrt(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let ah = sqrtm_psd(a, n)?;
    let ahi = spectral_map(a, n, |x| if x > 0.0 { 1.0 / libm::sqrt(x) } else { 0.0 })?;
    let inner = matmul(&matmul(&ah, b, n), &ah, n);
    let r = sqrtm_psd(&inner, n)?;
    Ok(matmul(&matmul(&ah, &r, n), &ahi, n))
}
