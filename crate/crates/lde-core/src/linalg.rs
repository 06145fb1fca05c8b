//! Dense matrix kernels shared by the graph ops and the expansion module.

use crate::error::{LdeError, Result};
use crate::tensor::Tensor;

/// C[m,n] += A[m,k] × B[k,n]. ikj loop order so the inner loop is an axpy
/// over contiguous rows.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C[m,n] += A[m,k] × B[n,k]ᵀ. Row-by-row dot products, both operands
/// traversed contiguously.
pub fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] += s;
        }
    }
}

pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_bt_acc(a, b, &mut c, m, k, n);
    c
}

/// C[m,n] += A[k,m]ᵀ × B[k,n].
pub fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_at_acc(a, b, &mut c, m, k, n);
    c
}

/// Lower-triangular L with L·Lᵀ = M + jitter·I. On a failed pivot the jitter
/// escalates ×10 (from 1e-10 if it was zero) until it exceeds 1e-2.
pub fn cholesky_psd(m: &Tensor, jitter: f64) -> Result<Tensor> {
    let d = match m.shape() {
        [r, c] if r == c => *r,
        s => return Err(LdeError::shape(format!("cholesky_psd wants a square matrix, got {s:?}"))),
    };
    if jitter < 0.0 {
        return Err(LdeError::numeric(format!("cholesky_psd: negative jitter {jitter}")));
    }
    let a = m.data();
    for i in 0..d {
        for j in 0..i {
            if (a[i * d + j] - a[j * d + i]).abs() > 1e-8 {
                return Err(LdeError::numeric(format!(
                    "cholesky_psd: asymmetric at ({i},{j}): {} vs {}",
                    a[i * d + j],
                    a[j * d + i]
                )));
            }
        }
    }

    let mut eps = jitter;
    loop {
        match try_cholesky(a, d, eps) {
            Ok(l) => return Ok(Tensor::new(vec![d, d], l).expect("shape")),
            Err(pivot) => {
                let next = if eps == 0.0 { 1e-10 } else { eps * 10.0 };
                if next > 1e-2 {
                    return Err(LdeError::numeric(format!(
                        "cholesky_psd: matrix stayed indefinite up to jitter 1e-2 \
                         (smallest pivot {pivot:.3e})"
                    )));
                }
                eps = next;
            }
        }
    }
}

/// Cholesky–Banachiewicz on M + eps·I; Err carries the offending pivot.
fn try_cholesky(a: &[f64], d: usize, eps: f64) -> std::result::Result<Vec<f64>, f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            if i == j {
                s += eps;
            }
            for p in 0..j {
                s -= l[i * d + p] * l[j * d + p];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(s);
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = crate::rng::Rng::new(11);
        for _ in 0..20 {
            let (m, k, n) = (1 + rng.range(6), 1 + rng.range(6), 1 + rng.range(6));
            let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            let want = naive_matmul(&a, &b, m, k, n);
            let got = matmul(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
            }
            // B stored transposed: bt[j*k+p] = b[p*n+j]
            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let got_bt = matmul_bt(&a, &bt, m, k, n);
            for (g, w) in got_bt.iter().zip(&want) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
            }
            // A stored transposed: at[p*m+i] = a[i*k+p]
            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let got_at = matmul_at(&at, &b, m, k, n);
            for (g, w) in got_at.iter().zip(&want) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_identity_is_identity() {
        let l = cholesky_psd(&Tensor::eye(4), 0.0).unwrap();
        assert_eq!(l, Tensor::eye(4));
    }

    #[test]
    fn cholesky_known_factor() {
        let m = Tensor::new(vec![2, 2], vec![4.0, 2.0, 2.0, 3.0]).unwrap();
        let l = cholesky_psd(&m, 0.0).unwrap();
        let want = [2.0, 0.0, 1.0, 2f64.sqrt()];
        for (g, w) in l.data().iter().zip(&want) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_singular_with_jitter() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let l = cholesky_psd(&m, 1e-6).unwrap();
        let ld = l.data();
        // reconstruct L·Lᵀ and compare against M + 1e-6·I
        let rec = matmul_bt(ld, ld, 2, 2, 2);
        let want = [1.0 + 1e-6, 1.0, 1.0, 1.0 + 1e-6];
        let mut num = 0.0;
        let mut den = 0.0;
        for (r, w) in rec.iter().zip(&want) {
            num += (r - w) * (r - w);
            den += w * w;
        }
        assert!((num / den).sqrt() < 1e-8);
    }

    #[test]
    fn cholesky_reconstruction_on_random_psd() {
        let mut rng = crate::rng::Rng::new(3);
        for _ in 0..20 {
            let d = 1 + rng.range(8);
            let g: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
            // M = GᵀG is PSD
            let m = matmul_at(&g, &g, d, d, d);
            let mt = Tensor::new(vec![d, d], m.clone()).unwrap();
            let l = cholesky_psd(&mt, 1e-9).unwrap();
            let rec = matmul_bt(l.data(), l.data(), d, d, d);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let w = m[i * d + j] + if i == j { 1e-9 } else { 0.0 };
                    let r = rec[i * d + j];
                    num += (r - w) * (r - w);
                    den += w * w;
                }
            }
            assert!((num / den).sqrt() < 1e-8, "relative error too big at d={d}");
        }
    }

    #[test]
    fn cholesky_rejects_negative_definite() {
        let m = Tensor::new(vec![2, 2], vec![-1.0, 0.0, 0.0, -1.0]).unwrap();
        let err = cholesky_psd(&m, 0.0).unwrap_err();
        assert!(err.to_string().contains("pivot"), "{err}");
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(cholesky_psd(&m, 0.0).is_err());
    }
}
