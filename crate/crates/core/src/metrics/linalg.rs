//! Small dense linear algebra for the metric suite: moments, cyclic Jacobi
//! eigendecomposition of symmetric matrices, and the PSD matrix square root.

use crate::error::{CoreError, Result};

pub fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut mu = vec![0.0; d];
    for row in rows {
        for (m, v) in mu.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= rows.len() as f64;
    }
    mu
}

/// Unbiased sample covariance (divides by n - 1).
pub fn covariance(rows: &[Vec<f64>], mu: &[f64]) -> Vec<Vec<f64>> {
    let d = mu.len();
    let n = rows.len();
    let mut cov = vec![vec![0.0; d]; d];
    for row in rows {
        for i in 0..d {
            let ci = row[i] - mu[i];
            for j in i..d {
                cov[i][j] += ci * (row[j] - mu[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }
    cov
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let k = b.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            let av = a[i][p];
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i][j] += av * b[p][j];
            }
        }
    }
    out
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi
/// rotations. Returns `(eigenvalues, columns-as-eigenvectors)`.
pub fn symmetric_eigen(mat: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = mat.len();
    let mut a: Vec<Vec<f64>> = mat.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = mat
        .iter()
        .flat_map(|r| r.iter())
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(1e-300);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() <= 1e-14 * scale * n as f64 {
            let eigs: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
            return Ok((eigs, v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p][j];
                    let aqj = a[q][j];
                    a[p][j] = c * apj - s * aqj;
                    a[q][j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i][p];
                    let viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }
    // Diagnostics for a failed decomposition.
    let mut max_off = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_off = max_off.max(a[i][j].abs());
        }
    }
    Err(CoreError::numeric(
        "symmetric_eigen",
        format!(
            "Jacobi failed to converge after {JACOBI_MAX_SWEEPS} sweeps \
             (size {n}, max off-diagonal {max_off:.3e}, scale {scale:.3e})"
        ),
    ))
}

pub fn symmetric_eigenvalues(mat: &[Vec<f64>]) -> Result<Vec<f64>> {
    symmetric_eigen(mat).map(|(e, _)| e)
}

/// Square root of a symmetric PSD matrix via eigendecomposition; small
/// negative eigenvalues from roundoff clamp to zero.
pub fn sqrtm_psd(mat: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = mat.len();
    let (eigs, vecs) = symmetric_eigen(mat)?;
    let roots: Vec<f64> = eigs.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // V diag(sqrt(l)) V^T
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (k, &r) in roots.iter().enumerate() {
                acc += vecs[i][k] * r * vecs[j][k];
            }
            out[i][j] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn eigen_recovers_diagonal() {
        let m = vec![vec![3.0, 0.0], vec![0.0, 1.0]];
        let (mut eigs, _) = symmetric_eigen(&m).unwrap();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eigs[0] - 1.0).abs() < 1e-12);
        assert!((eigs[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sqrtm_squares_back() {
        // Random PSD matrix: A = B B^T, then sqrtm(A)^2 ~= A.
        let mut rng = Rng::new(7);
        let n = 6;
        let b: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.normal()).collect())
            .collect();
        let bt: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| b[i][j]).collect()).collect();
        let a = matmul(&b, &bt);
        let root = sqrtm_psd(&a).unwrap();
        let sq = matmul(&root, &root);
        for i in 0..n {
            for j in 0..n {
                assert!(
                    (sq[i][j] - a[i][j]).abs() < 1e-9,
                    "sqrtm mismatch at ({i},{j}): {} vs {}",
                    sq[i][j],
                    a[i][j]
                );
            }
        }
    }

    #[test]
    fn covariance_of_known_data() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let mu = mean_vector(&rows);
        assert_eq!(mu, vec![3.0, 4.0]);
        let cov = covariance(&rows, &mu);
        assert!((cov[0][0] - 4.0).abs() < 1e-12);
        assert!((cov[0][1] - 4.0).abs() < 1e-12);
        assert!((cov[1][1] - 4.0).abs() < 1e-12);
    }
}
