use crate::error::{Error, Result};

/// Off-diagonal Frobenius norm, relative to the full norm, at which Jacobi stops.
pub const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// Covariance eigenvalues, descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// `eigenvalue / trace`. All zero when the data has no variance.
    pub ratios: Vec<f64>,
    /// Unit principal directions, aligned with `eigenvalues`.
    pub directions: Vec<Vec<f64>>,
}

impl PcaResult {
    pub fn cumulative(&self, k: usize) -> f64 {
        self.ratios.iter().take(k).sum()
    }
}

/// Eigen-decomposition of a symmetric `n×n` row-major matrix by cyclic Jacobi
/// rotations. Returns unsorted eigenvalues and eigenvectors as columns of `V`
/// (`vecs[i][k]` is component `i` of vector `k`).
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if a.len() != n * n {
        return Err(Error::shape("symmetric_eigen", format!("{} entries for n = {n}", a.len())));
    }
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a[i * n..(i + 1) * n].to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off.sqrt() <= JACOBI_TOL * norm || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| m[i][i]).collect(), v))
}

/// Principal components of `rows` (n samples × d features) after centering.
pub fn pca(rows: &[Vec<f64>]) -> Result<PcaResult> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("pca", "rows must share a non-zero length"));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let ci = r[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= (n - 1) as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (vals, vecs) = symmetric_eigen(&cov, d)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| vals[k].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let ratios = if total > 0.0 { eigenvalues.iter().map(|e| e / total).collect() } else { vec![0.0; d] };
    let directions = order.iter().map(|&k| (0..d).map(|i| vecs[i][k]).collect()).collect();
    Ok(PcaResult { eigenvalues, ratios, directions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn rejects_single_row() {
        assert!(pca(&[vec![1.0, 2.0]]).is_err());
        assert!(pca(&[]).is_err());
    }

    #[test]
    fn isotropic_is_balanced() {
        let r = pca(&random_rows(20000, 2, 1)).unwrap();
        for q in &r.ratios {
            assert!((q - 0.5).abs() < 0.025, "{:?}", r.ratios);
        }
    }

    #[test]
    fn rank_one() {
        let dir = [1.0, -2.0, 0.5];
        let rows: Vec<Vec<f64>> = (0..10).map(|i| dir.iter().map(|x| x * (i as f64 - 3.0)).collect()).collect();
        let r = pca(&rows).unwrap();
        assert!((r.ratios[0] - 1.0).abs() < 1e-12);
        assert!(r.ratios[1].abs() < 1e-12 && r.ratios[2].abs() < 1e-12);
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos: f64 = r.directions[0].iter().zip(&dir).map(|(a, b)| a * b / norm).sum();
        assert!((cos.abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn jacobi_reconstructs() {
        let a = [4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 5.0];
        let (vals, v) = symmetric_eigen(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let rec: f64 = (0..3).map(|k| v[i][k] * vals[k] * v[j][k]).sum();
                assert!((rec - a[i * 3 + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_data_has_zero_ratios() {
        let r = pca(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(r.ratios, vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn ratio_invariants(seed in any::<u64>(), n in 2usize..30, d in 1usize..7) {
            let r = pca(&random_rows(n, d, seed)).unwrap();
            prop_assert!((r.ratios.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(r.ratios.iter().all(|&q| q >= 0.0));
            prop_assert!(r.ratios.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn permutation_and_offset_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let rows = random_rows(12, 4, seed);
            let base = pca(&rows).unwrap();
            let mut moved: Vec<Vec<f64>> = rows.iter().rev().map(|r| r.iter().map(|x| x + shift).collect()).collect();
            moved.rotate_left(5);
            let other = pca(&moved).unwrap();
            for (a, b) in base.ratios.iter().zip(&other.ratios) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
