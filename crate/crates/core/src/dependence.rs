//! Distance covariance and energy distance estimators.
//!
//! `dcov_u_fast` is the O(n^2) U-centered form of the degree-4 U-statistic;
//! `dcov_u_bruteforce` averages the kernel over every 4-subset and exists to
//! validate it. Both estimate the squared distance covariance
//! `E|U-U'||V-V'| - 2E|U-U'||V-V''| + E|U-U'|E|V-V'|` without bias, so finite
//! samples can come out slightly negative. No clamping is applied.
//!
//! Summation order is fixed (row-major over pairs, row totals added in index
//! order), so results are bit-identical under either [`Execution`] policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SampleMatrix;
use crate::par::{self, Execution};

/// Row count above which the default estimators split rows across threads.
const PARALLEL_ROWS: usize = 256;

fn default_exec(n: usize) -> Execution {
    if n >= PARALLEL_ROWS {
        Execution::available()
    } else {
        Execution::Sequential
    }
}

/// Symmetric `n x n` matrix of pairwise Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }
}

#[inline]
pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn pairwise_distances(x: &SampleMatrix) -> DistanceMatrix {
    pairwise_distances_with(x, default_exec(x.rows()))
}

pub fn pairwise_distances_with(x: &SampleMatrix, exec: Execution) -> DistanceMatrix {
    let n = x.rows();
    let mut entries = vec![0.0; n * n];
    par::for_each_chunk_mut(exec, &mut entries, n, |i, row| {
        let xi = x.row(i);
        for (j, d) in row.iter_mut().enumerate() {
            if j != i {
                *d = euclidean(xi, x.row(j));
            }
        }
    });
    DistanceMatrix { n, entries }
}

fn check_paired(u: &SampleMatrix, v: &SampleMatrix, min: usize, what: &'static str) -> Result<usize> {
    if u.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: what,
            left: vec![u.rows(), u.cols()],
            right: vec![v.rows(), v.cols()],
        });
    }
    if u.rows() < min {
        return Err(Error::TooFewSamples {
            what,
            min,
            got: u.rows(),
        });
    }
    Ok(u.rows())
}

/// Degree-4 kernel of the distance covariance U-statistic.
///
/// `u[k]`, `v[k]` are the two parts of observation `k`. With `a_ij = |u_i - u_j|`
/// and `b_ij = |v_i - v_j|`, all sums over ordered pairs `i != j`:
///
/// `h = 1/4 sum a_ij b_ij + 1/24 (sum a_ij)(sum b_ij) - 1/4 sum_i (sum_j a_ij)(sum_j b_ij)`
pub fn dcov_kernel_h(u: &[&[f64]], v: &[&[f64]]) -> Result<f64> {
    if u.len() != 4 || v.len() != 4 {
        return Err(Error::invalid(format!(
            "kernel takes exactly 4 observations, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let mut a = [[0.0; 4]; 4];
    let mut b = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                a[i][j] = euclidean(u[i], u[j]);
                b[i][j] = euclidean(v[i], v[j]);
            }
        }
    }
    Ok(kernel_from_distances(&a, &b))
}

fn kernel_from_distances(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> f64 {
    let mut paired = 0.0;
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    let mut star = 0.0;
    for i in 0..4 {
        let mut ra = 0.0;
        let mut rb = 0.0;
        for j in 0..4 {
            if i != j {
                paired += a[i][j] * b[i][j];
                ra += a[i][j];
                rb += b[i][j];
            }
        }
        sum_a += ra;
        sum_b += rb;
        star += ra * rb;
    }
    paired / 4.0 + sum_a * sum_b / 24.0 - star / 4.0
}

/// Kernel average over all `C(n, 4)` subsets. O(n^4); for validation at small n.
pub fn dcov_u_bruteforce(u: &SampleMatrix, v: &SampleMatrix) -> Result<f64> {
    let n = check_paired(u, v, 4, "U-statistic undefined below degree 4")?;
    let da = pairwise_distances_with(u, Execution::Sequential);
    let db = pairwise_distances_with(v, Execution::Sequential);
    let mut total = 0.0;
    let mut count = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    let idx = [i, j, k, l];
                    let mut a = [[0.0; 4]; 4];
                    let mut b = [[0.0; 4]; 4];
                    for (p, &ip) in idx.iter().enumerate() {
                        for (q, &iq) in idx.iter().enumerate() {
                            a[p][q] = da.get(ip, iq);
                            b[p][q] = db.get(ip, iq);
                        }
                    }
                    total += kernel_from_distances(&a, &b);
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// U-centered copy of an `n x n` matrix (diagonal set to zero), centering
/// rows by row sums and columns by column sums. Requires `n >= 3`.
pub(crate) fn u_center(d: &[f64], n: usize, exec: Execution) -> Vec<f64> {
    let row_sums = par::map_range(exec, n, |i| d[i * n..(i + 1) * n].iter().sum::<f64>());
    let col_sums = par::map_range(exec, n, |j| (0..n).map(|i| d[i * n + j]).sum::<f64>());
    let grand: f64 = row_sums.iter().sum();
    let nm2 = (n - 2) as f64;
    let shift = grand / ((n - 1) as f64 * nm2);
    let mut out = vec![0.0; n * n];
    par::for_each_chunk_mut(exec, &mut out, n, |i, row| {
        for (j, o) in row.iter_mut().enumerate() {
            if i != j {
                *o = d[i * n + j] - row_sums[i] / nm2 - col_sums[j] / nm2 + shift;
            }
        }
    });
    out
}

/// O(n^2) distance covariance U-statistic via U-centered distance matrices.
pub fn dcov_u_fast(u: &SampleMatrix, v: &SampleMatrix) -> Result<f64> {
    dcov_u_fast_with(u, v, default_exec(u.rows()))
}

pub fn dcov_u_fast_with(u: &SampleMatrix, v: &SampleMatrix, exec: Execution) -> Result<f64> {
    let n = check_paired(u, v, 4, "U-statistic undefined below degree 4")?;
    let a = u_center(pairwise_distances_with(u, exec).as_slice(), n, exec);
    let b = u_center(pairwise_distances_with(v, exec).as_slice(), n, exec);
    Ok(dcov_from_centered(&a, &b, n, exec))
}

pub(crate) fn dcov_from_centered(a: &[f64], b: &[f64], n: usize, exec: Execution) -> f64 {
    let rows = par::map_range(exec, n, |i| {
        let r = i * n..(i + 1) * n;
        a[r.clone()].iter().zip(&b[r]).map(|(x, y)| x * y).sum::<f64>()
    });
    rows.iter().sum::<f64>() / (n as f64 * (n - 3) as f64)
}

/// Energy distance over unordered pairs `i < j`, normalized by `C(n, 2)`.
pub fn energy_distance_empirical(u: &SampleMatrix, v: &SampleMatrix) -> Result<f64> {
    energy_distance_with(u, v, default_exec(u.rows()))
}

pub fn energy_distance_with(u: &SampleMatrix, v: &SampleMatrix, exec: Execution) -> Result<f64> {
    let n = check_paired(u, v, 2, "energy distance")?;
    if u.cols() != v.cols() {
        return Err(Error::ShapeMismatch {
            op: "energy distance",
            left: vec![u.rows(), u.cols()],
            right: vec![v.rows(), v.cols()],
        });
    }
    let rows = par::map_range(exec, n, |i| {
        let (ui, vi) = (u.row(i), v.row(i));
        let mut s = 0.0;
        for j in i + 1..n {
            let (uj, vj) = (u.row(j), v.row(j));
            s += euclidean(ui, vj) + euclidean(uj, vi) - euclidean(ui, uj) - euclidean(vi, vj);
        }
        s
    });
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(rows.iter().sum::<f64>() / pairs)
}

/// The three terms of the empirical objective for a representation sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub dcov_ry: f64,
    pub dcov_ra: f64,
    pub energy_gauss: f64,
    pub n: usize,
}

pub fn dependence_report(
    r: &SampleMatrix,
    y: &SampleMatrix,
    a: &SampleMatrix,
    gaussian_ref: &SampleMatrix,
) -> Result<DependenceReport> {
    let n = r.rows();
    for (name, m) in [("y", y), ("a", a), ("gaussian_ref", gaussian_ref)] {
        if m.rows() != n {
            return Err(Error::invalid(format!(
                "dependence_report: {name} has {} rows, representation has {n}",
                m.rows()
            )));
        }
    }
    if gaussian_ref.cols() != r.cols() {
        return Err(Error::ShapeMismatch {
            op: "dependence_report",
            left: vec![n, r.cols()],
            right: vec![gaussian_ref.rows(), gaussian_ref.cols()],
        });
    }
    if n < 4 {
        return Err(Error::TooFewSamples {
            what: "dependence_report",
            min: 4,
            got: n,
        });
    }
    let exec = default_exec(n);
    let rc = u_center(pairwise_distances_with(r, exec).as_slice(), n, exec);
    let yc = u_center(pairwise_distances_with(y, exec).as_slice(), n, exec);
    let ac = u_center(pairwise_distances_with(a, exec).as_slice(), n, exec);
    Ok(DependenceReport {
        dcov_ry: dcov_from_centered(&rc, &yc, n, exec),
        dcov_ra: dcov_from_centered(&rc, &ac, n, exec),
        energy_gauss: energy_distance_with(r, gaussian_ref, exec)?,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, rng: &mut ChaCha8Rng) -> SampleMatrix {
        SampleMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn three_four_five() {
        let x = SampleMatrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let d = pairwise_distances(&x);
        assert_eq!(d.as_slice(), &[0.0, 5.0, 5.0, 0.0]);
    }

    #[test]
    fn identical_rows_give_zero_distances() {
        let x = SampleMatrix::from_rows(&vec![vec![1.5, -2.0, 0.25]; 5]).unwrap();
        assert!(pairwise_distances(&x).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distances_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(6, 3, &mut rng);
        let d = pairwise_distances(&x);
        for i in 0..6 {
            for j in 0..6 {
                let mut s = 0.0;
                for k in 0..3 {
                    let t = x.get(i, k) - x.get(j, k);
                    s += t * t;
                }
                assert!((d.get(i, j) - s.sqrt()).abs() < 1e-15);
                assert_eq!(d.get(i, j), d.get(j, i));
                for k in 0..6 {
                    assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_finite_input_names_cell() {
        let err = SampleMatrix::new(2, 2, vec![0.0, 1.0, f64::NAN, 2.0]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteInput { row: 1, col: 0, .. }), "{err}");
    }

    #[test]
    fn kernel_constant_u_is_zero() {
        let u = [[1.0].as_slice(); 4];
        let v: Vec<Vec<f64>> = vec![vec![0.3], vec![-1.0], vec![2.0], vec![5.0]];
        let v: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
        assert_eq!(dcov_kernel_h(&u, &v).unwrap(), 0.0);
    }

    #[test]
    fn kernel_rejects_wrong_arity() {
        let u = [[1.0].as_slice(); 3];
        assert!(dcov_kernel_h(&u, &u).is_err());
    }

    #[test]
    fn kernel_symmetric_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random(4, 2, &mut rng);
        let v = random(4, 3, &mut rng);
        let base = {
            let ur: Vec<&[f64]> = (0..4).map(|i| u.row(i)).collect();
            let vr: Vec<&[f64]> = (0..4).map(|i| v.row(i)).collect();
            dcov_kernel_h(&ur, &vr).unwrap()
        };
        for perm in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 0, 3, 1]] {
            let ur: Vec<&[f64]> = perm.iter().map(|&i| u.row(i)).collect();
            let vr: Vec<&[f64]> = perm.iter().map(|&i| v.row(i)).collect();
            assert!((dcov_kernel_h(&ur, &vr).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn bruteforce_n4_is_single_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random(4, 2, &mut rng);
        let v = random(4, 1, &mut rng);
        let ur: Vec<&[f64]> = (0..4).map(|i| u.row(i)).collect();
        let vr: Vec<&[f64]> = (0..4).map(|i| v.row(i)).collect();
        assert_eq!(dcov_u_bruteforce(&u, &v).unwrap(), dcov_kernel_h(&ur, &vr).unwrap());
    }

    #[test]
    fn too_few_samples_rejected() {
        let u = SampleMatrix::column(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(dcov_u_bruteforce(&u, &u), Err(Error::TooFewSamples { .. })));
        assert!(matches!(dcov_u_fast(&u, &u), Err(Error::TooFewSamples { .. })));
        let one = SampleMatrix::column(vec![1.0]).unwrap();
        assert!(energy_distance_empirical(&one, &one).is_err());
    }

    #[test]
    fn constant_u_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = SampleMatrix::column(vec![2.5; 9]).unwrap();
        let v = random(9, 2, &mut rng);
        assert_eq!(dcov_u_bruteforce(&u, &v).unwrap(), 0.0);
        assert_eq!(dcov_u_fast(&u, &v).unwrap(), 0.0);
    }

    #[test]
    fn scale_by_two_and_three_gives_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random(7, 2, &mut rng);
        let v = random(7, 2, &mut rng);
        let base = dcov_u_bruteforce(&u, &v).unwrap();
        let scaled = dcov_u_bruteforce(&u.scaled(2.0), &v.scaled(3.0)).unwrap();
        assert!((scaled / base - 6.0).abs() < 1e-12, "{}", scaled / base);
    }

    #[test]
    fn energy_hand_example() {
        let u = SampleMatrix::column(vec![0.0, 0.0]).unwrap();
        let v = SampleMatrix::column(vec![1.0, 1.0]).unwrap();
        assert_eq!(energy_distance_empirical(&u, &v).unwrap(), 2.0);
    }

    #[test]
    fn energy_self_is_exactly_zero_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random(30, 3, &mut rng);
        let v = random(30, 3, &mut rng);
        assert_eq!(energy_distance_empirical(&u, &u).unwrap(), 0.0);
        let uv = energy_distance_empirical(&u, &v).unwrap();
        let vu = energy_distance_empirical(&v, &u).unwrap();
        assert!((uv - vu).abs() < 1e-12);
    }

    #[test]
    fn report_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random(8, 2, &mut rng);
        let y = random(7, 1, &mut rng);
        assert!(dependence_report(&r, &y, &y, &r).is_err());
        let g = random(8, 3, &mut rng);
        assert!(dependence_report(&r, &r, &r, &g).is_err());
    }

    #[test]
    fn report_r_equal_y_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random(16, 1, &mut rng);
        let a = random(16, 1, &mut rng);
        let g = random(16, 1, &mut rng);
        let rep = dependence_report(&r, &r, &a, &g).unwrap();
        let oracle = dcov_u_bruteforce(&r, &r).unwrap();
        assert!(oracle > 0.0);
        assert!((rep.dcov_ry - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()));
        assert!(rep.dcov_ra.is_finite() && rep.energy_gauss.is_finite());
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random(300, 4, &mut rng);
        let v = random(300, 2, &mut rng);
        assert_eq!(
            dcov_u_fast_with(&u, &v, Execution::Sequential).unwrap(),
            dcov_u_fast_with(&u, &v, Execution::Parallel).unwrap()
        );
        let w = random(300, 4, &mut rng);
        assert_eq!(
            energy_distance_with(&u, &w, Execution::Sequential).unwrap(),
            energy_distance_with(&u, &w, Execution::Parallel).unwrap()
        );
    }
}
