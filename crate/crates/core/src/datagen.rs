//! Seeded simulation generators.
//!
//! Binary examples draw `X ~ N(0, I_50)` and labels `Y, A ~ Bernoulli(sigmoid(f(X)))`,
//! `Bernoulli(sigmoid(g(X)))`. X, Y and A come from independent ChaCha
//! streams of the same seed, one row at a time, so a larger `n` extends a
//! smaller draw instead of reshuffling it.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::{Column, SampleBatch};
use crate::error::{Error, Result};
use crate::matrix::SampleMatrix;

pub const SIM_DIM: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Linear,
    Nonlinear,
}

/// Whether target and sensitive attribute share covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dependence {
    Independent,
    Dependent,
}

pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Target logit. `x` is zero-indexed, so `x[0]` is the first covariate.
pub fn target_logit(dep: Dependence, kind: Kind, x: &[f64]) -> f64 {
    match (dep, kind) {
        (Dependence::Independent, Kind::Linear) => x[0] + 2.0 * x[1] - 4.0 * x[2] + 1.0,
        (Dependence::Dependent, Kind::Linear) => x[0] + 2.0 * x[1] - 4.0 * x[2] + x[3] + 2.0 * x[4] + 1.0,
        (Dependence::Independent, Kind::Nonlinear) => x[0] + x[1] + x[1] * x[2] + (2.0 * x[2] * x[3]).sin() + 1.0,
        (Dependence::Dependent, Kind::Nonlinear) => {
            x[0] + x[1]
                + x[1] * x[2]
                + (2.0 * x[2] * x[3]).sin()
                + (x[4] + x[5]).powi(2)
                + x[7] * (x[6] * x[6] - 1.0).cos()
                - 1.0
        }
    }
}

/// Sensitive-attribute logit; identical for both dependence settings.
pub fn sensitive_logit(kind: Kind, x: &[f64]) -> f64 {
    match kind {
        Kind::Linear => x[3] + 2.0 * x[4] + x[5] - 1.0,
        Kind::Nonlinear => {
            (x[4] + x[5]).powi(2) + x[7] * (x[6] * x[6] - 1.0).cos() + (x[6] + 2.0 * x[7] - 3.0).exp() / 2.0 - 2.0
        }
    }
}

fn streams(seed: u64) -> [ChaCha8Rng; 3] {
    let mut out = [0u64, 1, 2].map(|_| ChaCha8Rng::seed_from_u64(seed));
    for (i, r) in out.iter_mut().enumerate() {
        r.set_stream(i as u64);
    }
    out
}

fn gaussian_rows(n: usize, p: usize, rng: &mut ChaCha8Rng) -> SampleMatrix {
    let data = (0..n * p).map(|_| StandardNormal.sample(rng)).collect();
    SampleMatrix::from_raw(n, p, data)
}

pub fn gen_example(dep: Dependence, kind: Kind, n: usize, seed: u64) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let [mut rx, mut ry, mut ra] = streams(seed);
    let x = gaussian_rows(n, SIM_DIM, &mut rx);
    let mut y = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        y.push(usize::from(ry.random::<f64>() < sigmoid(target_logit(dep, kind, row))));
        a.push(usize::from(ra.random::<f64>() < sigmoid(sensitive_logit(kind, row))));
    }
    let name = format!(
        "{}-{}",
        match dep {
            Dependence::Independent => "indep",
            Dependence::Dependent => "dep",
        },
        match kind {
            Kind::Linear => "linear",
            Kind::Nonlinear => "nonlinear",
        }
    );
    SampleBatch::new(
        x,
        Column::Classes { ids: y, num_classes: 2 },
        Column::Classes { ids: a, num_classes: 2 },
        format!("generator={name} seed={seed} n={n}"),
    )
}

/// Target and sensitive attribute on disjoint covariates.
pub fn gen_example_indep(kind: Kind, n: usize, seed: u64) -> Result<SampleBatch> {
    gen_example(Dependence::Independent, kind, n, seed)
}

/// Target and sensitive attribute sharing covariates.
pub fn gen_example_dep(kind: Kind, n: usize, seed: u64) -> Result<SampleBatch> {
    gen_example(Dependence::Dependent, kind, n, seed)
}

/// Gaussian linear model `Y = f(P^T X) + e_Y`, `A = g(Q^T X) + e_A`, `X ~ N(0, I_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCaseSpec {
    pub p: usize,
    /// `p x d_Y`, orthonormal columns.
    pub target_basis: DMatrix<f64>,
    /// `p x d_A`, orthonormal columns; may have zero columns.
    pub sensitive_basis: DMatrix<f64>,
    pub noise_y: f64,
    pub noise_a: f64,
}

fn orthonormality_error(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 0 {
        return 0.0;
    }
    (m.transpose() * m - DMatrix::identity(m.ncols(), m.ncols())).amax()
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Orthonormal basis of a random `dim`-dimensional subspace of `R^p`.
pub fn random_orthonormal(p: usize, dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    if dim == 0 {
        return DMatrix::zeros(p, 0);
    }
    let g = DMatrix::from_fn(p, dim, |_, _| StandardNormal.sample(rng));
    g.qr().q().columns(0, dim).into_owned()
}

impl LinearCaseSpec {
    pub fn new(target_basis: DMatrix<f64>, sensitive_basis: DMatrix<f64>, noise_y: f64, noise_a: f64) -> Result<Self> {
        let p = target_basis.nrows();
        if sensitive_basis.nrows() != p {
            return Err(Error::ShapeMismatch {
                op: "LinearCaseSpec",
                left: vec![p, target_basis.ncols()],
                right: vec![sensitive_basis.nrows(), sensitive_basis.ncols()],
            });
        }
        for (name, m) in [("P", &target_basis), ("Q", &sensitive_basis)] {
            if orthonormality_error(m) > 1e-10 {
                return Err(Error::invalid(format!("{name} does not have orthonormal columns")));
            }
        }
        if target_basis.ncols() == 0 {
            return Err(Error::invalid("P needs at least one column"));
        }
        Ok(Self {
            p,
            target_basis,
            sensitive_basis,
            noise_y,
            noise_a,
        })
    }

    /// Random orthonormal `P` and `Q` drawn independently.
    pub fn random(p: usize, d_y: usize, d_a: usize, noise: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pm = random_orthonormal(p, d_y, &mut rng);
        let qm = random_orthonormal(p, d_a, &mut rng);
        Self::new(pm, qm, noise, noise)
    }
}

fn to_sample_matrix(m: &DMatrix<f64>) -> SampleMatrix {
    let data = (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect();
    SampleMatrix::from_raw(m.nrows(), m.ncols(), data)
}

/// Linear case with identity link functions.
pub fn gen_linear_case(spec: &LinearCaseSpec, n: usize, seed: u64) -> Result<SampleBatch> {
    gen_linear_case_with(spec, n, seed, |v| v.to_vec(), |v| v.to_vec())
}

/// Linear case with user links: `f` maps `P^T x` to the target, `g` maps `Q^T x` to the attribute.
pub fn gen_linear_case_with<F, G>(spec: &LinearCaseSpec, n: usize, seed: u64, f: F, g: G) -> Result<SampleBatch>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let spec = LinearCaseSpec::new(
        spec.target_basis.clone(),
        spec.sensitive_basis.clone(),
        spec.noise_y,
        spec.noise_a,
    )?;
    let [mut rx, mut ry, mut ra] = streams(seed);
    let x = gaussian_rows(n, spec.p, &mut rx);
    let xm = DMatrix::from_row_slice(n, spec.p, x.as_slice());
    let py = &xm * &spec.target_basis;
    let qa = &xm * &spec.sensitive_basis;
    let mut ys = Vec::new();
    let mut as_ = Vec::new();
    let (mut dy, mut da) = (0, 0);
    for i in 0..n {
        let prow: Vec<f64> = py.row(i).iter().copied().collect();
        let qrow: Vec<f64> = qa.row(i).iter().copied().collect();
        let yv = f(&prow);
        let av = g(&qrow);
        dy = yv.len();
        da = av.len();
        ys.extend(yv.iter().map(|v| v + spec.noise_y * std_normal(&mut ry)));
        as_.extend(av.iter().map(|v| v + spec.noise_a * std_normal(&mut ra)));
    }
    if dy == 0 || da == 0 {
        return Err(Error::invalid("link functions must return at least one value"));
    }
    SampleBatch::new(
        x,
        Column::Real(SampleMatrix::new(n, dy, ys)?),
        Column::Real(SampleMatrix::new(n, da, as_)?),
        format!("generator=linear-case p={} seed={seed} n={n}", spec.p),
    )
}

/// Orthonormal basis of the column space of `(I - Q (Q^T Q)^{-1} Q^T) P`.
/// Returns a `p x 0` matrix when `span(P)` lies inside `span(Q)`.
pub fn oracle_subspace(spec: &LinearCaseSpec) -> DMatrix<f64> {
    let (pm, qm) = (&spec.target_basis, &spec.sensitive_basis);
    let projected = if qm.ncols() == 0 {
        pm.clone()
    } else {
        let gram = qm.transpose() * qm;
        let inv = gram.try_inverse().expect("Q has full column rank");
        pm - qm * (inv * (qm.transpose() * pm))
    };
    column_space(&projected, 1e-10)
}

/// Orthonormal basis for the column space, dropping singular values below `tol * max(1, s_max)`.
pub fn column_space(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let smax = svd.singular_values.max();
    let cutoff = tol * smax.max(1.0);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > cutoff)
        .collect();
    DMatrix::from_fn(m.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

/// `|B1 B1^T - B2 B2^T|_F / sqrt(2 max(d1, d2))`, in `[0, 1]`.
pub fn subspace_distance(b1: &DMatrix<f64>, b2: &DMatrix<f64>) -> Result<f64> {
    if b1.nrows() != b2.nrows() {
        return Err(Error::ShapeMismatch {
            op: "subspace_distance",
            left: vec![b1.nrows(), b1.ncols()],
            right: vec![b2.nrows(), b2.ncols()],
        });
    }
    for m in [b1, b2] {
        if orthonormality_error(m) > 1e-8 {
            return Err(Error::invalid("subspace_distance needs orthonormal bases"));
        }
    }
    let dmax = b1.ncols().max(b2.ncols());
    if dmax == 0 {
        return Ok(0.0);
    }
    let diff = b1 * b1.transpose() - b2 * b2.transpose();
    Ok(diff.norm() / (2.0 * dmax as f64).sqrt())
}

/// Orthonormal basis of the top-`k` right singular directions of a linear map
/// `x -> x W` with `W` stored `p x d` (so the directions live in `R^p`).
pub fn top_input_directions(weight: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let svd = weight.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let k = k.min(idx.len());
    DMatrix::from_fn(weight.nrows(), k, |r, c| u[(r, idx[c])])
}

pub fn basis_as_matrix(b: &DMatrix<f64>) -> SampleMatrix {
    to_sample_matrix(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dependence::dcov_u_fast;

    #[test]
    fn linear_target_logit_at_origin() {
        let x = vec![0.0; SIM_DIM];
        let p = sigmoid(target_logit(Dependence::Independent, Kind::Linear, &x));
        assert!((p - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn nonlinear_sensitive_logit_at_origin() {
        let x = vec![0.0; SIM_DIM];
        let expected = sigmoid((-3.0f64).exp() / 2.0 - 2.0);
        assert_eq!(sigmoid(sensitive_logit(Kind::Nonlinear, &x)), expected);
    }

    #[test]
    fn generators_are_seed_deterministic_and_extend() {
        let a = gen_example_dep(Kind::Nonlinear, 50, 3).unwrap();
        let b = gen_example_dep(Kind::Nonlinear, 50, 3).unwrap();
        assert_eq!(a, b);
        let longer = gen_example_dep(Kind::Nonlinear, 80, 3).unwrap();
        let idx: Vec<usize> = (0..50).collect();
        let prefix = longer.select(&idx);
        assert_eq!(prefix.x, a.x);
        assert_eq!(prefix.y, a.y);
        assert_eq!(prefix.a, a.a);
        assert_ne!(gen_example_dep(Kind::Nonlinear, 50, 4).unwrap().x, a.x);
    }

    #[test]
    fn independent_labels_are_uncorrelated() {
        let b = gen_example_indep(Kind::Linear, 100_000, 1).unwrap();
        let y: Vec<f64> = b.y.class_ids().unwrap().iter().map(|&v| v as f64).collect();
        let a: Vec<f64> = b.a.class_ids().unwrap().iter().map(|&v| v as f64).collect();
        let n = y.len() as f64;
        let (my, ma) = (y.iter().sum::<f64>() / n, a.iter().sum::<f64>() / n);
        let cov: f64 = y.iter().zip(&a).map(|(u, v)| (u - my) * (v - ma)).sum::<f64>() / n;
        let (sy, sa) = (
            (y.iter().map(|u| (u - my).powi(2)).sum::<f64>() / n).sqrt(),
            (a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n).sqrt(),
        );
        let corr = cov / (sy * sa);
        // standard error of a null correlation is about 1/sqrt(n)
        assert!(corr.abs() < 3.0 / n.sqrt(), "corr {corr}");
    }

    fn dcov_labels_mc(dep: Dependence, reps: usize) -> (f64, f64) {
        let vals: Vec<f64> = (0..reps)
            .map(|s| {
                let b = gen_example(dep, Kind::Nonlinear, 16, 1000 + s as u64).unwrap();
                dcov_u_fast(&b.y.to_matrix(), &b.a.to_matrix()).unwrap()
            })
            .collect();
        let m = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64;
        (m, (var / reps as f64).sqrt())
    }

    #[test]
    fn dependent_labels_show_positive_dcov() {
        let (m, se) = dcov_labels_mc(Dependence::Dependent, 4000);
        assert!(m > 3.0 * se, "mean {m}, se {se}");
    }

    #[test]
    fn independent_labels_dcov_centered_at_zero() {
        let (m, se) = dcov_labels_mc(Dependence::Independent, 4000);
        assert!(m.abs() < 3.0 * se, "mean {m}, se {se}");
    }

    #[test]
    fn linear_case_noiseless_identity() {
        let spec = LinearCaseSpec::random(6, 1, 1, 0.0, 2).unwrap();
        let b = gen_linear_case(&spec, 20, 3).unwrap();
        let Column::Real(y) = &b.y else { panic!() };
        for i in 0..20 {
            let expect: f64 = (0..6).map(|j| b.x.get(i, j) * spec.target_basis[(j, 0)]).sum();
            assert!((y.get(i, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn non_orthonormal_rejected() {
        let pm = DMatrix::from_element(4, 1, 1.0);
        let qm = DMatrix::zeros(4, 0);
        assert!(LinearCaseSpec::new(pm, qm, 0.0, 0.0).is_err());
    }

    #[test]
    fn oracle_with_orthogonal_q_is_span_p() {
        let mut pm = DMatrix::zeros(5, 2);
        pm[(0, 0)] = 1.0;
        pm[(1, 1)] = 1.0;
        let mut qm = DMatrix::zeros(5, 1);
        qm[(3, 0)] = 1.0;
        let spec = LinearCaseSpec::new(pm.clone(), qm, 0.0, 0.0).unwrap();
        let b = oracle_subspace(&spec);
        assert_eq!(b.ncols(), 2);
        assert!(subspace_distance(&b, &pm).unwrap() < 1e-10);
    }

    #[test]
    fn oracle_empty_q_and_p_equal_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pm = random_orthonormal(7, 2, &mut rng);
        let spec = LinearCaseSpec::new(pm.clone(), DMatrix::zeros(7, 0), 0.0, 0.0).unwrap();
        assert!(subspace_distance(&oracle_subspace(&spec), &pm).unwrap() < 1e-10);
        let spec = LinearCaseSpec::new(pm.clone(), pm.clone(), 0.0, 0.0).unwrap();
        assert_eq!(oracle_subspace(&spec).ncols(), 0);
    }

    #[test]
    fn oracle_is_orthogonal_to_q_and_matches_direct_projection() {
        let spec = LinearCaseSpec::random(12, 3, 4, 0.1, 5).unwrap();
        let b = oracle_subspace(&spec);
        assert_eq!(b.ncols(), 3);
        assert!((spec.sensitive_basis.transpose() * &b).amax() < 1e-10);
        // Q has orthonormal columns, so the projector is I - Q Q^T
        let qm = &spec.sensitive_basis;
        let direct = (DMatrix::identity(12, 12) - qm * qm.transpose()) * &spec.target_basis;
        let residual = &direct - &b * (b.transpose() * &direct);
        assert!(residual.amax() < 1e-10);
    }

    #[test]
    fn subspace_distance_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = random_orthonormal(6, 2, &mut rng);
        let rot = DMatrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        assert!(subspace_distance(&b, &(&b * rot)).unwrap() < 1e-10);
        let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let e2 = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        assert!((subspace_distance(&e1, &e2).unwrap() - 1.0).abs() < 1e-15);
        assert!(subspace_distance(&e1, &DMatrix::from_element(3, 1, 1.0)).is_err());
    }

    #[test]
    fn subspace_distance_matches_principal_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (d1, d2) in [(2, 2), (1, 3), (3, 2)] {
            let b1 = random_orthonormal(8, d1, &mut rng);
            let b2 = random_orthonormal(8, d2, &mut rng);
            let cosines = (b1.transpose() * &b2).singular_values();
            let sq = d1 as f64 + d2 as f64 - 2.0 * cosines.iter().map(|c| c * c).sum::<f64>();
            let oracle = sq.sqrt() / (2.0 * d1.max(d2) as f64).sqrt();
            assert!((subspace_distance(&b1, &b2).unwrap() - oracle).abs() < 1e-12);
        }
    }
}
