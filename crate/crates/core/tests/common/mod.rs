//! Dense-matrix oracles shared by the oracle tests and the acceptance suite.
#![allow(dead_code)]

use fvicm::data::{LongitudinalDataset, Subject};
use fvicm::fit::asymptotic_covariance;
use fvicm::lmm::{mixed_model_solution, LmmDesign, MixedSolution, VarianceComponents};
use fvicm::qif::{QifModel, WorkingBasis};
use fvicm::spline::BasisSpec;
use fvicm::theta::ThetaFree;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KNOT0: f64 = 0.7;
pub const KNOT1: f64 = 0.8;

pub fn toy_data() -> LongitudinalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    // Unbalanced clusters: with equal sizes the exchangeable moments are
    // exactly collinear along the intercept directions.
    let subjects = (0..60)
        .map(|i| {
            let t = 3 + i % 4;
            let x = DMatrix::from_fn(t, 2, |_, _| rng.random::<f64>());
            let g = (i % 3) as u8;
            let y = (0..t).map(|r| x[(r, 0)] - x[(r, 1)] * g as f64 + rng.random::<f64>()).collect();
            Subject::new(format!("id{i}"), y, x, g)
        })
        .collect();
    LongitudinalDataset::new(subjects).unwrap()
}

pub fn toy_theta() -> ThetaFree {
    ThetaFree {
        beta0_tail: DVector::from_vec(vec![0.6]),
        beta1_tail: DVector::from_vec(vec![-0.3]),
        gamma0: DVector::from_vec(vec![0.2, 0.9, -0.4, 0.7]),
        gamma1: DVector::from_vec(vec![-0.1, 0.5, 0.3, -0.6]),
    }
}

/// `(1, u, u², (u − κ)₊²)` and its derivative.
pub fn basis(u: f64, k: f64) -> ([f64; 4], [f64; 4]) {
    let t = (u - k).max(0.0);
    ([1.0, u, u * u, t * t], [0.0, 1.0, 2.0 * u, 2.0 * t])
}

/// Per-subject extended scores built from dense matrices.
pub fn dense_scores(data: &LongitudinalDataset, th: &ThetaFree, sigma2: f64, m2: impl Fn(usize) -> DMatrix<f64>) -> Vec<DVector<f64>> {
    let (t0, t1) = (th.beta0_tail[0], th.beta1_tail[0]);
    let (s0, s1) = ((1.0 - t0 * t0).sqrt(), (1.0 - t1 * t1).sqrt());
    data.subjects()
        .iter()
        .map(|s| {
            let n = s.len();
            let g = s.genotype();
            let mut mu = DVector::zeros(n);
            let mut d = DMatrix::zeros(n, 10);
            for j in 0..n {
                let (x1, x2) = (s.x[(j, 0)], s.x[(j, 1)]);
                let (b0, db0) = basis(s0 * x1 + t0 * x2, KNOT0);
                let (b1, db1) = basis(s1 * x1 + t1 * x2, KNOT1);
                let m0: f64 = (0..4).map(|c| b0[c] * th.gamma0[c]).sum();
                let m1: f64 = (0..4).map(|c| b1[c] * th.gamma1[c]).sum();
                let dm0: f64 = (0..4).map(|c| db0[c] * th.gamma0[c]).sum();
                let dm1: f64 = (0..4).map(|c| db1[c] * th.gamma1[c]).sum();
                mu[j] = m0 + g * m1;
                d[(j, 0)] = dm0 * (x2 - x1 * t0 / s0);
                d[(j, 1)] = g * dm1 * (x2 - x1 * t1 / s1);
                for c in 0..4 {
                    d[(j, 2 + c)] = b0[c];
                    d[(j, 6 + c)] = g * b1[c];
                }
            }
            let resid = &s.y - mu;
            let mats = [DMatrix::identity(n, n), m2(n)];
            let mut out = DVector::zeros(20);
            for (m, mat) in mats.iter().enumerate() {
                let block = d.transpose() * (mat / sigma2) * &resid;
                out.rows_mut(10 * m, 10).copy_from(&block);
            }
            out
        })
        .collect()
}

pub fn toy_design() -> LmmDesign {
    // Two subjects with six and five visits, q = 1, K = 1.
    let u0: [f64; 11] = [0.1, 0.35, 0.5, 0.62, 0.8, 0.95, 0.05, 0.3, 0.55, 0.7, 0.9];
    let u1: [f64; 11] = [0.2, 0.4, 0.45, 0.6, 0.85, 0.9, 0.15, 0.25, 0.5, 0.75, 0.99];
    let g = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0];
    let n = u0.len();
    LmmDesign {
        w0: DMatrix::from_fn(n, 2, |i, j| u0[i].powi(j as i32)),
        w1: DMatrix::from_fn(n, 2, |i, j| u1[i].powi(j as i32) * g[i]),
        z0: DMatrix::from_fn(n, 1, |i, _| (u0[i] - 0.5f64).max(0.0)),
        z1: DMatrix::from_fn(n, 1, |i, _| (u1[i] - 0.5f64).max(0.0) * g[i]),
        cluster_sizes: vec![6, 5],
    }
}

pub fn toy_y() -> DVector<f64> {
    DVector::from_vec(vec![0.3, -0.1, 0.8, 0.4, 1.1, 0.9, -0.4, 0.2, 0.7, 1.5, 2.1])
}

/// Dense generalized least squares with `V = σ²_a UUᵀ + σ²₀Z₀Z₀ᵀ + σ²₁Z₁Z₁ᵀ + σ²_εI`.
pub fn dense_solution(d: &LmmDesign, y: &DVector<f64>, v: &VarianceComponents) -> MixedSolution {
    let n = d.n_obs();
    let u = d.intercept_carrier();
    let cov = &u * u.transpose() * v.intercept
        + &d.z0 * d.z0.transpose() * v.b0
        + &d.z1 * d.z1.transpose() * v.b1
        + DMatrix::identity(n, n) * v.error;
    let vinv = cov.try_inverse().unwrap();
    let x = d.fixed();
    let beta = (x.transpose() * &vinv * &x).try_inverse().unwrap() * x.transpose() * &vinv * y;
    let r = &vinv * (y - &x * &beta);
    MixedSolution {
        fixed: beta,
        b0: d.z0.transpose() * &r * v.b0,
        b1: d.z1.transpose() * &r * v.b1,
        intercepts: u.transpose() * &r * v.intercept,
    }
}

pub fn exchangeable_m2(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

pub fn ar1_m2(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i: usize, j: usize| if i.abs_diff(j) == 1 { 1.0 } else { 0.0 })
}

/// Largest relative discrepancy of `Q` against the dense construction, over both bases.
pub fn qif_oracle_error() -> f64 {
    let data = toy_data();
    let th = toy_theta();
    let s0 = BasisSpec::new(2, vec![KNOT0]).unwrap();
    let s1 = BasisSpec::new(2, vec![KNOT1]).unwrap();
    let mut worst: f64 = 0.0;
    for (kind, m2) in [(WorkingBasis::Exchangeable, exchangeable_m2 as fn(usize) -> DMatrix<f64>), (WorkingBasis::Ar1, ar1_m2)] {
        let mut model = QifModel::new(&data, s0.clone(), s1.clone(), kind).unwrap();
        model.set_variance_scale(0.7);
        let scores = dense_scores(&data, &th, 0.7, m2);
        let n = scores.len() as f64;
        let gbar = scores.iter().fold(DVector::zeros(20), |a, g| a + g) / n;
        let cbar = scores.iter().fold(DMatrix::zeros(20, 20), |a, g| a + g * g.transpose()) / n;
        let q = n * gbar.dot(&(cbar.try_inverse().unwrap() * &gbar));
        let got = model.qif_value(&th).unwrap().q;
        worst = worst.max((got - q).abs() / q.max(1.0));
    }
    worst
}

/// Largest absolute BLUP and fixed-effect discrepancy against dense GLS.
pub fn blup_oracle_error() -> f64 {
    let d = toy_design();
    let y = toy_y();
    let v = VarianceComponents { intercept: 0.3, b0: 0.7, b1: 1.2, error: 0.2 };
    let got = mixed_model_solution(&d, &y, &v).unwrap();
    let want = dense_solution(&d, &y, &v);
    [
        (&got.fixed - &want.fixed).amax(),
        (&got.b0 - &want.b0).amax(),
        (&got.b1 - &want.b1).amax(),
        (&got.intercepts - &want.intercepts).amax(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Free and full sandwich covariances built by hand from the moment Jacobian.
pub fn dense_sandwich(data: &LongitudinalDataset, th: &ThetaFree, model: &QifModel<'_>) -> (DMatrix<f64>, DMatrix<f64>) {
    let ev = model.evaluate(th).unwrap();
    let n = data.n_subjects() as f64;
    // Full GMM sandwich (ĠᵀWĠ)⁻¹ ĠᵀWC̄WĠ (ĠᵀWĠ)⁻¹ / N with W = C̄⁻¹.
    let w = ev.cbar.clone().try_inverse().unwrap();
    let bread = (ev.gdot.transpose() * &w * &ev.gdot).try_inverse().unwrap();
    let meat = ev.gdot.transpose() * &w * &ev.cbar * &w * &ev.gdot;
    let free = &bread * meat * &bread / n;
    // Chain rule to (β₀, β₁, γ₀, γ₁) by hand.
    let mut jac = DMatrix::zeros(12, 10);
    for (l, t) in [th.beta0_tail[0], th.beta1_tail[0]].into_iter().enumerate() {
        jac[(2 * l, l)] = -t / (1.0 - t * t).sqrt();
        jac[(2 * l + 1, l)] = 1.0;
    }
    for c in 0..8 {
        jac[(4 + c, 2 + c)] = 1.0;
    }
    let full = &jac * &free * jac.transpose();
    (free, full)
}

/// Largest discrepancy of the full covariance relative to its largest entry.
pub fn sandwich_oracle_error() -> f64 {
    let data = toy_data();
    let th = toy_theta();
    let s0 = BasisSpec::new(2, vec![KNOT0]).unwrap();
    let s1 = BasisSpec::new(2, vec![KNOT1]).unwrap();
    let model = QifModel::new(&data, s0, s1, WorkingBasis::Exchangeable).unwrap();
    let (_, full) = dense_sandwich(&data, &th, &model);
    let got = asymptotic_covariance(&model, &th).unwrap();
    (&got.acov - &full).amax() / full.amax()
}

