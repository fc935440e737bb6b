use fvicm::data::{LongitudinalDataset, Subject};
use fvicm::lmm::build_lmm_at;
use fvicm::qif::{mean_and_jacobian, PenaltySpec, QifModel, WorkingBasis};
use fvicm::select::{bic, choose, effective_df, Candidate, Gof};
use fvicm::spline::BasisSpec;
use fvicm::theta::{ThetaFree, ThetaFull};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_data(n: usize, t: usize, seed: u64, genotype: impl Fn(usize) -> u8) -> LongitudinalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..n)
        .map(|i| {
            let x = DMatrix::from_fn(t, 3, |_, _| rng.random::<f64>());
            let y = (0..t).map(|r| x[(r, 0)].sin() + 0.5 * rng.random::<f64>()).collect();
            Subject::new(i.to_string(), y, x, genotype(i))
        })
        .collect();
    LongitudinalDataset::new(subjects).unwrap()
}

fn knots_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(1u32..99, 0..4).prop_map(|s| s.into_iter().map(|k| k as f64 / 100.0).collect())
}

fn free_point(seed: u64, d0: usize, d1: usize) -> ThetaFree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tail = || DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
    let (beta0_tail, beta1_tail) = (tail(), tail());
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    ThetaFree {
        beta0_tail,
        beta1_tail,
        gamma0: DVector::from_fn(d0, |_, _| rng.random_range(-1.0..1.0)),
        gamma1: DVector::from_fn(d1, |_, _| rng.random_range(-1.0..1.0)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_dimension_and_derivatives(degree in 1usize..5, knots in knots_strategy(), u in 0.0f64..1.0) {
        let spec = BasisSpec::new(degree, knots.clone()).unwrap();
        prop_assert_eq!(spec.dim(), degree + knots.len() + 1);
        prop_assert_eq!(spec.eval(u).len(), spec.dim());
        prop_assume!(knots.iter().all(|k| (u - k).abs() > 1e-3));
        let h = 1e-6;
        let fd = (spec.eval(u + h) - spec.eval(u - h)) / (2.0 * h);
        let d = spec.deriv(u).unwrap();
        prop_assert!((fd - d).amax() < 1e-6);
    }

    #[test]
    fn basis_is_continuous_at_knots(degree in 1usize..5, knots in knots_strategy()) {
        let spec = BasisSpec::new(degree, knots.clone()).unwrap();
        for k in knots {
            prop_assert!((spec.eval(k + 1e-9) - spec.eval(k - 1e-9)).amax() < 1e-6);
        }
    }

    #[test]
    fn free_point_maps_to_unit_loadings(a in -0.6f64..0.6, b in -0.6f64..0.6, c in -0.6f64..0.6) {
        let th = ThetaFree {
            beta0_tail: DVector::from_vec(vec![a, b]),
            beta1_tail: DVector::from_vec(vec![c, a]),
            gamma0: DVector::from_vec(vec![1.0]),
            gamma1: DVector::from_vec(vec![2.0]),
        };
        let full = th.to_full().unwrap();
        prop_assert!(full.satisfies_constraints(1e-12));
        prop_assert!((full.beta0.norm() - 1.0).abs() < 1e-12 && full.beta0[0] > 0.0);
        let back = full.to_free().unwrap();
        prop_assert!((back.to_vector() - th.to_vector()).amax() < 1e-14);
    }

    #[test]
    fn bic_increases_with_parameter_count(q in 0.0f64..100.0, k in 1usize..40, n in 2.0f64..1e4, h in 2usize..4) {
        prop_assert!(bic(q, k + 1, n, h) > bic(q, k, n, h));
    }

    #[test]
    fn effective_df_shrinks_with_penalty(seed in 0u64..1000, l in 1e-6f64..1e2) {
        let s0 = BasisSpec::new(2, vec![0.3, 0.6]).unwrap();
        let s1 = BasisSpec::new(2, vec![0.5]).unwrap();
        let pen = |lambda| PenaltySpec::new(lambda, 3, &s0, &s1).unwrap();
        let k = pen(0.0).free_mask().len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(k + 3, k, |_, _| rng.random_range(-1.0..1.0));
        let info = a.transpose() * a;
        let small = effective_df(&info, &pen(l));
        let large = effective_df(&info, &pen(2.0 * l));
        prop_assert!((effective_df(&info, &pen(0.0)) - k as f64).abs() < 1e-8);
        prop_assert!(large <= small + 1e-10);
        prop_assert!(small <= k as f64 + 1e-10);
        prop_assert!(large >= pen(0.0).n_unpenalized() as f64 - 1e-10);
    }

    #[test]
    fn choose_is_the_scan_minimum(bics in prop::collection::vec((0u32..20, 1usize..4, 1usize..30), 1..12)) {
        let cands: Vec<Candidate> = bics
            .iter()
            .map(|&(b, degree, k)| Candidate {
                degree,
                num_knots: 0,
                lambda: 0.0,
                q: 0.0,
                k,
                r: 2 * k,
                bic: b as f64,
                gof: Gof::Saturated,
                converged: true,
            })
            .collect();
        let i = choose(&cands).unwrap();
        for c in &cands {
            let key = (c.bic, c.k, c.degree);
            let best = (cands[i].bic, cands[i].k, cands[i].degree);
            prop_assert!(best <= key);
        }
    }

    #[test]
    fn qif_is_nonnegative_with_symmetric_psd_information(seed in 0u64..500) {
        let data = random_data(40, 4, seed, |i| (i % 3) as u8);
        let s0 = BasisSpec::new(2, vec![0.7]).unwrap();
        let s1 = BasisSpec::new(2, vec![0.8]).unwrap();
        let model = QifModel::new(&data, s0.clone(), s1.clone(), WorkingBasis::Ar1).unwrap();
        let ev = model.evaluate(&free_point(seed, s0.dim(), s1.dim())).unwrap();
        prop_assert!(ev.q >= 0.0);
        let m = ev.information();
        prop_assert!((&m - m.transpose()).amax() <= 1e-9 * m.amax());
        let min = m.symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-9 * m.amax());
    }
}

#[test]
fn penalty_vanishes_on_polynomial_coefficients() {
    let s = BasisSpec::new(3, vec![0.2, 0.5]).unwrap();
    let pen = PenaltySpec::new(0.7, 3, &s, &s).unwrap();
    let mut th = free_point(3, s.dim(), s.dim());
    for g in [&mut th.gamma0, &mut th.gamma1] {
        g.rows_mut(4, 2).fill(0.0);
    }
    assert_eq!(pen.value(&th.to_vector()), 0.0);
    th.gamma1[5] = 2.0;
    assert!((pen.value(&th.to_vector()) - 0.7 * 4.0).abs() < 1e-15);
}

#[test]
fn unpenalized_objective_is_q_over_n() {
    let data = random_data(30, 5, 2, |i| (i % 3) as u8);
    let s = BasisSpec::new(2, vec![0.8]).unwrap();
    let model = QifModel::new(&data, s.clone(), s.clone(), WorkingBasis::Ar1).unwrap();
    let th = free_point(9, s.dim(), s.dim());
    let pen = PenaltySpec::new(0.0, 3, &s, &s).unwrap();
    let obj = model.penalized_objective(&th, &pen).unwrap();
    assert!((obj.value - obj.eval.q / 30.0).abs() < 1e-14 * obj.value.max(1.0));
}

#[test]
fn moments_vanish_at_zero_residuals() {
    let data = random_data(25, 4, 5, |i| (i % 3) as u8);
    let s = BasisSpec::new(2, vec![0.9]).unwrap();
    let th = free_point(4, s.dim(), s.dim());
    let means = mean_and_jacobian(&th.to_full().unwrap(), &data, &s, &s).unwrap();
    let y = DVector::from_iterator(data.n_obs(), means.iter().flat_map(|m| m.mu.iter().copied()));
    let exact = data.with_responses(&y).unwrap();
    for kind in [WorkingBasis::Exchangeable, WorkingBasis::Ar1, WorkingBasis::Independence] {
        let model = QifModel::new(&exact, s.clone(), s.clone(), kind).unwrap();
        assert!(model.gbar(&th).unwrap().amax() < 1e-13);
    }
}

#[test]
fn single_moment_is_the_gee_score() {
    let data = random_data(25, 4, 6, |i| (i % 3) as u8);
    let s = BasisSpec::new(2, vec![0.9]).unwrap();
    let th = free_point(8, s.dim(), s.dim());
    let mut model = QifModel::new(&data, s.clone(), s.clone(), WorkingBasis::Independence).unwrap();
    model.set_variance_scale(1.0);
    let full = th.to_full().unwrap();
    let j = th.jacobian().unwrap();
    let means = mean_and_jacobian(&full, &data, &s, &s).unwrap();
    let mut score = DVector::zeros(j.ncols());
    for (m, subj) in means.iter().zip(data.subjects()) {
        score += (&m.jacobian * &j).transpose() * (&subj.y - &m.mu);
    }
    score /= data.n_subjects() as f64;
    assert!((model.gbar(&th).unwrap() - score).amax() < 1e-12);
}

#[test]
fn mixed_model_design_shapes() {
    let b = DVector::from_element(3, 1.0 / 3f64.sqrt());
    let s = BasisSpec::new(2, vec![0.6, 1.0]).unwrap();
    let none = random_data(10, 3, 1, |_| 0);
    let d = build_lmm_at(&none, &b, &b, &s, &s).unwrap();
    assert_eq!(d.w1.amax(), 0.0);
    assert_eq!(d.z1.amax(), 0.0);
    assert_eq!((d.z0.ncols(), d.w0.ncols()), (2, 3));

    let p = BasisSpec::polynomial(2);
    let d = build_lmm_at(&none, &b, &b, &p, &p).unwrap();
    assert_eq!((d.z0.ncols(), d.z1.ncols()), (0, 0));

    // One row, genotype 2: W₁ = G(1, u, u²), Z₁ = G(u − κ)₊².
    let x = DMatrix::from_row_slice(1, 3, &[0.3, 0.6, 0.9]);
    let one = LongitudinalDataset::new(vec![Subject::new("a", vec![0.0], x, 2)]).unwrap();
    let d = build_lmm_at(&one, &b, &b, &s, &s).unwrap();
    let u = 1.8 / 3f64.sqrt();
    let want_w = [2.0, 2.0 * u, 2.0 * u * u];
    for c in 0..3 {
        assert!((d.w1[(0, c)] - want_w[c]).abs() < 1e-14);
        assert!((d.w0[(0, c)] - want_w[c] / 2.0).abs() < 1e-14);
    }
    assert!((d.z1[(0, 1)] - 2.0 * (u - 1.0f64).powi(2)).abs() < 1e-14);
    assert!((d.z1[(0, 0)] - 2.0 * (u - 0.6f64).powi(2)).abs() < 1e-14);
}

#[test]
fn full_vector_round_trip() {
    let th = free_point(1, 4, 5).to_full().unwrap();
    let back = ThetaFull::from_vector(th.layout(), &th.to_vector()).unwrap();
    assert_eq!(back, th);
}
