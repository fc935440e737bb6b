//! Two-step Newton–Raphson estimation of the varying index coefficient model.
//!
//! Each outer iteration alternates a penalized Newton search over the spline
//! coefficients at fixed loadings with an unpenalized search over the free
//! loading coordinates at fixed coefficients, then renormalizes the loadings.
//!
//! Every Newton iteration freezes the weight `W = C̄⁻¹` at its starting point
//! and searches along the Gauss–Newton direction of `ḡᵀWḡ + λθ*ᵀDθ*`. The
//! accepted step always lowers that merit.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::data::LongitudinalDataset;
use crate::error::{FvicmError, Result};
use crate::linalg::{ridge_ls, spd_solve, sym_pinv};
use crate::qif::{PenaltySpec, QifModel, WorkingBasis};
use crate::spline::{min_max, place_knots, BasisSpec};
use crate::theta::{ThetaFree, ThetaFull, ThetaLayout};

/// Number of grid points used for fitted curves.
pub const CURVE_POINTS: usize = 201;
pub const Z_95: f64 = 1.959_963_984_540_054;
const INIT_RIDGE: f64 = 1e-6;
const ARMIJO: f64 = 1e-4;

/// How knots follow the loadings during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotPolicy {
    /// Re-place knots from `u = βᵀx` after every loading update.
    #[default]
    Recompute,
    /// Keep the knots placed from the starting loadings.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub degree: usize,
    pub num_knots: usize,
    pub lambda: f64,
    pub basis_kind: WorkingBasis,
    pub knot_policy: KnotPolicy,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub tol_theta: f64,
    pub tol_obj: f64,
    pub step_halving_max: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            num_knots: 2,
            lambda: 0.0,
            basis_kind: WorkingBasis::Exchangeable,
            knot_policy: KnotPolicy::Recompute,
            max_outer_iters: 200,
            max_inner_iters: 50,
            tol_theta: 1e-6,
            tol_obj: 1e-8,
            step_halving_max: 20,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(FvicmError::Config("spline degree must be at least 1".into()));
        }
        if !(self.tol_theta > 0.0) || !(self.tol_obj > 0.0) {
            return Err(FvicmError::Config("tolerances must be positive".into()));
        }
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return Err(FvicmError::Config("iteration caps must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(FvicmError::Config(format!(
                "penalty must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Fitted curve on a grid with pointwise 95% bands.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CurveGrid {
    pub u: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Merit before and after one accepted Newton step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub outer: usize,
    /// `true` for a loading step, `false` for a coefficient step.
    pub loading_step: bool,
    pub merit_before: f64,
    pub merit_after: f64,
    pub gradient_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct Covariance {
    /// Over full `θ`.
    pub acov: DMatrix<f64>,
    /// Over free `θ*`.
    pub acov_free: DMatrix<f64>,
    pub se: DVector<f64>,
    pub pseudo_inverse: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: ThetaFull,
    pub theta_free_hat: ThetaFree,
    pub spec0: BasisSpec,
    pub spec1: BasisSpec,
    pub config: FitConfig,
    pub acov: DMatrix<f64>,
    pub acov_free: DMatrix<f64>,
    pub se: DVector<f64>,
    pub q_value: f64,
    /// `N⁻¹Q_N + λθ*ᵀDθ*` at the estimate.
    pub objective: f64,
    /// `ĠᵀC̄⁻¹Ġ` at the estimate.
    pub information: DMatrix<f64>,
    pub n_subjects: usize,
    pub n_moments: usize,
    pub mse: f64,
    pub regularized: bool,
    pub converged: bool,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub index_range0: (f64, f64),
    pub index_range1: (f64, f64),
    pub curve0: CurveGrid,
    pub curve1: CurveGrid,
}

impl FitResult {
    pub fn layout(&self) -> ThetaLayout {
        self.theta_hat.layout()
    }

    /// Free parameter count `k = dim(θ*)`.
    pub fn k(&self) -> usize {
        self.layout().free_dim()
    }

    /// Rebuild the QIF problem at the estimate.
    pub fn model<'a>(&self, data: &'a LongitudinalDataset) -> Result<QifModel<'a>> {
        let mut m = QifModel::new(data, self.spec0.clone(), self.spec1.clone(), self.config.basis_kind)?;
        m.set_variance_scale(self.mse.max(f64::MIN_POSITIVE));
        Ok(m)
    }

    /// Standard errors of `β₀` and `β₁`, in that order.
    pub fn loading_se(&self) -> (DVector<f64>, DVector<f64>) {
        let p = self.layout().p;
        (self.se.rows(0, p).into_owned(), self.se.rows(p, p).into_owned())
    }

    pub fn curves(&self, n_points: usize) -> (CurveGrid, CurveGrid) {
        eval_curves(self, n_points)
    }
}

/// Starting point: both loadings at `(1,…,1)/√p`, coefficients by ridge least squares.
pub fn initialize(data: &LongitudinalDataset, spec0: &BasisSpec, spec1: &BasisSpec) -> Result<ThetaFull> {
    let p = data.p();
    let beta = DVector::from_element(p, 1.0 / (p as f64).sqrt());
    let design = stacked_design(data, &beta, &beta, spec0, spec1);
    let y = data.stacked_y();
    let (d0, d1) = (spec0.dim(), spec1.dim());
    let coef = ridge_ls(&design, &y, INIT_RIDGE).unwrap_or_else(|| {
        warn!("initial least squares failed; starting from the response mean");
        let mut c = DVector::zeros(d0 + d1);
        c[0] = y.mean();
        c
    });
    Ok(ThetaFull {
        beta0: beta.clone(),
        beta1: beta,
        gamma0: coef.rows(0, d0).into_owned(),
        gamma1: coef.rows(d0, d1).into_owned(),
    })
}

/// Stacked `[B(β₀ᵀx), G·B(β₁ᵀx)]` over all observations.
pub fn stacked_design(
    data: &LongitudinalDataset,
    beta0: &DVector<f64>,
    beta1: &DVector<f64>,
    spec0: &BasisSpec,
    spec1: &BasisSpec,
) -> DMatrix<f64> {
    let (d0, d1) = (spec0.dim(), spec1.dim());
    let mut out = DMatrix::zeros(data.n_obs(), d0 + d1);
    let mut b0 = vec![0.0; d0];
    let mut b1 = vec![0.0; d1];
    let mut r = 0;
    for s in data.subjects() {
        let g = s.genotype();
        for row in s.x.row_iter() {
            spec0.eval_into(row.dot(&beta0.transpose()), &mut b0);
            spec1.eval_into(row.dot(&beta1.transpose()), &mut b1);
            for c in 0..d0 {
                out[(r, c)] = b0[c];
            }
            for c in 0..d1 {
                out[(r, d0 + c)] = g * b1[c];
            }
            r += 1;
        }
    }
    out
}

/// Basis pair with knots placed from the index values at `theta`.
pub fn specs_at(data: &LongitudinalDataset, config: &FitConfig, beta0: &DVector<f64>, beta1: &DVector<f64>) -> Result<(BasisSpec, BasisSpec)> {
    let u0 = data.index_values(beta0);
    let u1 = data.index_values(beta1);
    Ok((
        BasisSpec::new(config.degree, place_knots(&u0, config.num_knots)?)?,
        BasisSpec::new(config.degree, place_knots(&u1, config.num_knots)?)?,
    ))
}

/// Fit from the default starting point with knots placed at the starting loadings.
pub fn fit(data: &LongitudinalDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let p = data.p();
    let beta = DVector::from_element(p, 1.0 / (p as f64).sqrt());
    let (spec0, spec1) = specs_at(data, config, &beta, &beta)?;
    let start = initialize(data, &spec0, &spec1)?;
    fit_from(data, config, spec0, spec1, start)
}

/// Fit from a given starting point and basis pair.
pub fn fit_from(
    data: &LongitudinalDataset,
    config: &FitConfig,
    spec0: BasisSpec,
    spec1: BasisSpec,
    start: ThetaFull,
) -> Result<FitResult> {
    config.validate()?;
    if spec0.degree() != config.degree || spec1.degree() != config.degree {
        return Err(FvicmError::Config("basis degree differs from the configured degree".into()));
    }
    let layout = ThetaLayout::new(data.p(), spec0.dim(), spec1.dim());
    if start.layout() != layout {
        return Err(FvicmError::Dimension(format!(
            "starting value layout {:?} does not match {layout:?}",
            start.layout()
        )));
    }
    if data.n_subjects() < layout.free_dim() {
        warn!(
            "{} subjects for {} free parameters; estimates may be unstable",
            data.n_subjects(),
            layout.free_dim()
        );
    }
    let mut state = FitState::new(data, config, spec0, spec1, start.normalized()?.to_free()?)?;
    state.run()?;
    state.finish()
}

struct FitState<'a> {
    data: &'a LongitudinalDataset,
    config: &'a FitConfig,
    model: QifModel<'a>,
    penalty: PenaltySpec,
    theta: ThetaFree,
    sigma2: f64,
    steps: Vec<StepRecord>,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

enum Block {
    Coefficients,
    Loadings,
}

impl<'a> FitState<'a> {
    fn new(
        data: &'a LongitudinalDataset,
        config: &'a FitConfig,
        spec0: BasisSpec,
        spec1: BasisSpec,
        theta: ThetaFree,
    ) -> Result<Self> {
        let penalty = PenaltySpec::new(config.lambda, data.p(), &spec0, &spec1)?;
        let model = QifModel::new(data, spec0, spec1, config.basis_kind)?;
        Ok(Self {
            data,
            config,
            model,
            penalty,
            theta,
            sigma2: 1.0,
            steps: Vec::new(),
            trace: Vec::new(),
            converged: false,
            iterations: 0,
        })
    }

    fn objective(&self) -> Result<f64> {
        let v = self.model.qif_value(&self.theta)?;
        Ok(v.q / self.data.n_subjects() as f64 + self.penalty.value(&self.theta.to_vector()))
    }

    fn run(&mut self) -> Result<()> {
        let mut f_old = self.objective()?;
        self.trace.push(f_old);
        for outer in 1..=self.config.max_outer_iters {
            self.iterations = outer;
            let before = self.theta.to_full()?.to_vector();
            if self.config.knot_policy == KnotPolicy::Recompute && outer > 1 {
                self.refresh_knots()?;
            }
            self.model.set_variance_scale(self.sigma2);
            self.newton(Block::Coefficients, outer)?;
            self.newton(Block::Loadings, outer)?;
            // Step 3: normalize and fix signs; a safeguard in free coordinates.
            self.theta = self.theta.to_full()?.normalized()?.to_free()?;
            let full = self.theta.to_full()?;
            debug_assert!(full.satisfies_constraints(1e-10));
            let ev = self.model.qif_value(&self.theta)?;
            self.sigma2 = self.mean_sq_residual()?;
            let f_new = ev.q / self.data.n_subjects() as f64 + self.penalty.value(&self.theta.to_vector());
            self.trace.push(f_new);
            let after = full.to_vector();
            let dtheta = if before.len() == after.len() {
                (after - before).amax()
            } else {
                f64::INFINITY
            };
            debug!("outer {outer}: objective {f_new:.6e}, max|Δθ| {dtheta:.3e}");
            if dtheta < self.config.tol_theta || (f_new - f_old).abs() <= self.config.tol_obj * f_old.abs() {
                self.converged = true;
                break;
            }
            f_old = f_new;
        }
        if !self.converged {
            warn!("fit stopped at the iteration cap without converging");
        }
        Ok(())
    }

    fn mean_sq_residual(&self) -> Result<f64> {
        let full = self.theta.to_full()?;
        let design = stacked_design(self.data, &full.beta0, &full.beta1, self.model.spec0(), self.model.spec1());
        let gamma = DVector::from_iterator(
            full.gamma0.len() + full.gamma1.len(),
            full.gamma0.iter().chain(full.gamma1.iter()).copied(),
        );
        let res = self.data.stacked_y() - design * gamma;
        Ok(res.norm_squared() / res.len() as f64)
    }

    /// Re-place knots at the current loadings and carry the current curves over
    /// to the new bases by least squares at the observed index values.
    fn refresh_knots(&mut self) -> Result<()> {
        let full = self.theta.to_full()?;
        let (new0, new1) = specs_at(self.data, self.config, &full.beta0, &full.beta1)?;
        if &new0 == self.model.spec0() && &new1 == self.model.spec1() {
            return Ok(());
        }
        let u0 = self.data.index_values(&full.beta0);
        let u1 = self.data.index_values(&full.beta1);
        let gamma0 = reproject(&u0, self.model.spec0(), &full.gamma0, &new0);
        let gamma1 = reproject(&u1, self.model.spec1(), &full.gamma1, &new1);
        self.theta.gamma0 = gamma0;
        self.theta.gamma1 = gamma1;
        self.penalty = PenaltySpec::new(self.config.lambda, self.data.p(), &new0, &new1)?;
        self.model = QifModel::new(self.data, new0, new1, self.config.basis_kind)?;
        Ok(())
    }

    fn newton(&mut self, block: Block, outer: usize) -> Result<()> {
        let layout = self.theta.layout();
        let range = match block {
            Block::Coefficients => layout.free_gamma_range(),
            Block::Loadings => layout.free_beta_range(),
        };
        if range.is_empty() {
            return Ok(());
        }
        for _ in 0..self.config.max_inner_iters {
            let pe = self.model.penalized_objective(&self.theta, &self.penalty)?;
            let weight = pe.eval.weight;
            let f0 = pe.value;
            let grad = pe.gradient.rows(range.start, range.len()).into_owned();
            if grad.amax() == 0.0 {
                break;
            }
            let hess = pe.hessian.view((range.start, range.start), (range.len(), range.len())).into_owned();
            let (dir, fallback) = match spd_solve(&hess, &(-&grad)) {
                Some(d) if d.dot(&grad) < 0.0 => (d, false),
                _ => (-&grad, true),
            };
            let slope = grad.dot(&dir);
            let base = self.theta.to_vector();
            let mut accepted = None;
            let mut step = 1.0;
            for _ in 0..=self.config.step_halving_max {
                let mut v = base.clone();
                for (i, c) in range.clone().enumerate() {
                    v[c] += step * dir[i];
                }
                let trial = ThetaFree::from_vector(layout, &v)?;
                if trial.is_feasible() {
                    if let Ok(f) = self.model.frozen_objective(&trial, &weight, &self.penalty) {
                        if f.is_finite() && f <= f0 + ARMIJO * step * slope && f < f0 {
                            accepted = Some((trial, f, step));
                            break;
                        }
                    }
                }
                step *= 0.5;
            }
            let Some((trial, f1, step)) = accepted else {
                break;
            };
            self.steps.push(StepRecord {
                outer,
                loading_step: matches!(block, Block::Loadings),
                merit_before: f0,
                merit_after: f1,
                gradient_fallback: fallback,
            });
            self.theta = trial;
            let dmax = dir.amax() * step;
            if dmax < self.config.tol_theta || (f0 - f1).abs() <= self.config.tol_obj * f0.abs() {
                break;
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<FitResult> {
        let eval = self.model.evaluate(&self.theta)?;
        let cov = covariance_from(&eval.information(), &self.theta, self.data.n_subjects())?;
        let theta_hat = self.theta.to_full()?;
        let objective = eval.q / self.data.n_subjects() as f64 + self.penalty.value(&self.theta.to_vector());
        let mse = eval.mean_sq_residual;
        let range0 = min_max(&self.data.index_values(&theta_hat.beta0));
        let range1 = min_max(&self.data.index_values(&theta_hat.beta1));
        let mut result = FitResult {
            theta_free_hat: self.theta,
            theta_hat,
            spec0: self.model.spec0().clone(),
            spec1: self.model.spec1().clone(),
            config: self.config.clone(),
            acov: cov.acov,
            acov_free: cov.acov_free,
            se: cov.se,
            q_value: eval.q,
            objective,
            information: eval.information(),
            n_subjects: self.data.n_subjects(),
            n_moments: self.model.n_moments(),
            mse,
            regularized: eval.regularized,
            converged: self.converged,
            iterations: self.iterations,
            objective_trace: self.trace,
            steps: self.steps,
            index_range0: range0,
            index_range1: range1,
            curve0: CurveGrid::empty(),
            curve1: CurveGrid::empty(),
        };
        let (c0, c1) = eval_curves(&result, CURVE_POINTS);
        result.curve0 = c0;
        result.curve1 = c1;
        Ok(result)
    }
}

/// Least-squares coefficients on `new` reproducing `B_old(u)ᵀγ` at the points `u`.
fn reproject(u: &[f64], old: &BasisSpec, gamma: &DVector<f64>, new: &BasisSpec) -> DVector<f64> {
    let target = DVector::from_iterator(u.len(), u.iter().map(|&v| old.eval(v).dot(gamma)));
    let design = DMatrix::from_fn(u.len(), new.dim(), |r, c| {
        let mut b = vec![0.0; new.dim()];
        new.eval_into(u[r], &mut b);
        b[c]
    });
    ridge_ls(&design, &target, 1e-10).unwrap_or_else(|| DVector::zeros(new.dim()))
}

/// `acov = J (ĠᵀC̄⁻¹Ġ)⁻¹ Jᵀ / N` and standard errors.
pub fn covariance_from(information: &DMatrix<f64>, theta: &ThetaFree, n_subjects: usize) -> Result<Covariance> {
    let n = n_subjects as f64;
    let (acov_free, pseudo_inverse) = match information.clone().cholesky() {
        Some(ch) => (ch.inverse() / n, false),
        None => {
            warn!("information matrix is singular; using a pseudo-inverse");
            let (inv, _) = sym_pinv(information, 1e-12);
            (inv / n, true)
        }
    };
    let acov_free = (&acov_free + acov_free.transpose()) * 0.5;
    let j = theta.jacobian()?;
    let acov = &j * &acov_free * j.transpose();
    let acov = (&acov + acov.transpose()) * 0.5;
    let se = acov.diagonal().map(|v| v.max(0.0).sqrt());
    Ok(Covariance {
        acov,
        acov_free,
        se,
        pseudo_inverse,
    })
}

/// Covariance at an arbitrary point of a QIF problem.
pub fn asymptotic_covariance(model: &QifModel<'_>, theta: &ThetaFree) -> Result<Covariance> {
    let eval = model.evaluate(theta)?;
    covariance_from(&eval.information(), theta, model.data().n_subjects())
}

impl CurveGrid {
    fn empty() -> Self {
        Self {
            u: Vec::new(),
            estimate: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Evenly spaced grid of `n` points over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `m̂_l(u) = B(u)ᵀγ̂_l` with bands `± 1.96 sqrt(B(u)ᵀ acov_γl B(u))`, loadings held fixed.
pub fn eval_curves(fit: &FitResult, n_points: usize) -> (CurveGrid, CurveGrid) {
    let [_, _, g0, g1] = fit.layout().full_offsets();
    let d0 = fit.spec0.dim();
    let d1 = fit.spec1.dim();
    let c0 = curve(&fit.spec0, &fit.theta_hat.gamma0, &fit.acov.view((g0, g0), (d0, d0)).into_owned(), fit.index_range0, n_points);
    let c1 = curve(&fit.spec1, &fit.theta_hat.gamma1, &fit.acov.view((g1, g1), (d1, d1)).into_owned(), fit.index_range1, n_points);
    (c0, c1)
}

pub fn curve(spec: &BasisSpec, gamma: &DVector<f64>, cov: &DMatrix<f64>, range: (f64, f64), n_points: usize) -> CurveGrid {
    let u = linspace(range.0, range.1, n_points);
    let mut out = CurveGrid {
        estimate: Vec::with_capacity(u.len()),
        lower: Vec::with_capacity(u.len()),
        upper: Vec::with_capacity(u.len()),
        u,
    };
    for &x in &out.u {
        let b = spec.eval(x);
        let m = b.dot(gamma);
        let half = Z_95 * b.dot(&(cov * &b)).max(0.0).sqrt();
        out.estimate.push(m);
        out.lower.push(m - half);
        out.upper.push(m + half);
    }
    out
}
